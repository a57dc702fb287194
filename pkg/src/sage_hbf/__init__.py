"""Desk-scale massive-MIMO hybrid beamforming toolkit.

Trains domain-generalized precoder backbones over statistical channel
domains, fine-tunes them unsupervised in a shifted deployment domain with
column-resampling data augmentation, and benchmarks against classical and
learned baselines.
"""

__version__ = "0.1.0"

from .beamforming import HybridPrecoder, LinkConfig, normalize_power, sinr, sum_rate
from .channel import (
    AntennaLayout,
    Dataset,
    Domain,
    TargetDomainParams,
    normalize_dataset,
    read_dataset,
    sample_domain_batch,
    sample_target_batch,
    write_dataset,
)
from .model import Mode, ModelParams, NetConfig, init_params, load_params, save_params

__all__ = [
    "AntennaLayout",
    "Dataset",
    "Domain",
    "HybridPrecoder",
    "LinkConfig",
    "Mode",
    "ModelParams",
    "NetConfig",
    "TargetDomainParams",
    "init_params",
    "load_params",
    "normalize_dataset",
    "normalize_power",
    "read_dataset",
    "sample_domain_batch",
    "sample_target_batch",
    "save_params",
    "sinr",
    "sum_rate",
    "write_dataset",
]
