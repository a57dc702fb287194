"""Deployment-side fine-tuning: CSI flattening, column-resampling augmentation,
and the unsupervised SGD loop.

Augmentation rebuilds multi-user channel matrices by drawing single-user
columns i.i.d. uniformly (with replacement) from the flattened dataset, which
multiplies the effective dataset size far beyond the few real samples
collected at the deployed base station.  Augmented samples are materialized
lazily from column indices.

RNG order inside :func:`finetune` (for transcript tests): augmentation
indices, then per epoch one permutation of the pool followed by one dropout
seed per minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .beamforming import LinkConfig
from .channel import Dataset
from .model import (
    Mode,
    ModelParams,
    NetConfig,
    apply_update,
    evaluate_sum_rate,
    grad_with_stats,
)


@dataclass
class FlattenedCsi:
    """All user columns of a dataset side by side: (n_t, n_u * count).

    ``provenance[c]`` is the (sample index, user index) pair column c came
    from; columns are ordered sample-major then user-major.
    """

    columns: np.ndarray
    provenance: list[tuple[int, int]]

    @property
    def n_columns(self) -> int:
        return self.columns.shape[1]


@dataclass
class AugmentedDataset:
    """Channel matrices assembled from flattened columns, stored as indices.

    ``indices`` has shape (m, n_u); sample i is ``columns[:, indices[i]]``.
    ``max_distinct`` reports the combinatorial ceiling C(|F|, n_u) of distinct
    user subsets (not enforced; draws are with replacement).
    """

    flat: FlattenedCsi
    indices: np.ndarray

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    @property
    def max_distinct(self) -> int:
        return comb(self.flat.n_columns, self.indices.shape[1])

    def __len__(self) -> int:
        return self.m

    def sample(self, i: int) -> np.ndarray:
        return self.flat.columns[:, self.indices[i]]

    def batch(self, idx) -> np.ndarray:
        # (b, n_t, n_u) gather: columns is (n_t, |F|)
        return self.flat.columns[:, self.indices[idx]].transpose(1, 0, 2)

    def materialize(self) -> np.ndarray:
        return self.batch(np.arange(self.m))


def flatten_dataset(d: Dataset) -> FlattenedCsi:
    """Stack every sample's user columns, sample-major then user-major."""
    if len(d) == 0:
        raise ValueError("cannot flatten an empty dataset")
    count, n_t, n_u = d.samples.shape
    cols = d.samples.transpose(1, 0, 2).reshape(n_t, count * n_u)
    provenance = [(s, u) for s in range(count) for u in range(n_u)]
    return FlattenedCsi(np.ascontiguousarray(cols), provenance)


def augment(flat: FlattenedCsi, m: int, n_u: int, rng,
            no_duplicates: bool = False) -> AugmentedDataset:
    """Draw m samples of n_u columns i.i.d. uniform over the flattened columns.

    Draws are with replacement (duplicate columns within a sample are allowed,
    a deliberate regularizer); ``no_duplicates`` switches to within-sample
    sampling without replacement for ablations.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_cols = flat.n_columns
    if no_duplicates:
        if n_u > n_cols:
            raise ValueError("cannot draw without replacement: n_u exceeds |F|")
        indices = np.stack([rng.choice(n_cols, size=n_u, replace=False) for _ in range(m)])
    else:
        indices = rng.integers(0, n_cols, size=(m, n_u))
    return AugmentedDataset(flat, indices.astype(np.int64))


def finetune(params: ModelParams, cfg: NetConfig, d_target: Dataset, aug_m: int,
             tau: float, epochs: int, link: LinkConfig, rng,
             batch_size: int = 128, val_batch: np.ndarray | None = None,
             no_duplicates: bool = False):
    """Unsupervised fine-tuning of a backbone copy on the deployment domain.

    Builds the augmented pool once (``aug_m`` samples; ``aug_m = 0`` disables
    augmentation and tunes on the raw dataset), then runs ``epochs`` of
    mini-batch SGD with learning rate ``tau``.  Per epoch the Eval-mode sum
    rate on ``val_batch`` (held-out target samples) is recorded.  Returns the
    tuned parameters and a history with one row per epoch.
    """
    if len(d_target) == 0:
        raise ValueError("target dataset is empty")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    tuned = params.clone()
    if aug_m > 0:
        pool = augment(flatten_dataset(d_target), aug_m, cfg.n_u, rng,
                       no_duplicates=no_duplicates)
        pool_n = pool.m
    else:
        pool = None
        pool_n = len(d_target)
    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(pool_n)
        losses = []
        for start in range(0, pool_n, batch_size):
            idx = order[start : start + batch_size]
            batch = pool.batch(idx) if pool is not None else d_target.samples[idx]
            seed = int(rng.integers(0, 2**63))
            value, g, stats = grad_with_stats(tuned, cfg, batch, link, Mode.TRAIN, seed)
            tuned = apply_update(ModelParams(tuned.cfg, tuned.tensors, stats), g, tau)
            losses.append(value)
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "n_real_samples": len(d_target),
            "m": aug_m,
        }
        if val_batch is not None:
            row["val_sum_rate"] = evaluate_sum_rate(tuned, cfg, val_batch, link)
        history.append(row)
    return tuned, history
