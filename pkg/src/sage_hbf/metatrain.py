"""Backbone training: meta-learning over channel domains plus baselines.

The meta update per epoch is: split domains into train/generalization
subsets; average per-domain gradients at the current parameters (L); take the
virtual inner step theta' = theta - alpha*L; average per-domain gradients at
theta' over the generalization subset (L'); apply theta <- theta -
epsilon*(L + beta*L').  Gradients at theta' are taken with respect to theta'
(first order throughout).  Deep-All pools all domains into one batch;
first-order MAML adapts a per-domain copy before collecting query gradients.

RNG discipline (documented so transcript tests can replay each epoch): the
epoch rng is consumed in order -- domain split, then per train domain a batch
followed by one dropout seed, then per generalization/query domain likewise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .beamforming import LinkConfig
from .channel import Dataset, Domain, sample_domain_batch
from .model import (
    Mode,
    ModelParams,
    NetConfig,
    apply_update,
    evaluate_sum_rate,
    grad,
    grad_with_stats,
    init_params,
)

METHODS = ("mldg", "deepall", "fomaml", "randinit")


@dataclass
class MetaHyper:
    """Learning rates and epoch shape for backbone training."""

    alpha: float = 1e-4
    epsilon: float = 1e-5
    beta: float = 1.0
    batch_size: int = 1000
    epochs: int = 30
    gen_fraction: float = 0.25

    def __post_init__(self):
        # epsilon = 0 is allowed so the zero-meta-step identity is expressible
        if self.alpha <= 0 or self.epsilon < 0:
            raise ValueError("alpha must be positive and epsilon non-negative")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.gen_fraction < 1.0:
            raise ValueError("gen_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class DomainEntry:
    """One source domain with either a materialized dataset or a generator handle.

    With a dataset, batches are index-sampled from it (without replacement
    while the batch fits); without one, fresh samples are generated from the
    domain definition each call.
    """

    domain_id: str
    domain: Domain | None = None
    dataset: Dataset | None = None
    n_users: int | None = None

    def batch(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if self.dataset is not None:
            n = len(self.dataset)
            idx = rng.choice(n, size=size, replace=size > n)
            return self.dataset.samples[idx]
        if self.domain is None or self.n_users is None:
            raise ValueError(f"domain {self.domain_id}: no dataset and no generator spec")
        return sample_domain_batch(self.domain, size, self.n_users, rng).samples


DomainSet = list  # ordered list of DomainEntry


def split_domains(ds: DomainSet, gen_fraction: float, rng: np.random.Generator):
    """Random disjoint split into (train, generalization) covering all domains.

    The generalization subset holds max(1, round(gen_fraction * |ds|)) domains
    (never all of them); a fresh uniform split is drawn per call.
    """
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 domains to split")
    n_gen = min(n - 1, max(1, round(gen_fraction * n)))
    order = rng.permutation(n)
    gen_idx = set(order[:n_gen].tolist())
    train = [ds[i] for i in range(n) if i not in gen_idx]
    gen = [ds[i] for i in range(n) if i in gen_idx]
    return train, gen


def _g_accumulate(acc, g, weight):
    if acc is None:
        return {k: weight * v for k, v in g.items()}
    for k in acc:
        acc[k] = acc[k] + weight * g[k]
    return acc


def _log_row(log, **kw):
    if log is not None:
        log.append(kw)


def mldg_epoch(params: ModelParams, cfg: NetConfig, ds: DomainSet, hyper: MetaHyper,
               link: LinkConfig, rng: np.random.Generator, log: list | None = None
               ) -> ModelParams:
    """One meta epoch: split, meta-train, virtual step, meta-test, meta update.

    Running statistics are updated on meta-train forwards only, so theta and
    theta' share statistics within the epoch.  With beta = 0 the update equals
    the plain averaged-gradient step theta - epsilon*L exactly.
    """
    train_set, gen_set = split_domains(ds, hyper.gen_fraction, rng)
    stats = dict(params.stats)
    accum = None
    for entry in train_set:
        batch = entry.batch(hyper.batch_size, rng)
        seed = int(rng.integers(0, 2**63))
        cur = ModelParams(params.cfg, params.tensors, stats)
        value, g, stats = grad_with_stats(cur, cfg, batch, link, Mode.TRAIN, seed)
        accum = _g_accumulate(accum, g, 1.0 / len(train_set))
        _log_row(log, domain_id=entry.domain_id, split="train", loss=value,
                 mean_sum_rate=-value)
    inner = apply_update(ModelParams(params.cfg, params.tensors, stats), accum, hyper.alpha)
    accum_gen = None
    for entry in gen_set:
        batch = entry.batch(hyper.batch_size, rng)
        seed = int(rng.integers(0, 2**63))
        value, g = grad(inner, cfg, batch, link, Mode.TRAIN, seed)
        accum_gen = _g_accumulate(accum_gen, g, 1.0 / len(gen_set))
        _log_row(log, domain_id=entry.domain_id, split="gen", loss=value,
                 mean_sum_rate=-value)
    step = {k: accum[k] + hyper.beta * accum_gen[k] for k in accum}
    return apply_update(ModelParams(params.cfg, params.tensors, stats), step, hyper.epsilon)


def deep_all_epoch(params: ModelParams, cfg: NetConfig, ds: DomainSet, hyper: MetaHyper,
                   link: LinkConfig, rng: np.random.Generator, lr: float | None = None,
                   log: list | None = None) -> ModelParams:
    """One gradient step on a batch pooled uniformly across all domains.

    Default learning rate is epsilon*(1+beta) to match the meta method's
    aggregate step budget.  RNG order: domain assignment vector, then one
    batch per represented domain (in domain-set order), then a dropout seed.
    """
    lr = hyper.epsilon * (1.0 + hyper.beta) if lr is None else lr
    assign = rng.integers(0, len(ds), size=hyper.batch_size)
    parts = []
    for i, entry in enumerate(ds):
        k = int(np.sum(assign == i))
        if k > 0:
            parts.append(entry.batch(k, rng))
    batch = np.concatenate(parts, axis=0)
    seed = int(rng.integers(0, 2**63))
    value, g, stats = grad_with_stats(params, cfg, batch, link, Mode.TRAIN, seed)
    _log_row(log, domain_id="pooled", split="train", loss=value, mean_sum_rate=-value)
    return apply_update(ModelParams(params.cfg, params.tensors, stats), g, lr)


def fomaml_epoch(params: ModelParams, cfg: NetConfig, ds: DomainSet, inner_lr: float,
                 outer_lr: float, hyper: MetaHyper, link: LinkConfig,
                 rng: np.random.Generator, log: list | None = None) -> ModelParams:
    """First-order MAML epoch: per-domain inner step, query gradients at the
    adapted parameters, averaged outer step."""
    stats = dict(params.stats)
    accum = None
    for entry in ds:
        support = entry.batch(hyper.batch_size, rng)
        seed = int(rng.integers(0, 2**63))
        cur = ModelParams(params.cfg, params.tensors, stats)
        value, g_s, stats = grad_with_stats(cur, cfg, support, link, Mode.TRAIN, seed)
        adapted = apply_update(ModelParams(params.cfg, params.tensors, stats), g_s, inner_lr)
        query = entry.batch(hyper.batch_size, rng)
        seed_q = int(rng.integers(0, 2**63))
        value_q, g_q = grad(adapted, cfg, query, link, Mode.TRAIN, seed_q)
        accum = _g_accumulate(accum, g_q, 1.0 / len(ds))
        _log_row(log, domain_id=entry.domain_id, split="train", loss=value_q,
                 mean_sum_rate=-value_q)
    return apply_update(ModelParams(params.cfg, params.tensors, stats), accum, outer_lr)


def train_backbone(method: str, cfg: NetConfig, ds: DomainSet, hyper: MetaHyper,
                   link: LinkConfig, seed: int, val_size: int = 256,
                   inner_lr: float | None = None, outer_lr: float | None = None):
    """Train a backbone with the chosen method; returns (params, history).

    ``randinit`` performs zero epochs.  History holds one record per epoch:
    the per-domain training rows plus Eval-mode validation sum rate on a fixed
    held-in batch per domain.  Deterministic given the master seed.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    val_batches = {entry.domain_id: entry.batch(val_size, rng) for entry in ds}
    history: list[dict] = []
    if method == "randinit":
        return params, history
    if inner_lr is None:
        inner_lr = hyper.alpha
    if outer_lr is None:
        outer_lr = hyper.epsilon * (1.0 + hyper.beta)
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        rows: list[dict] = []
        if method == "mldg":
            params = mldg_epoch(params, cfg, ds, hyper, link, rng, log=rows)
        elif method == "deepall":
            params = deep_all_epoch(params, cfg, ds, hyper, link, rng, log=rows)
        else:
            params = fomaml_epoch(params, cfg, ds, inner_lr, outer_lr, hyper, link,
                                  rng, log=rows)
        for entry in ds:
            rate = evaluate_sum_rate(params, cfg, val_batches[entry.domain_id], link)
            rows.append({"domain_id": entry.domain_id, "split": "val",
                         "mean_sum_rate": rate, "loss": -rate})
        history.append({
            "epoch": epoch,
            "rows": rows,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
    return params, history
