"""Experiment flows shared by the CLI subcommands and the acceptance suite.

Every flow derives its randomness from one master seed through fixed-purpose
child seeds, so any run is reproducible from (config, seed) alone.
"""

from __future__ import annotations

import numpy as np

from . import config as cf
from .adapt import finetune
from .baselines import oracle_ascent, pe_altmin, zf_fdp
from .beamforming import LinkConfig, sum_rate
from .channel import (
    Dataset,
    Domain,
    normalize_dataset,
    read_dataset,
    sample_domain_batch,
    sample_target_batch,
)
from .errors import DataError
from .metatrain import DomainEntry, train_backbone
from .model import ModelParams, evaluate_sum_rate

# fixed child-seed purposes (spawn keys off the master seed)
SOURCE, TARGET, TRAIN, FINETUNE, EVAL = range(5)


def child_seed(master: int, purpose: int, index: int = 0) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(purpose, index))
    return int(ss.generate_state(1)[0])


def build_source_entries(cfg: dict, master_seed: int) -> list[DomainEntry]:
    """Materialize one normalized dataset per source domain."""
    n_u = cfg["system"]["n_u"]
    size = cfg["domains"]["dataset_size"]
    entries = []
    for i, dom in enumerate(cf.source_domains(cfg)):
        data = normalize_dataset(
            sample_domain_batch(dom, size, n_u, child_seed(master_seed, SOURCE, i))
        )
        entries.append(DomainEntry(dom.label(), domain=dom, dataset=data))
    return entries


def build_target(cfg: dict, master_seed: int) -> tuple[Dataset, np.ndarray]:
    """Deployment-domain data: (fine-tuning pool, held-out validation batch).

    Pool and validation batch are normalized jointly so they share one scale.
    With ``target.dataset_path`` set, externally exported channels are read
    from disk instead of the synthetic multipath surrogate.
    """
    t = cfg["target"]
    n_val = t["val_size"]
    if t.get("dataset_path"):
        d = read_dataset(t["dataset_path"])
        if len(d) <= n_val:
            raise DataError(
                f"target dataset {t['dataset_path']} holds {len(d)} samples, "
                f"need more than val_size={n_val}"
            )
    else:
        params = cf.target_params(cfg)
        n_u = cfg["system"]["n_u"]
        d = sample_target_batch(params, t["dataset_size"] + n_val, n_u,
                                child_seed(master_seed, TARGET))
    d = normalize_dataset(d)
    pool = Dataset(d.samples[:-n_val], meta=d.meta, scale=d.scale)
    val = d.samples[-n_val:]
    return pool, val


def train_one_backbone(cfg: dict, method: str, master_seed: int,
                       entries: list[DomainEntry] | None = None):
    if entries is None:
        entries = build_source_entries(cfg, master_seed)
    return train_backbone(
        method, cf.net_config(cfg), entries, cf.meta_hyper(cfg), cf.link_config(cfg),
        seed=child_seed(master_seed, TRAIN), val_size=cfg["train"]["val_size"],
    )


def run_finetune(cfg: dict, backbone: ModelParams, master_seed: int,
                 n_real: int | None = None, aug_m: int | None = None,
                 target: tuple[Dataset, np.ndarray] | None = None):
    """Fine-tune a backbone on ``n_real`` target samples; returns
    (tuned params, history rows, zero-shot sum rate on the validation batch)."""
    ft = cfg["finetune"]
    n_real = ft["n_real_samples"] if n_real is None else n_real
    aug_m = ft["aug_m"] if aug_m is None else aug_m
    pool, val = build_target(cfg, master_seed) if target is None else target
    if n_real > len(pool):
        raise DataError(f"n_real_samples={n_real} exceeds target pool of {len(pool)}")
    subset = Dataset(pool.samples[:n_real], meta=pool.meta, scale=pool.scale)
    net = cf.net_config(cfg)
    link = cf.link_config(cfg)
    zero_shot = evaluate_sum_rate(backbone, net, val, link)
    tuned, history = finetune(
        backbone, net, subset, aug_m, ft["tau"], ft["epochs"], link,
        np.random.default_rng(child_seed(master_seed, FINETUNE)),
        batch_size=ft["batch_size"], val_batch=val,
    )
    return tuned, history, zero_shot


def zero_shot_sweep(params: ModelParams, cfg: dict, val: np.ndarray,
                    grid: list[float]) -> list[dict]:
    """Mean Eval sum rate of one model across the noise grid."""
    net = cf.net_config(cfg)
    p_max = cfg["system"]["p_max"]
    return [
        {
            "neg_log10_sigma2": g,
            "mean_sum_rate": evaluate_sum_rate(
                params, net, val, LinkConfig.from_neg_log10_sigma2(g, p_max)
            ),
        }
        for g in grid
    ]


def altmin_sweep(cfg: dict, val: np.ndarray, grid: list[float], seed: int) -> list[dict]:
    """PE-AltMin reference across the noise grid (precoder reused per sample)."""
    p_max = cfg["system"]["p_max"]
    n_rf = cfg["system"]["n_rf"]
    max_iters = cfg["baseline"]["max_iters"]
    rng = np.random.default_rng(seed)
    precoders = [
        pe_altmin(zf_fdp(h, p_max), n_rf, max_iters=max_iters, rng=rng).precoder
        for h in val
    ]
    out = []
    for g in grid:
        link = LinkConfig.from_neg_log10_sigma2(g, p_max)
        rates = [sum_rate(h, p, link) for h, p in zip(val, precoders)]
        out.append({"neg_log10_sigma2": g, "mean_sum_rate": float(np.mean(rates))})
    return out


def single_domain_entries(cfg: dict, layout_spec, master_seed: int,
                          index: int = 0) -> list[DomainEntry]:
    """One-domain set for a non-generalized backbone (fixed layout and gamma)."""
    d = cfg["domains"]
    dom = Domain(
        layout=cf._layout(layout_spec, d["d_over_lambda"], cfg["system"]["n_t"]),
        gamma=float(cfg["xconfig"]["gamma"]),
        bs_height_set=tuple(float(h) for h in d["bs_height_set"]),
        region=cf._region(d),
    )
    data = normalize_dataset(
        sample_domain_batch(dom, d["dataset_size"], cfg["system"]["n_u"],
                            child_seed(master_seed, SOURCE, 100 + index))
    )
    return [DomainEntry(dom.label(), domain=dom, dataset=data)]


def layout_eval_batch(cfg: dict, layout_spec, master_seed: int, index: int,
                      size: int) -> np.ndarray:
    """Held-out LOS evaluation batch for one deployment layout."""
    d = cfg["domains"]
    dom = Domain(
        layout=cf._layout(layout_spec, d["d_over_lambda"], cfg["system"]["n_t"]),
        gamma=float(cfg["xconfig"]["gamma"]),
        bs_height_set=tuple(float(h) for h in d["bs_height_set"]),
        region=cf._region(d),
    )
    data = normalize_dataset(
        sample_domain_batch(dom, size, cfg["system"]["n_u"],
                            child_seed(master_seed, EVAL, index))
    )
    return data.samples


def xconfig_matrix(cfg: dict, master_seed: int) -> list[dict]:
    """Cross antenna-configuration table: train one non-generalized backbone
    per layout, evaluate zero-shot on every layout's own LOS data."""
    layouts = cfg["xconfig"]["layouts"]
    net = cf.net_config(cfg)
    link = cf.link_config(cfg)
    val_size = cfg["train"]["val_size"]
    eval_batches = [
        layout_eval_batch(cfg, spec, master_seed, j, val_size)
        for j, spec in enumerate(layouts)
    ]
    rows = []
    for i, train_spec in enumerate(layouts):
        entries = single_domain_entries(cfg, train_spec, master_seed, index=i)
        params, _ = train_backbone(
            "deepall", net, entries, cf.meta_hyper(cfg), link,
            seed=child_seed(master_seed, TRAIN, i), val_size=val_size,
        )
        for j, deploy_spec in enumerate(layouts):
            rows.append({
                "backbone_layout": "x".join(str(v) for v in train_spec),
                "deploy_layout": "x".join(str(v) for v in deploy_spec),
                "mean_sum_rate": evaluate_sum_rate(params, net, eval_batches[j], link),
            })
    return rows


def baseline_table(cfg: dict, master_seed: int, n_samples: int | None = None) -> list[dict]:
    """Per-sample PE-AltMin and ascent-oracle rates on target validation data."""
    b = cfg["baseline"]
    n_samples = b["n_samples"] if n_samples is None else n_samples
    _, val = build_target(cfg, master_seed)
    if n_samples > len(val):
        raise DataError(f"baseline.n_samples={n_samples} exceeds target val batch")
    link = cf.link_config(cfg)
    n_rf = cfg["system"]["n_rf"]
    rng = np.random.default_rng(child_seed(master_seed, EVAL, 999))
    rows = []
    for i in range(n_samples):
        h = val[i]
        alt = pe_altmin(zf_fdp(h, link.p_max), n_rf, max_iters=b["max_iters"], rng=rng)
        rows.append({
            "sample_id": i, "method": "pe_altmin",
            "sum_rate": sum_rate(h, alt.precoder, link),
            "iters": len(alt.residuals) - 1, "residual": alt.residual,
        })
        _, rate = oracle_ascent(h, link, restarts=b["restarts"], iters=b["iters"],
                                n_rf=n_rf, rng=rng)
        rows.append({
            "sample_id": i, "method": "oracle",
            "sum_rate": rate, "iters": b["iters"], "residual": "",
        })
    return rows
