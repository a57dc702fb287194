"""Experiment runner CLI.

``sage-hbf <subcommand> --config <path> [--set k=v]... [--out dir]``

Every run writes CSV/JSON metrics (each row stamped with the config hash and
seed), renders matplotlib figures next to them unless ``--no-plot`` is given,
and records every artifact in a ``manifest.json``.  Re-running a subcommand
with the same config and seeds reproduces byte-identical CSV files; the
``--timing`` flag fills wall-clock columns at the cost of that guarantee.
``SAGE_HBF_THREADS`` caps the torch worker count (default 1).

Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import config as cf
from . import experiments as ex
from . import plotting
from .channel import Dataset, normalize_dataset, sample_domain_batch, write_dataset
from .errors import (
    DataError,
    DegeneratePrecoderError,
    FormatError,
    NumericalError,
    SingularChannelError,
)
from .metatrain import METHODS
from .model import (
    Mode,
    NetConfig,
    evaluate_sum_rate,
    finite_difference_audit,
    init_params,
    load_params,
    save_params,
)

_HISTORY_COLS = ["config_hash", "seed", "epoch", "method", "domain_id", "split",
                 "mean_sum_rate", "loss", "wall_ms"]
_FINETUNE_COLS = ["config_hash", "seed", "epoch", "zero_shot_flag", "val_sum_rate",
                  "loss", "n_real_samples", "m"]


class _Run:
    """Shared subcommand plumbing: config resolution, output dir, manifest."""

    def __init__(self, subcommand, config_path, overrides, out_dir, plot, timing):
        self.subcommand = subcommand
        self.cfg = cf.load_config(config_path, list(overrides))
        if out_dir is not None:
            self.cfg["output_dir"] = out_dir
        self.hash = cf.config_hash(self.cfg)
        self.out = Path(self.cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.plot = plot
        self.timing = timing
        self.outputs: list[str] = []

    @property
    def seeds(self):
        return list(self.cfg["seeds"])

    def path(self, rel) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(rel))
        return p

    def write_csv(self, rel, fieldnames, rows) -> None:
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k, "")) for k in fieldnames})

    def render(self, fn, rows, rel) -> None:
        if self.plot and rows:
            fn(rows, self.path(rel))

    def finish(self, message: str) -> None:
        manifest = {
            "subcommand": self.subcommand,
            "config_hash": self.hash,
            "seeds": self.seeds,
            "outputs": sorted(self.outputs + ["manifest.json"]),
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(f"{message} -> {self.out}")


def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def common_options(fn):
    for opt in reversed([
        click.option("--config", "config_path", default=None, metavar="PATH",
                     help="JSON config; defaults to the desk preset."),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Dotted-path config override, e.g. train.epochs=5."),
        click.option("--out", "out_dir", default=None, metavar="DIR",
                     help="Output directory (overrides output_dir)."),
        click.option("--plot/--no-plot", default=True, show_default=True,
                     help="Render figures next to the CSV output."),
        click.option("--timing", is_flag=True,
                     help="Fill wall_ms columns (breaks byte-identical reruns)."),
    ]):
        fn = opt(fn)
    return fn


@click.group()
def cli():
    """Hybrid beamforming backbone training and adaptation experiments."""


def _backbone_rows(run, seed, method, history):
    rows = []
    for rec in history:
        for r in rec["rows"]:
            rows.append({
                "config_hash": run.hash, "seed": seed, "epoch": rec["epoch"],
                "method": method, "domain_id": r["domain_id"], "split": r["split"],
                "mean_sum_rate": r["mean_sum_rate"], "loss": r["loss"],
                "wall_ms": round(rec["wall_ms"], 3) if run.timing else "",
            })
    return rows


def _load_backbone(run, seed):
    """Backbone for fine-tuning: from finetune.backbone (template) or trained now."""
    template = run.cfg["finetune"]["backbone"]
    method = run.cfg["train"]["method"]
    if template:
        path = template.format(seed=seed, method=method)
        if not Path(path).exists():
            raise DataError(f"backbone parameter file not found: {path}")
        return load_params(path, expected_cfg=cf.net_config(run.cfg)), []
    entries = ex.build_source_entries(run.cfg, seed)
    params, history = ex.train_one_backbone(run.cfg, method, seed, entries)
    return params, _backbone_rows(run, seed, method, history)


@cli.command("gen-data")
@common_options
def gen_data(**kw):
    """Write source-domain and target datasets in the binary container format."""
    run = _Run("gen-data", **kw)
    for seed in run.seeds:
        for entry in ex.build_source_entries(run.cfg, seed):
            write_dataset(entry.dataset, run.path(f"seed{seed}/source_{entry.domain_id}.shbf"))
        pool, val = ex.build_target(run.cfg, seed)
        write_dataset(pool, run.path(f"seed{seed}/target.shbf"))
        write_dataset(Dataset(val, meta=pool.meta, scale=pool.scale),
                      run.path(f"seed{seed}/target_val.shbf"))
    run.finish("datasets written")


@cli.command("train-backbone")
@common_options
def train_backbone_cmd(**kw):
    """Train one backbone per seed with the configured method."""
    run = _Run("train-backbone", **kw)
    method = run.cfg["train"]["method"]
    if method not in METHODS:
        raise cf.ConfigError(f"train.method must be one of {METHODS}")
    rows = []
    for seed in run.seeds:
        entries = ex.build_source_entries(run.cfg, seed)
        params, history = ex.train_one_backbone(run.cfg, method, seed, entries)
        save_params(params, run.path(f"seed{seed}/backbone_{method}.shbp"))
        rows.extend(_backbone_rows(run, seed, method, history))
    run.write_csv("train_history.csv", _HISTORY_COLS, rows)
    run.render(plotting.plot_training_history, rows, "train_history.png")
    run.finish(f"trained {method} on {len(run.seeds)} seed(s)")


@cli.command("finetune")
@common_options
def finetune_cmd(**kw):
    """Fine-tune backbones on the deployment target with data augmentation."""
    run = _Run("finetune", **kw)
    rows = []
    for seed in run.seeds:
        backbone, _ = _load_backbone(run, seed)
        tuned, history, zero_shot = ex.run_finetune(run.cfg, backbone, seed)
        save_params(tuned, run.path(f"seed{seed}/finetuned.shbp"))
        ft = run.cfg["finetune"]
        rows.append({
            "config_hash": run.hash, "seed": seed, "epoch": 0, "zero_shot_flag": 1,
            "val_sum_rate": zero_shot, "loss": "",
            "n_real_samples": ft["n_real_samples"], "m": ft["aug_m"],
        })
        for r in history:
            rows.append({
                "config_hash": run.hash, "seed": seed, "epoch": r["epoch"],
                "zero_shot_flag": 0, "val_sum_rate": r["val_sum_rate"],
                "loss": r["loss"], "n_real_samples": r["n_real_samples"], "m": r["m"],
            })
    run.write_csv("finetune_history.csv", _FINETUNE_COLS, rows)
    run.render(plotting.plot_finetune_history, rows, "finetune_history.png")
    run.finish("fine-tuned on target domain")


@cli.command("eval-zeroshot")
@common_options
def eval_zeroshot(**kw):
    """Zero-shot sum rate over the noise grid (trained methods + PE-AltMin)."""
    run = _Run("eval-zeroshot", **kw)
    grid = [float(g) for g in run.cfg["eval"]["neg_log10_sigma2_grid"]]
    n_eval = int(run.cfg["eval"].get("n_samples", 128))
    rows = []
    for seed in run.seeds:
        _, val = ex.build_target(run.cfg, seed)
        val = val[:n_eval]
        models = {}
        specs = run.cfg["eval"]["models"]
        if specs:
            for spec in specs:
                path = spec["path"].format(seed=seed)
                if not Path(path).exists():
                    raise DataError(f"model parameter file not found: {path}")
                models[spec["name"]] = load_params(path, expected_cfg=cf.net_config(run.cfg))
        else:
            entries = ex.build_source_entries(run.cfg, seed)
            for method in ("mldg", "deepall", "randinit"):
                models[method], _ = ex.train_one_backbone(run.cfg, method, seed, entries)
        for name, params in models.items():
            for r in ex.zero_shot_sweep(params, run.cfg, val, grid):
                rows.append({"config_hash": run.hash, "seed": seed, "model": name, **r})
        for r in ex.altmin_sweep(run.cfg, val, grid, ex.child_seed(seed, ex.EVAL, 1)):
            rows.append({"config_hash": run.hash, "seed": seed, "model": "pe_altmin", **r})
    run.write_csv("zeroshot.csv",
                  ["config_hash", "seed", "model", "neg_log10_sigma2", "mean_sum_rate"],
                  rows)
    run.render(plotting.plot_zeroshot_sweep, rows, "zeroshot.png")
    run.finish("zero-shot sweep complete")


@cli.command("xconfig-table")
@common_options
def xconfig_table(**kw):
    """Cross antenna-configuration zero-shot table (Table-style experiment)."""
    run = _Run("xconfig-table", **kw)
    rows = []
    for seed in run.seeds:
        for r in ex.xconfig_matrix(run.cfg, seed):
            rows.append({"config_hash": run.hash, "seed": seed, **r})
    run.write_csv("xconfig.csv",
                  ["config_hash", "seed", "backbone_layout", "deploy_layout",
                   "mean_sum_rate"], rows)
    run.render(plotting.plot_xconfig_heatmap, rows, "xconfig.png")
    run.finish("cross-configuration table complete")


@cli.command("sweep-samples")
@common_options
def sweep_samples(**kw):
    """Final fine-tuned sum rate vs number of real samples, with/without augmentation."""
    run = _Run("sweep-samples", **kw)
    rows = []
    for seed in run.seeds:
        backbone, _ = _load_backbone(run, seed)
        target = ex.build_target(run.cfg, seed)
        for n_real in run.cfg["sweep"]["n_real_samples"]:
            for aug_m in (int(run.cfg["sweep"]["aug_m"]), 0):
                _, history, _ = ex.run_finetune(run.cfg, backbone, seed,
                                                n_real=int(n_real), aug_m=aug_m,
                                                target=target)
                rows.append({
                    "config_hash": run.hash, "seed": seed,
                    "n_real_samples": int(n_real),
                    "augmentation": "with" if aug_m else "without",
                    "m": aug_m, "final_val_sum_rate": history[-1]["val_sum_rate"],
                })
    run.write_csv("sweep_samples.csv",
                  ["config_hash", "seed", "n_real_samples", "augmentation", "m",
                   "final_val_sum_rate"], rows)
    run.render(plotting.plot_sample_sweep, rows, "sweep_samples.png")
    run.finish("sample-efficiency sweep complete")


@cli.command("baseline")
@common_options
def baseline_cmd(**kw):
    """PE-AltMin and ascent-oracle rates per sample on the target domain."""
    run = _Run("baseline", **kw)
    seed = run.seeds[0]
    rows = [
        {"config_hash": run.hash, "seed": seed, **r}
        for r in ex.baseline_table(run.cfg, seed)
    ]
    run.write_csv("baseline.csv",
                  ["config_hash", "seed", "sample_id", "method", "sum_rate", "iters",
                   "residual"], rows)
    run.render(plotting.plot_baseline_cdf, rows, "baseline.png")
    run.finish("baseline table complete")


@cli.command("gradcheck")
@common_options
def gradcheck(**kw):
    """Finite-difference audit of the analytic gradient on a tiny network."""
    run = _Run("gradcheck", **kw)
    gc = run.cfg["gradcheck"]
    tiny = NetConfig(
        n_t=gc["n_t"], n_rf=gc["n_rf"], n_u=gc["n_u"],
        conv_channels=gc["conv_channels"], conv_layers=gc["conv_layers"],
        fc_width=gc["fc_width"], fc_layers=gc["fc_layers"],
        dropout_rate=run.cfg["net"]["dropout_rate"],
        kernel_size=run.cfg["net"]["kernel_size"],
        use_batchnorm=run.cfg["net"]["use_batchnorm"],
    )
    from .channel import AntennaLayout, Domain

    dom = Domain(layout=AntennaLayout(gc["n_t"], 1, 1), gamma=2.0)
    batch = normalize_dataset(
        sample_domain_batch(dom, gc["batch"], gc["n_u"], gc["seed"])
    ).samples
    params = init_params(tiny, gc["seed"])
    link = cf.link_config(run.cfg)
    t0 = time.perf_counter()
    res = finite_difference_audit(params, tiny, batch, link, Mode.TRAIN,
                                  seed=gc["seed"], step=gc["step"],
                                  rel_tol=gc["rel_tol"])
    elapsed = time.perf_counter() - t0
    report = {
        "config_hash": run.hash, "n_coords": res["n_coords"],
        "fraction_ok": res["fraction_ok"], "max_rel": res["max_rel"],
        "n_below_floor": res["n_below_floor"], "step": gc["step"],
        "rel_tol": gc["rel_tol"],
    }
    if run.timing:
        report["elapsed_s"] = round(elapsed, 3)
    with open(run.path("gradcheck.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(
        f"gradcheck: {res['n_coords']} coordinates, "
        f"{100 * res['fraction_ok']:.2f}% within {gc['rel_tol']:g}, "
        f"max relative error {res['max_rel']:.3e} ({elapsed:.1f}s)"
    )
    run.finish("gradient audit complete")
    if res["fraction_ok"] < 0.99:
        raise NumericalError(
            f"gradient audit failed: only {100 * res['fraction_ok']:.2f}% of "
            f"coordinates within {gc['rel_tol']:g}"
        )


def main(argv=None):
    torch.set_num_threads(max(1, int(os.environ.get("SAGE_HBF_THREADS", "1"))))
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help and friends
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except cf.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except (DataError, FormatError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except (NumericalError, DegeneratePrecoderError, SingularChannelError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)


if __name__ == "__main__":
    main()
