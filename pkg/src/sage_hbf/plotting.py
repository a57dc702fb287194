"""Figure rendering for the report path.

Each function takes the metric rows a subcommand wrote to CSV and renders a
PNG next to it.  matplotlib is imported lazily and driven through the Agg
backend so runs work headless.
"""

from __future__ import annotations

from collections import defaultdict


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "figure.figsize": (6.4, 4.0),
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
        "savefig.dpi": 150,
    })
    return plt


def _save(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_history(rows: list[dict], path) -> None:
    """Validation sum rate per epoch, one line per (seed, domain)."""
    plt = _plt()
    fig, ax = plt.subplots()
    series = defaultdict(list)
    for r in rows:
        if r["split"] == "val":
            series[(r["seed"], r["domain_id"])].append((int(r["epoch"]), float(r["mean_sum_rate"])))
    for (seed, dom), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], alpha=0.6,
                label=f"s{seed} {dom}" if len(series) <= 10 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation sum rate (b/s/Hz)")
    ax.set_title("backbone training")
    if len(series) <= 10:
        ax.legend(fontsize=7)
    _save(plt, fig, path)


def plot_finetune_history(rows: list[dict], path) -> None:
    """Target validation sum rate per fine-tuning epoch, one line per seed."""
    plt = _plt()
    fig, ax = plt.subplots()
    series = defaultdict(list)
    for r in rows:
        if r.get("val_sum_rate") not in (None, ""):
            series[r["seed"]].append((int(r["epoch"]), float(r["val_sum_rate"])))
    for seed, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                label=f"seed {seed}")
    ax.set_xlabel("fine-tuning epoch (0 = zero shot)")
    ax.set_ylabel("target validation sum rate (b/s/Hz)")
    ax.set_title("deployment fine-tuning")
    ax.legend(fontsize=7)
    _save(plt, fig, path)


def plot_zeroshot_sweep(rows: list[dict], path) -> None:
    """Zero-shot sum rate against the noise grid, one line per model (seed-averaged)."""
    plt = _plt()
    fig, ax = plt.subplots()
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[r["model"]][float(r["neg_log10_sigma2"])].append(float(r["mean_sum_rate"]))
    for model, pts in sorted(acc.items()):
        xs = sorted(pts)
        ys = [sum(pts[x]) / len(pts[x]) for x in xs]
        ax.plot(xs, ys, marker="o", ms=3, label=model)
    ax.set_xlabel(r"$-\log_{10}\sigma^2$")
    ax.set_ylabel("zero-shot sum rate (b/s/Hz)")
    ax.set_title("zero-shot performance vs noise power")
    ax.legend(fontsize=7)
    _save(plt, fig, path)


def plot_sample_sweep(rows: list[dict], path) -> None:
    """Final sum rate vs number of real fine-tuning samples, with/without augmentation."""
    plt = _plt()
    fig, ax = plt.subplots()
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[r["augmentation"]][int(r["n_real_samples"])].append(float(r["final_val_sum_rate"]))
    for aug, pts in sorted(acc.items()):
        xs = sorted(pts)
        ys = [sum(pts[x]) / len(pts[x]) for x in xs]
        ax.semilogx(xs, ys, marker="o", ms=4, label=aug)
    ax.set_xlabel("real fine-tuning samples")
    ax.set_ylabel("sum rate after fine-tuning (b/s/Hz)")
    ax.set_title("data-augmentation efficiency")
    ax.legend(fontsize=7)
    _save(plt, fig, path)


def plot_xconfig_heatmap(rows: list[dict], path) -> None:
    """Backbone-layout vs deployment-layout sum-rate matrix (seed-averaged)."""
    plt = _plt()
    acc = defaultdict(list)
    for r in rows:
        acc[(r["backbone_layout"], r["deploy_layout"])].append(float(r["mean_sum_rate"]))
    backbones = sorted({k[0] for k in acc})
    deploys = sorted({k[1] for k in acc})
    mat = [[sum(acc[(b, d)]) / len(acc[(b, d)]) for d in deploys] for b in backbones]
    fig, ax = plt.subplots()
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(len(deploys)), deploys, rotation=45, ha="right")
    ax.set_yticks(range(len(backbones)), backbones)
    ax.set_xlabel("deployment layout")
    ax.set_ylabel("backbone layout")
    for i, row in enumerate(mat):
        for j, v in enumerate(row):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="zero-shot sum rate (b/s/Hz)")
    ax.set_title("antenna-configuration cross table")
    _save(plt, fig, path)


def plot_baseline_cdf(rows: list[dict], path) -> None:
    """Empirical CDF of per-sample sum rates for each baseline method."""
    plt = _plt()
    fig, ax = plt.subplots()
    acc = defaultdict(list)
    for r in rows:
        acc[r["method"]].append(float(r["sum_rate"]))
    for method, rates in sorted(acc.items()):
        xs = sorted(rates)
        ys = [(i + 1) / len(xs) for i in range(len(xs))]
        ax.plot(xs, ys, label=method)
    ax.set_xlabel("sum rate (b/s/Hz)")
    ax.set_ylabel("empirical CDF")
    ax.set_title("classical baselines")
    ax.legend(fontsize=7)
    _save(plt, fig, path)
