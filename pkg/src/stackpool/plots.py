"""Matplotlib figure rendering for the CLI report paths.

Each report that the CLI writes as CSV/JSON also gets a PNG figure next
to it. Figures are presentation artifacts; the delimited files are the
data of record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .training import ema_smooth  # noqa: E402


def save_learning_curve(log, path, alpha: float = 0.1) -> None:
    """Raw and EMA-smoothed train/validation MAE versus epoch."""
    epochs = [r.epoch for r in log.rows]
    train_mae = [r.train_mae for r in log.rows]
    val_points = log.validation_points()

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, train_mae, color="tab:blue", alpha=0.25, label="train MAE")
    ax.plot(epochs, ema_smooth(train_mae, alpha), color="tab:blue",
            label=f"train MAE (EMA {alpha})")
    if val_points:
        ve, vm = zip(*val_points)
        ax.plot(ve, vm, color="tab:orange", alpha=0.25, label="val MAE")
        ax.plot(ve, ema_smooth(list(vm), alpha), color="tab:orange",
                label=f"val MAE (EMA {alpha})")
    if log.best_epoch is not None:
        ax.axvline(log.best_epoch, color="gray", linestyle="--", linewidth=0.8,
                   label=f"best epoch {log.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MAE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_density_group_bars(group_mae, path) -> None:
    """Per-density-group MAE, lowest to highest ground-truth count."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(1, len(group_mae) + 1)
    ys = [g if g is not None else 0.0 for g in group_mae]
    ax.bar(list(xs), ys, color="tab:blue")
    ax.set_xlabel("density group (low to high)")
    ax.set_ylabel("MAE")
    ax.set_xticks(list(xs))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_invariance_scatter(report, path) -> None:
    """Variation ratio versus head count, one panel per pooling site."""
    layers = sorted({r["layer"] for r in report.rows})
    variants = sorted({r["variant"] for r in report.rows})
    colors = {v: c for v, c in zip(variants, ("tab:blue", "tab:orange",
                                              "tab:green", "tab:red"))}
    fig, axes = plt.subplots(1, max(len(layers), 1),
                             figsize=(4.5 * max(len(layers), 1), 4),
                             squeeze=False)
    for ax, li in zip(axes[0], layers):
        for v in variants:
            pts = [(r["head_count"], r["gamma"]) for r in report.rows
                   if r["layer"] == li and r["variant"] == v
                   and r["gamma"] is not None and r["gamma"] <= report.threshold]
            if pts:
                xs, ys = zip(*pts)
                ax.scatter(xs, ys, s=12, alpha=0.6, color=colors[v], label=v)
        ax.set_title(f"pooling site {li + 1}")
        ax.set_xlabel("head count")
        ax.set_ylabel("variation ratio")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_bars(layer_report, net_report, path) -> None:
    """Median times per variant for each benchmark scenario."""
    scenarios = [("layer-forward", layer_report), ("net-forward", net_report),
                 ("net-backward", net_report)]
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, (scenario, report) in zip(axes, scenarios):
        rows = [r for r in report.rows if r.scenario == scenario]
        names = [r.variant for r in rows]
        meds = [r.median_ms for r in rows]
        errs = [r.iqr_ms / 2 for r in rows]
        ax.bar(names, meds, yerr=errs, color="tab:blue", capsize=3)
        ax.set_title(scenario)
        ax.set_ylabel("median ms")
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
