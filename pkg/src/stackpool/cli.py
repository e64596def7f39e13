"""Command-line entry point.

Subcommands: gen-data, train, eval, verify, bench, invariance. Every
subcommand writes a manifest.json (resolved parameters plus SHA-256 hashes
of the data outputs) into its output directory; re-running with
``--config <manifest.json>`` reproduces the outputs bit-identically.
Figures (PNG) are rendered next to each CSV/JSON report.

Config files are JSON key-value trees whose keys match the option names;
explicit command-line flags override file values.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import gradcheck, metrics, networks, plots, training
from .pooling import PoolSpec, stacked_spec_for, verify_equivalence
from .seeding import stream_rng
from .tensor import Tensor

DATA_FILE_SUFFIXES = {".csv", ".json", ".ckpt", ".pgm", ".txt"}


def _load_config(path):
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if "params" in cfg and isinstance(cfg["params"], dict):
        cfg = cfg["params"]  # accept a previous run's manifest directly
    return cfg


def _resolve(ctx, config, values):
    """Merge precedence: explicit flag > config file > click default."""
    resolved = {}
    for key, val in values.items():
        src = ctx.get_parameter_source(key)
        if src is not None and src.name != "DEFAULT":
            resolved[key] = val
        elif key in config:
            resolved[key] = config[key]
        else:
            resolved[key] = val
    return resolved


def _require(params, *keys):
    """Options that must arrive via flag or config file, post-merge."""
    for key in keys:
        if params.get(key) is None:
            flag = "--" + key.replace("_", "-").replace("data-dir", "data")
            raise click.ClickException(f"missing required option {flag} "
                                       f"(flag or config file)")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise click.ClickException(
            f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, params: dict) -> None:
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.suffix in DATA_FILE_SUFFIXES \
                and p.name != "run-manifest.json":
            artifacts[str(p.relative_to(out))] = _sha256(p)
    manifest = {"command": command, "params": params, "artifacts": artifacts}
    (out / "run-manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_split_samples(data_dir, which):
    ds, _ = data_mod.load_dataset(data_dir)
    samples = {"train": ds.train, "validation": ds.validation,
               "test": ds.test}[which]
    if not samples:
        raise click.ClickException(f"split {which!r} of {data_dir} is empty")
    return ds, samples


@click.group()
def main():
    """Scale-invariant pooling experiments for crowd density estimation."""


# -- gen-data ------------------------------------------------------------------


@main.command("gen-data")
@click.option("--out", default=None, help="output dataset directory")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--scenes", default=100, show_default=True, type=int,
              help="train+validation scene count (split 9:1)")
@click.option("--test-scenes", default=20, show_default=True, type=int)
@click.option("--height", default=64, show_default=True, type=int)
@click.option("--width", default=64, show_default=True, type=int)
@click.option("--count-min", default=5, show_default=True, type=int)
@click.option("--count-max", default=50, show_default=True, type=int)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_gen_data(ctx, out, seed, scenes, test_scenes, height, width,
                 count_min, count_max, config, force):
    """Generate a synthetic crowd dataset in the on-disk layout."""
    p = _resolve(ctx, _load_config(config), dict(
        out=out, seed=seed, scenes=scenes, test_scenes=test_scenes,
        height=height, width=width, count_min=count_min, count_max=count_max))
    _require(p, "out")
    out_dir = _prepare_out(p["out"], force)
    params = data_mod.SceneParams(height=p["height"], width=p["width"],
                                  count_min=p["count_min"],
                                  count_max=p["count_max"])
    ds = data_mod.generate_dataset(p["seed"], params, p["scenes"],
                                   p["test_scenes"])
    manifest = data_mod.save_dataset(out_dir, ds, p["seed"], params)
    _write_manifest(out_dir, "gen-data", p)
    click.echo(f"wrote {manifest['total_samples']} samples "
               f"({manifest['total_heads']} heads) to {out_dir}")


# -- train ----------------------------------------------------------------------


@main.command("train")
@click.option("--data", "data_dir", default=None)
@click.option("--net", "arch", default="base_s", show_default=True,
              type=click.Choice(sorted(networks.ARCHITECTURES)))
@click.option("--pool", default="vanilla:2:s2", show_default=True,
              help='pooling spec, e.g. "stacked:2,2,3:s2"')
@click.option("--epochs", default=20, show_default=True, type=int)
@click.option("--batch-size", default=1, show_default=True, type=int)
@click.option("--validate-every", default=2, show_default=True, type=int)
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--patches", default=9, show_default=True, type=int,
              help="random half-size crops per training image")
@click.option("--dtype", default="float64", show_default=True,
              type=click.Choice(["float32", "float64"]))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_train(ctx, data_dir, arch, pool, epochs, batch_size, validate_every,
              lr, patches, dtype, seed, out, config, force):
    """Train a network and keep the best-validation-MAE checkpoint."""
    p = _resolve(ctx, _load_config(config), dict(
        data_dir=data_dir, arch=arch, pool=pool, epochs=epochs,
        batch_size=batch_size, validate_every=validate_every, lr=lr,
        patches=patches, dtype=dtype, seed=seed, out=out))
    _require(p, "data_dir", "out")
    out_dir = _prepare_out(p["out"], force)

    spec = PoolSpec.parse(p["pool"])
    net_config = networks.NetworkConfig(p["arch"], spec, dtype=p["dtype"])
    net = networks.build(net_config, p["seed"])

    ds, _ = data_mod.load_dataset(p["data_dir"])
    factor = net_config.downsample_factor
    patch_rng = stream_rng(p["seed"], "train/patches")
    train_samples = []
    for s in ds.train:
        crop_seed = int(patch_rng.integers(0, 2 ** 63))
        train_samples.extend(data_mod.crop_patches(
            s, p["patches"], crop_seed, divisor=factor))

    tc = training.TrainConfig(epochs=p["epochs"], batch_size=p["batch_size"],
                              validate_every=p["validate_every"], lr=p["lr"],
                              seed=p["seed"])
    try:
        best, log = training.train(
            net, data_mod.DatasetSplit(train_samples, ds.validation),
            tc, out_dir=out_dir)
    except training.TrainingDiverged as exc:
        if exc.log is not None:
            training.write_log_files(exc.log, out_dir)
            _write_manifest(out_dir, "train", p)
        raise click.ClickException(str(exc))
    training.write_log_files(log, out_dir)
    plots.save_learning_curve(log, out_dir / "curve.png")
    _write_manifest(out_dir, "train", p)
    click.echo(f"best val MAE {log.best_val_mae:.4f} at epoch "
               f"{log.best_epoch}; checkpoint at {out_dir / 'best.ckpt'}")


# -- eval -----------------------------------------------------------------------


@main.command("eval")
@click.option("--ckpt", default=None)
@click.option("--data", "data_dir", default=None)
@click.option("--split", "which", default="test", show_default=True,
              type=click.Choice(["train", "validation", "test"]))
@click.option("--buckets", default=4, show_default=True, type=int,
              help="density groups for the per-group MAE breakdown")
@click.option("--out", default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_eval(ctx, ckpt, data_dir, which, buckets, out, config, force):
    """Counting MAE/MSE of a checkpoint over a dataset split."""
    p = _resolve(ctx, _load_config(config), dict(
        ckpt=ckpt, data_dir=data_dir, which=which, buckets=buckets, out=out))
    _require(p, "ckpt", "data_dir", "out")
    out_dir = _prepare_out(p["out"], force)
    net, _ = networks.load_checkpoint(p["ckpt"])
    _, samples = _load_split_samples(p["data_dir"], p["which"])
    result = metrics.evaluate_counts(net, samples, buckets=p["buckets"])
    result.to_csv(out_dir / "counts.csv")
    (out_dir / "metrics.json").write_text(
        json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    if result.group_mae:
        plots.save_density_group_bars(result.group_mae, out_dir / "groups.png")
    _write_manifest(out_dir, "eval", p)
    click.echo(f"MAE {result.mae:.4f}  MSE {result.mse:.4f} "
               f"over {len(result.pairs)} images")


# -- verify -----------------------------------------------------------------------


@main.command("verify")
@click.option("--pool", default="multi:2,4,8:s2", show_default=True,
              help="multi-kernel spec to check against its stacked form")
@click.option("--trials", default=100, show_default=True, type=int)
@click.option("--extents", default="64x64", show_default=True,
              help="maximum random input extents, HxW")
@click.option("--grad-check", is_flag=True,
              help="also finite-difference check a network end to end")
@click.option("--net", "arch", default="base_s", show_default=True,
              type=click.Choice(sorted(networks.ARCHITECTURES)))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_verify(ctx, pool, trials, extents, grad_check, arch, seed, out,
               config, force):
    """Check the stacked/multi-kernel equivalence (and optionally gradients)."""
    p = _resolve(ctx, _load_config(config), dict(
        pool=pool, trials=trials, extents=extents, grad_check=grad_check,
        arch=arch, seed=seed, out=out))
    spec = PoolSpec.parse(p["pool"])
    if spec.variant != "multi_kernel":
        raise click.ClickException(
            "verify needs a multi-kernel spec, e.g. multi:2,4,8:s2")
    try:
        stacked = stacked_spec_for(spec)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    max_h, max_w = (int(v) for v in p["extents"].lower().split("x"))
    rng = stream_rng(p["seed"], "verify")
    worst = 0.0
    for _ in range(p["trials"]):
        h = int(rng.integers(spec.stride, max_h + 1))
        w = int(rng.integers(spec.stride, max_w + 1))
        c = int(rng.integers(1, 5))
        x = Tensor(rng.standard_normal((1, c, h, w)))
        res = verify_equivalence(x, spec)
        worst = max(worst, float(res.forward_max_diff))
    ok = worst == 0.0
    click.echo(f"{spec} vs {stacked}: max forward diff {worst} over "
               f"{p['trials']} trials -> {'PASS' if ok else 'FAIL'}")

    report = {"multi_spec": str(spec), "stacked_spec": str(stacked),
              "trials": p["trials"], "max_forward_diff": worst,
              "equivalence_pass": ok}
    if p["grad_check"]:
        gc = gradcheck.check_network(
            networks.NetworkConfig(p["arch"], stacked), seed=p["seed"])
        gc_ok = bool(gc.max_rel_error < 1e-4)
        ok = ok and gc_ok
        click.echo(f"gradient check {p['arch']}: max rel error "
                   f"{gc.max_rel_error:.2e} over {gc.checked} coords "
                   f"-> {'PASS' if gc_ok else 'FAIL'}")
        report["grad_check"] = {"arch": p["arch"],
                                "max_rel_error": float(gc.max_rel_error),
                                "checked": gc.checked, "skipped": gc.skipped,
                                "pass": gc_ok}
    if p["out"]:
        out_dir = _prepare_out(p["out"], force)
        (out_dir / "verify.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
        _write_manifest(out_dir, "verify", p)
    if not ok:
        sys.exit(1)


# -- bench -----------------------------------------------------------------------


@main.command("bench")
@click.option("--out", default=None)
@click.option("--reps", default=30, show_default=True, type=int)
@click.option("--warmups", default=5, show_default=True, type=int)
@click.option("--layer-extents", default=256, show_default=True, type=int)
@click.option("--net-extents", default=64, show_default=True, type=int)
@click.option("--arch", default="deep", show_default=True,
              type=click.Choice(sorted(networks.ARCHITECTURES)))
@click.option("--dtype", default="float32", show_default=True,
              type=click.Choice(["float32", "float64"]))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--baseline", type=click.Path(exists=True), default=None,
              help="prior bench.json to diff orderings against")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_bench(ctx, out, reps, warmups, layer_extents, net_extents, arch,
              dtype, seed, baseline, config, force):
    """Time the pooling variants (single layer, and inside the deep net)."""
    p = _resolve(ctx, _load_config(config), dict(
        out=out, reps=reps, warmups=warmups, layer_extents=layer_extents,
        net_extents=net_extents, arch=arch, dtype=dtype, seed=seed,
        baseline=baseline))
    _require(p, "out")
    out_dir = _prepare_out(p["out"], force)
    try:
        layer = bench_mod.bench_pool_layer(
            extents=(p["layer_extents"],) * 2, reps=p["reps"],
            warmups=p["warmups"], seed=p["seed"], dtype=p["dtype"])
        net = bench_mod.bench_network(
            arch=p["arch"], extents=(p["net_extents"],) * 2, reps=p["reps"],
            warmups=p["warmups"], seed=p["seed"], dtype=p["dtype"])
    except ValueError as exc:
        raise click.ClickException(str(exc))
    layer.write(out_dir, "bench_layer")
    net.write(out_dir, "bench_network")
    checks = bench_mod.ordering_checks(layer, net)
    report = {"checks": checks}
    if p["baseline"]:
        prior = json.loads(Path(p["baseline"]).read_text())
        report["baseline_diff"] = bench_mod.compare_to_baseline(
            checks, prior.get("checks", {}))
    (out_dir / "bench.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    plots.save_bench_bars(layer, net, out_dir / "bench.png")
    _write_manifest(out_dir, "bench", p)
    for name, ok in checks.items():
        click.echo(f"{name}: {'PASS' if ok else 'FAIL'}")
    if not all(checks.values()):
        sys.exit(1)


# -- invariance --------------------------------------------------------------------


@main.command("invariance")
@click.option("--ckpt-a", default=None)
@click.option("--ckpt-b", default=None)
@click.option("--data", "data_dir", default=None)
@click.option("--split", "which", default="test", show_default=True,
              type=click.Choice(["train", "validation", "test"]))
@click.option("--beta", default=2.0, show_default=True, type=float)
@click.option("--threshold", default=2.0, show_default=True, type=float,
              help="gamma outlier threshold for aggregation")
@click.option("--out", default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--force", is_flag=True)
@click.pass_context
def cmd_invariance(ctx, ckpt_a, ckpt_b, data_dir, which, beta, threshold,
                   out, config, force):
    """Variation-ratio comparison of two checkpoints under input rescaling."""
    p = _resolve(ctx, _load_config(config), dict(
        ckpt_a=ckpt_a, ckpt_b=ckpt_b, data_dir=data_dir, which=which,
        beta=beta, threshold=threshold, out=out))
    _require(p, "ckpt_a", "ckpt_b", "data_dir", "out")
    out_dir = _prepare_out(p["out"], force)
    net_a, _ = networks.load_checkpoint(p["ckpt_a"])
    net_b, _ = networks.load_checkpoint(p["ckpt_b"])
    _, samples = _load_split_samples(p["data_dir"], p["which"])
    labels = (f"a[{net_a.config.pool_spec}]", f"b[{net_b.config.pool_spec}]")
    report = metrics.invariance_study(net_a, net_b, samples, beta=p["beta"],
                                      threshold=p["threshold"], labels=labels)
    report.write(out_dir)
    plots.save_invariance_scatter(report, out_dir / "invariance.png")
    _write_manifest(out_dir, "invariance", p)
    means = report.mean_gamma()
    for variant in labels:
        layers = means.get(variant, {})
        desc = "  ".join(f"site{li + 1}={g:.4f}" for li, g in sorted(layers.items()))
        click.echo(f"mean gamma {variant}: {desc or 'undefined'}")


if __name__ == "__main__":
    main()
