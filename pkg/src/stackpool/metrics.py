"""Counting metrics, density-group breakdowns, and the variation-ratio study.

MAE is the mean absolute counting error, MSE the root-mean-squared error
(which always dominates MAE). The variation ratio measures scale
invariance: rescale the input image by beta, recompute a post-pooling
feature map, resize it back to the original map's extents, and take the
channel-averaged L1 change relative to the original map's L1 mass. A
smaller ratio means the features move less under input rescaling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import networks
from .tensor import Tensor, bilinear_resize


@dataclass
class CountResult:
    pairs: list                       # [(predicted, ground truth), ...]
    mae: float
    mse: float
    group_mae: list = None            # optional per-density-group MAE

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "predicted", "ground_truth", "abs_error"])
            for i, (c, gt) in enumerate(self.pairs):
                writer.writerow([i, repr(float(c)), repr(float(gt)),
                                 repr(abs(float(c) - float(gt)))])

    def to_json(self) -> dict:
        out = {"n": len(self.pairs), "mae": self.mae, "mse": self.mse}
        if self.group_mae is not None:
            out["group_mae"] = self.group_mae
        return out


def mae_mse(pairs):
    """(mean absolute error, root-mean-squared error) over count pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mae_mse: empty pair list")
    residuals = np.array([float(c) - float(gt) for c, gt in pairs])
    mae = float(np.mean(np.abs(residuals)))
    mse = float(np.sqrt(np.mean(residuals ** 2)))
    assert mse >= mae - 1e-12, f"RMS {mse} below MAE {mae}"
    return mae, mse


def group_by_density(pairs, buckets: int):
    """Per-bucket MAE with quantile bucket edges over ground-truth counts."""
    pairs = list(pairs)
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    if not pairs:
        raise ValueError("group_by_density: empty pair list")
    gts = np.array([float(gt) for _, gt in pairs])
    edges = np.quantile(gts, np.linspace(0, 1, buckets + 1)[1:-1])
    which = np.searchsorted(edges, gts, side="right")
    groups = []
    for b in range(buckets):
        members = [pairs[i] for i in range(len(pairs)) if which[i] == b]
        groups.append(mae_mse(members)[0] if members else None)
    return groups


def evaluate_counts(net, samples, buckets: int = None) -> CountResult:
    """Predicted-vs-ground-truth counts over a sample list."""
    factor = net.config.downsample_factor
    dtype = np.dtype(net.config.dtype)
    pairs = []
    for s in samples:
        image = s.image[None, :, :s.image.shape[1] // factor * factor,
                        :s.image.shape[2] // factor * factor]
        pred = networks.forward(net, Tensor(image.astype(dtype)))
        pairs.append((float(networks.predicted_count(pred)[0]), float(s.count)))
    mae, mse = mae_mse(pairs)
    groups = group_by_density(pairs, buckets) if buckets else None
    return CountResult(pairs, mae, mse, groups)


# -- variation ratio ---------------------------------------------------------------


def l1_variation(original: np.ndarray, rescaled: np.ndarray):
    """Channel-averaged L1 change ratio between two (C,H,W) map stacks.

    Channels whose original L1 mass is zero are skipped; returns None when
    every channel is zero (the ratio is undefined, not zero).
    """
    if original.shape != rescaled.shape:
        raise ValueError(f"map shape mismatch {original.shape} vs "
                         f"{rescaled.shape}")
    ratios = []
    for c in range(original.shape[0]):
        denom = float(np.sum(np.abs(original[c])))
        if denom == 0.0:
            continue
        ratios.append(float(np.sum(np.abs(rescaled[c] - original[c]))) / denom)
    return float(np.mean(ratios)) if ratios else None


def variation_ratio(net, image: Tensor, beta: float, probe_layers=None):
    """Per-pool-site variation ratio for one image.

    The image is bilinearly rescaled by beta, cropped to pooling-divisible
    extents, run through the network, and each probed post-pooling map is
    resized back to the original map's extents before the L1 comparison.
    Returns {pool_site_index: ratio or None}.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    factor = net.config.downsample_factor
    _, _, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"image extents {h}x{w} not divisible by {factor}")

    _, base_maps = networks.forward(net, image, collect_pool_outputs=True)
    if probe_layers is None:
        probe_layers = list(range(len(base_maps)))

    if beta == 1.0:
        scaled = image
    else:
        th = max(int(round(h * beta)) // factor * factor, factor)
        tw = max(int(round(w * beta)) // factor * factor, factor)
        scaled = bilinear_resize(image, th, tw)
    _, scaled_maps = networks.forward(net, scaled, collect_pool_outputs=True)

    out = {}
    for li in probe_layers:
        x = base_maps[li]
        xh = scaled_maps[li]
        if xh.shape != x.shape:
            xh = bilinear_resize(xh, x.shape[2], x.shape[3])
        out[li] = l1_variation(x.data[0], xh.data[0])
    return out


@dataclass
class InvarianceReport:
    beta: float
    threshold: float
    rows: list = field(default_factory=list)
    # rows: {"image": i, "head_count": n, "variant": label, "layer": li,
    #        "gamma": value or None}

    def add(self, image_idx, head_count, variant, gammas) -> None:
        for li, g in sorted(gammas.items()):
            self.rows.append({"image": image_idx, "head_count": head_count,
                              "variant": variant, "layer": li, "gamma": g})

    def mean_gamma(self):
        """{variant: {layer: mean}} with gamma > threshold dropped as outliers."""
        acc = {}
        for r in self.rows:
            g = r["gamma"]
            if g is None or g > self.threshold:
                continue
            acc.setdefault(r["variant"], {}).setdefault(r["layer"], []).append(g)
        return {v: {li: float(np.mean(vals)) for li, vals in layers.items()}
                for v, layers in acc.items()}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "head_count", "variant", "layer", "gamma"])
            for r in self.rows:
                writer.writerow([r["image"], r["head_count"], r["variant"],
                                 r["layer"],
                                 "" if r["gamma"] is None else repr(r["gamma"])])

    def to_json(self) -> dict:
        return {"beta": self.beta, "outlier_threshold": self.threshold,
                "mean_gamma": {v: {str(li): g for li, g in layers.items()}
                               for v, layers in self.mean_gamma().items()},
                "rows": len(self.rows)}

    def write(self, out_dir, stem="invariance") -> None:
        out_dir = Path(out_dir)
        self.to_csv(out_dir / f"{stem}.csv")
        (out_dir / f"{stem}.json").write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def invariance_study(net_a, net_b, samples, beta: float = 2.0,
                     threshold: float = 2.0, labels=("a", "b")) -> InvarianceReport:
    """Per-image variation ratios for two networks over a sample set."""
    if net_a.config.name != net_b.config.name:
        raise ValueError("networks must share an architecture for comparison")
    report = InvarianceReport(beta=beta, threshold=threshold)
    factor = net_a.config.downsample_factor
    dtype = np.dtype(net_a.config.dtype)
    for i, s in enumerate(samples):
        img = s.image[:, :s.image.shape[1] // factor * factor,
                      :s.image.shape[2] // factor * factor]
        t = Tensor(img[None].astype(dtype))
        report.add(i, s.count, labels[0], variation_ratio(net_a, t, beta))
        report.add(i, s.count, labels[1], variation_ratio(net_b, t, beta))
    return report
