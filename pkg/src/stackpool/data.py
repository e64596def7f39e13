"""Synthetic crowd scenes, density-map ground truth, and dataset I/O.

Scenes are rendered deterministically from a seed: a cloudy background
with photographic per-pixel grain, plus soft head blobs whose radius
follows a vertical perspective gradient (heads higher in the image are
smaller). Ground
truth is the classic density map: a unit-mass 2-D Gaussian (sigma=4 by
default) summed at every head position. Pixel (row r, col c) samples the
continuous plane at (c + 0.5, r + 0.5); head positions are continuous
coordinates in [0, W) x [0, H).

The on-disk layout is plain enough to drop real datasets into:
images/NNNN.pgm (16-bit grayscale), annotations/NNNN.txt (one "x y" pair
per line), and a manifest.json recording split membership and the
generation seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream_rng

DEFAULT_SIGMA = 4.0
TRUNCATION_RADIUS_SIGMAS = 4.0


def density_map(heads, h: int, w: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of unit-mass Gaussians at the head positions, as a (1,H,W) map.

    Each head's kernel is built on its full window (radius 4*sigma) and
    normalized there, then clipped to the image; mass lost past the image
    border is tolerated, not renormalized away.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = np.zeros((1, h, w))
    radius = TRUNCATION_RADIUS_SIGMAS * sigma
    for x, y in heads:
        i0 = int(np.floor(y - radius - 0.5))
        i1 = int(np.ceil(y + radius - 0.5))
        j0 = int(np.floor(x - radius - 0.5))
        j1 = int(np.ceil(x + radius - 0.5))
        rows = np.arange(i0, i1 + 1)
        cols = np.arange(j0, j1 + 1)
        dy = rows + 0.5 - y
        dx = cols + 0.5 - x
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > radius * radius] = 0.0
        kernel /= kernel.sum()
        ri0, ri1 = max(i0, 0), min(i1, h - 1)
        ci0, ci1 = max(j0, 0), min(j1, w - 1)
        if ri0 > ri1 or ci0 > ci1:
            continue
        out[0, ri0:ri1 + 1, ci0:ci1 + 1] += kernel[ri0 - i0:ri1 - i0 + 1,
                                                   ci0 - j0:ci1 - j0 + 1]
    return out


@dataclass
class CrowdSample:
    """A grayscale scene, its head annotations, and the derived density map."""

    image: np.ndarray                 # (1, H, W), values in [0, 1]
    heads: list                       # [(x, y), ...] continuous positions
    sigma: float = DEFAULT_SIGMA
    _density: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"image must be (1,H,W), got {self.image.shape}")
        _, h, w = self.image.shape
        for x, y in self.heads:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"head ({x}, {y}) outside {w}x{h} image")

    @property
    def count(self) -> int:
        return len(self.heads)

    @property
    def density(self) -> np.ndarray:
        if self._density is None:
            _, h, w = self.image.shape
            self._density = density_map(self.heads, h, w, self.sigma)
        return self._density


@dataclass
class SceneParams:
    height: int = 64
    width: int = 64
    count_min: int = 5
    count_max: int = 50
    head_radius_min: float = 1.2
    head_radius_max: float = 4.0
    margin: int = 8                   # keeps density mass near the head count
    sigma: float = DEFAULT_SIGMA
    texture: float = 0.12             # per-pixel grain, like photographic noise

    def to_dict(self):
        return dict(height=self.height, width=self.width,
                    count_min=self.count_min, count_max=self.count_max,
                    head_radius_min=self.head_radius_min,
                    head_radius_max=self.head_radius_max,
                    margin=self.margin, sigma=self.sigma,
                    texture=self.texture)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _smooth_noise(rng, h, w, cell=8):
    """Coarse random grid, bilinearly upsampled; a cheap cloudy texture."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return ((1 - fy) * (1 - fx) * grid[y0][:, x0]
            + (1 - fy) * fx * grid[y0][:, x0 + 1]
            + fy * (1 - fx) * grid[y0 + 1][:, x0]
            + fy * fx * grid[y0 + 1][:, x0 + 1])


def synthesize_scene(rng_seed: int, params: SceneParams) -> CrowdSample:
    """Render one deterministic scene with perspective-scaled head blobs."""
    rng = stream_rng(rng_seed, "scene")
    h, w = params.height, params.width
    img = 0.25 + 0.25 * _smooth_noise(rng, h, w)

    count = int(rng.integers(params.count_min, params.count_max + 1))
    heads = []
    m = params.margin
    yy = (np.arange(h) + 0.5)[:, None]
    xx = (np.arange(w) + 0.5)[None, :]
    for _ in range(count):
        x = float(rng.uniform(m, w - m))
        y = float(rng.uniform(m, h - m))
        heads.append((x, y))
        # vertical perspective: blobs near the top are smaller
        t = y / h
        r = params.head_radius_min + t * (params.head_radius_max
                                          - params.head_radius_min)
        amp = float(rng.uniform(0.3, 0.6))
        d2 = (yy - y) ** 2 + (xx - x) ** 2
        img += amp * np.exp(-d2 / (2.0 * r * r))

    if params.texture > 0:
        img += params.texture * rng.standard_normal((h, w))
    img = np.clip(img, 0.0, 1.0)
    # quantize to the 16-bit grid so in-memory and reloaded samples agree
    img = np.round(img * 65535.0) / 65535.0
    return CrowdSample(img[None], heads, sigma=params.sigma)


def crop_patches(sample: CrowdSample, n: int, rng_seed: int,
                 divisor: int = 8) -> list:
    """n random half-size crops with re-anchored heads and fresh density.

    Crop extents are half the parent's, rounded down to a multiple of
    `divisor` so every network's pooling chain divides them evenly. The
    density map is regenerated per crop rather than sliced from the parent
    so border Gaussians keep their unit-mass normalization.
    """
    if n < 1:
        raise ValueError(f"patch count must be >= 1, got {n}")
    _, h, w = sample.image.shape
    ph = (h // 2) // divisor * divisor
    pw = (w // 2) // divisor * divisor
    if ph < divisor or pw < divisor:
        raise ValueError(f"image {h}x{w} too small to crop half-size patches "
                         f"divisible by {divisor}")
    rng = stream_rng(rng_seed, "crop")
    patches = []
    for _ in range(n):
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        img = sample.image[:, y0:y0 + ph, x0:x0 + pw].copy()
        heads = [(x - x0, y - y0) for x, y in sample.heads
                 if x0 <= x < x0 + pw and y0 <= y < y0 + ph]
        patches.append(CrowdSample(img, heads, sigma=sample.sigma))
    return patches


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list = field(default_factory=list)


def split(samples, rng_seed: int):
    """Shuffled 9:1 train/validation split, deterministic in the seed."""
    samples = list(samples)
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split 9:1, "
                         f"got {len(samples)}")
    rng = stream_rng(rng_seed, "split")
    order = rng.permutation(len(samples))
    n_train = int(np.floor(0.9 * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    return train, val


# -- on-disk format -----------------------------------------------------------


def save_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian sample words)."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    if arr.ndim == 3:
        arr = arr[0]
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
        f.write(arr.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[m.end():], dtype=dtype, count=h * w)
    return (data.reshape(h, w).astype(np.float64) / maxval)[None]


def _save_sample(root: Path, idx: int, sample: CrowdSample) -> None:
    save_pgm(root / "images" / f"{idx:04d}.pgm", sample.image)
    lines = "".join(f"{x:.6f} {y:.6f}\n" for x, y in sample.heads)
    (root / "annotations" / f"{idx:04d}.txt").write_text(lines)


def _load_sample(root: Path, idx: int, sigma: float) -> CrowdSample:
    image = load_pgm(root / "images" / f"{idx:04d}.pgm")
    heads = []
    for line in (root / "annotations" / f"{idx:04d}.txt").read_text().splitlines():
        if line.strip():
            x, y = line.split()
            heads.append((float(x), float(y)))
    return CrowdSample(image, heads, sigma=sigma)


def save_dataset(root, ds: DatasetSplit, seed: int, params: SceneParams) -> dict:
    """Write the directory layout and manifest; returns the manifest dict."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    membership = {}
    idx = 0
    total_heads = 0
    for name, samples in (("train", ds.train), ("validation", ds.validation),
                          ("test", ds.test)):
        ids = []
        for s in samples:
            _save_sample(root, idx, s)
            ids.append(idx)
            total_heads += s.count
            idx += 1
        membership[name] = ids
    manifest = {"seed": seed, "params": params.to_dict(),
                "splits": membership, "total_samples": idx,
                "total_heads": total_heads}
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(root):
    """Read a dataset directory; returns (DatasetSplit, manifest)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    sigma = manifest.get("params", {}).get("sigma", DEFAULT_SIGMA)
    parts = {}
    for name in ("train", "validation", "test"):
        parts[name] = [_load_sample(root, i, sigma)
                       for i in manifest["splits"].get(name, [])]
    return DatasetSplit(parts["train"], parts["validation"], parts["test"]), manifest


def generate_dataset(seed: int, params: SceneParams, n_scenes: int,
                     n_test: int) -> DatasetSplit:
    """Generate train+validation scenes (9:1 split) plus a test set."""
    scenes = [synthesize_scene(int(s), params)
              for s in stream_rng(seed, "dataset/train").integers(
                  0, 2 ** 63, size=n_scenes)]
    train, val = split(scenes, seed)
    test = [synthesize_scene(int(s), params)
            for s in stream_rng(seed, "dataset/test").integers(
                0, 2 ** 63, size=n_test)]
    return DatasetSplit(train, val, test)
