"""Density-estimation network architectures with pluggable pooling.

Five fully convolutional architectures (base_s/base_m/base_l from the
three MCNN column designs, a wide variant, and a deep VGG-13-style
variant). Every convolution uses same padding and is followed by ReLU
except the final 1x1 output head; each pooling site applies the
configured PoolSpec, which is non-parametric and therefore never changes
parameter shapes or counts.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .pooling import PoolSpec, apply_pool
from .seeding import stream_rng
from .tensor import Tensor, conv2d, load_tensor, relu, save_tensor

# layer descriptors: ("conv", kernel, out_channels) or ("pool",)
ARCHITECTURES = {
    "base_s": [("conv", 5, 24), ("pool",), ("conv", 3, 48), ("pool",),
               ("conv", 3, 24), ("conv", 3, 12), ("conv", 1, 1)],
    "base_m": [("conv", 7, 20), ("pool",), ("conv", 5, 40), ("pool",),
               ("conv", 5, 20), ("conv", 5, 10), ("conv", 1, 1)],
    "base_l": [("conv", 9, 16), ("pool",), ("conv", 7, 32), ("pool",),
               ("conv", 7, 16), ("conv", 7, 8), ("conv", 1, 1)],
    "wide": [("conv", 7, 128), ("pool",), ("conv", 5, 256), ("pool",),
             ("conv", 5, 128), ("conv", 5, 64), ("conv", 1, 1)],
    "deep": [("conv", 5, 64), ("conv", 5, 64), ("pool",),
             ("conv", 5, 128), ("conv", 5, 128), ("pool",),
             ("conv", 3, 256), ("conv", 3, 256), ("pool",),
             ("conv", 3, 128), ("conv", 3, 64), ("conv", 3, 32),
             ("conv", 3, 16), ("conv", 1, 1)],
}


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    pool_spec: PoolSpec
    in_channels: int = 1
    relu_on_output: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}; "
                             f"choose from {sorted(ARCHITECTURES)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def layers(self):
        return ARCHITECTURES[self.name]

    @property
    def pool_sites(self) -> int:
        return sum(1 for layer in self.layers if layer[0] == "pool")

    @property
    def downsample_factor(self) -> int:
        return self.pool_spec.stride ** self.pool_sites

    def to_dict(self):
        return {"name": self.name, "pool_spec": str(self.pool_spec),
                "in_channels": self.in_channels,
                "relu_on_output": self.relu_on_output, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d):
        return cls(name=d["name"], pool_spec=PoolSpec.parse(d["pool_spec"]),
                   in_channels=d.get("in_channels", 1),
                   relu_on_output=d.get("relu_on_output", False),
                   dtype=d.get("dtype", "float64"))


@dataclass
class Network:
    config: NetworkConfig
    parameters: dict = field(default_factory=dict)

    def param_list(self):
        return list(self.parameters.items())


def conv_shapes(config: NetworkConfig):
    """(name, weight_shape, bias_shape) for each conv layer, in order."""
    shapes = []
    in_ch = config.in_channels
    idx = 0
    for layer in config.layers:
        if layer[0] != "conv":
            continue
        _, k, out_ch = layer
        shapes.append((f"conv{idx}", (out_ch, in_ch, k, k), (out_ch,)))
        in_ch = out_ch
        idx += 1
    return shapes


def param_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(ws)) + int(np.prod(bs))
               for _, ws, bs in conv_shapes(config))


def build(config: NetworkConfig, seed: int) -> Network:
    """Instantiate a network with He fan-in init for weights, zero biases."""
    rng = stream_rng(seed, f"init/{config.name}")
    dtype = np.dtype(config.dtype)
    params = {}
    for name, wshape, bshape in conv_shapes(config):
        fan_in = wshape[1] * wshape[2] * wshape[3]
        std = np.sqrt(2.0 / fan_in)
        w = rng.standard_normal(wshape) * std
        params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(bshape, dtype=dtype),
                                        requires_grad=True)
    return Network(config, params)


def forward(net: Network, image: Tensor, collect_pool_outputs=False):
    """Run the network; returns the density map (and pool-site maps if asked).

    Input spatial extents must be divisible by the total down-sampling
    factor so that every pooling stage divides evenly.
    """
    cfg = net.config
    if image.data.ndim != 4:
        raise ValueError(f"expected (N,C,H,W) input, got shape {image.shape}")
    factor = cfg.downsample_factor
    _, _, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(
            f"input extents {h}x{w} not divisible by the total "
            f"down-sampling factor {factor} of {cfg.name}")

    pool_outputs = []
    x = image
    conv_idx = 0
    n_convs = sum(1 for layer in cfg.layers if layer[0] == "conv")
    for layer in cfg.layers:
        if layer[0] == "pool":
            x = apply_pool(x, cfg.pool_spec)
            pool_outputs.append(x)
            continue
        w_t = net.parameters[f"conv{conv_idx}.weight"]
        b_t = net.parameters[f"conv{conv_idx}.bias"]
        x = conv2d(x, w_t, b_t, same_padding=True)
        is_output = conv_idx == n_convs - 1
        if not is_output or cfg.relu_on_output:
            x = relu(x)
        conv_idx += 1
    if collect_pool_outputs:
        return x, pool_outputs
    return x


def predicted_count(density_map: Tensor, rescale: float = 1.0) -> np.ndarray:
    """Per-batch-item count: clamped density mass times an optional rescale.

    With sum-preserving ground-truth down-sampling the rescale is 1; pass
    the squared down-sampling factor when targets are block means instead.
    """
    d = density_map.data if isinstance(density_map, Tensor) else np.asarray(density_map)
    if d.ndim != 4 or d.shape[1] != 1:
        raise ValueError(f"expected a (N,1,H,W) density map, got {d.shape}")
    return np.maximum(d, 0.0).sum(axis=(1, 2, 3)) * rescale


def downsample_density(density: np.ndarray, factor: int) -> np.ndarray:
    """Sum-preserving block reduction of a (1,H,W) or (N,1,H,W) density map."""
    arr = np.asarray(density)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    n, c, h, w = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by {factor}")
    out = arr.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    return out[0] if squeeze else out


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net: Network, manifest_extra: dict = None) -> None:
    """Write a network to a zip container: manifest.json plus one tensor
    blob per parameter. Timestamps are pinned so identical networks produce
    byte-identical files."""
    manifest = {"config": net.config.to_dict(),
                "parameters": sorted(net.parameters)}
    if manifest_extra:
        manifest.update(manifest_extra)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name in sorted(net.parameters):
            buf = io.BytesIO()
            save_tensor(buf, net.parameters[name])
            _write_entry(zf, f"params/{name}.pstn", buf.getvalue())


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (Network, manifest dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        config = NetworkConfig.from_dict(manifest["config"])
        params = {}
        for name in manifest["parameters"]:
            t = load_tensor(io.BytesIO(zf.read(f"params/{name}.pstn")))
            t.requires_grad = True
            params[name] = t
    return Network(config, params), manifest
