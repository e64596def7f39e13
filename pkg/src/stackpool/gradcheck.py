"""Central finite-difference checking of analytic gradients.

Non-smooth coordinates (ReLU kinks, max-pool argmax flips) make a finite
difference meaningless, so each coordinate is probed at two step sizes and
skipped when the two estimates disagree, or when both the analytic and
numeric values are too small to carry information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import networks
from .seeding import stream_rng
from .tensor import Tensor, mse_loss


@dataclass
class GradCheckResult:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    worst: tuple = None               # (tensor name, flat index)
    details: list = field(default_factory=list)

    def merge(self, other):
        self.checked += other.checked
        self.skipped += other.skipped
        if other.max_rel_error > self.max_rel_error:
            self.max_rel_error = other.max_rel_error
            self.worst = other.worst


def _directional_fd(loss_fn, tensor, flat_index, step):
    flat = tensor.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + step
    up = loss_fn()
    flat[flat_index] = orig - step
    down = loss_fn()
    flat[flat_index] = orig
    return (up - down) / (2.0 * step)


def check_tensor(loss_fn, tensor, analytic, name="tensor", coords=None,
                 step=1e-5, min_magnitude=1e-6, kink_tol=0.05):
    """Compare analytic gradient coordinates of one tensor against central
    differences of `loss_fn` (which must re-evaluate the loss from scratch).

    `coords` is an iterable of flat indices; all coordinates when omitted.
    """
    result = GradCheckResult()
    grad = np.asarray(analytic).reshape(-1)
    if coords is None:
        coords = range(tensor.data.size)
    for idx in coords:
        fd1 = _directional_fd(loss_fn, tensor, idx, step)
        fd2 = _directional_fd(loss_fn, tensor, idx, 2 * step)
        scale = max(abs(fd1), abs(fd2), abs(grad[idx]))
        if scale < min_magnitude:
            result.skipped += 1
            continue
        if abs(fd1 - fd2) > kink_tol * scale:
            # non-smooth coordinate (tie or kink); finite difference invalid
            result.skipped += 1
            continue
        rel = abs(grad[idx] - fd1) / max(abs(grad[idx]), abs(fd1))
        result.checked += 1
        if rel > result.max_rel_error:
            result.max_rel_error = rel
            result.worst = (name, int(idx))
    return result


def check_network(config: networks.NetworkConfig, extents=(32, 32),
                  seed: int = 0, coords_per_tensor: int = 12,
                  step: float = 1e-5) -> GradCheckResult:
    """End-to-end gradient check of a network through its training loss.

    Samples coordinates from every parameter tensor and from the input,
    comparing analytic gradients of the pixel-wise MSE loss against central
    differences.
    """
    if config.dtype != "float64":
        config = networks.NetworkConfig(config.name, config.pool_spec,
                                        config.in_channels,
                                        config.relu_on_output, "float64")
    net = networks.build(config, seed)
    rng = stream_rng(seed, "gradcheck")
    factor = config.downsample_factor
    h, w = extents
    x = Tensor(rng.standard_normal((1, config.in_channels, h, w)),
               requires_grad=True)
    target = Tensor(rng.standard_normal((1, 1, h // factor, w // factor)))

    def loss_value():
        return mse_loss(networks.forward(net, Tensor(x.data)), target).item()

    # one analytic sweep gives every gradient at once
    loss = mse_loss(networks.forward(net, x), target)
    loss.backward()

    result = GradCheckResult()
    checkables = list(net.parameters.items()) + [("input", x)]
    for name, t in checkables:
        size = t.data.size
        k = min(coords_per_tensor, size)
        coords = sorted(rng.choice(size, size=k, replace=False).tolist())
        result.merge(check_tensor(loss_value, t, t.grad, name=name,
                                  coords=coords, step=step))
    for _, t in checkables:
        t.zero_grad()
    return result
