"""Vanilla, multi-kernel, and stacked max pooling.

Multi-kernel pooling runs several max poolings with different kernel sizes
over the same input at a shared stride and fuses the branch maps by
element-wise mean. Stacked pooling chains smaller poolings (first at the
down-sampling stride, the rest at stride 1) and fuses the intermediate maps
the same way. Under the left-anchored window convention used here the two
forms are numerically identical once the kernel sets are matched by
``stacked_kernels_for``.

All windows are left-anchored: the kernel-k window at output position z
covers input [s*z, s*z + k - 1], with -inf beyond the edge. This is the
convention under which the equivalence is exact including borders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, elementwise_mean, max_pool2d

VARIANTS = ("vanilla", "multi_kernel", "stacked")

_SPEC_ALIASES = {"vanilla": "vanilla", "multi": "multi_kernel",
                 "multi_kernel": "multi_kernel", "stacked": "stacked"}
_SPEC_NAMES = {"vanilla": "vanilla", "multi_kernel": "multi",
               "stacked": "stacked"}


@dataclass(frozen=True)
class PoolSpec:
    """Pooling configuration: variant, ordered kernel sizes, first-stage stride."""

    variant: str
    kernels: tuple
    stride: int

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown pooling variant {self.variant!r}")
        if not self.kernels:
            raise ValueError("kernel set must be non-empty")
        if any(k < 1 for k in self.kernels):
            raise ValueError(f"kernel sizes must be >= 1, got {self.kernels}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.variant == "vanilla" and len(self.kernels) != 1:
            raise ValueError("vanilla pooling takes exactly one kernel")
        if self.variant == "multi_kernel":
            if any(b <= a for a, b in zip(self.kernels, self.kernels[1:])):
                raise ValueError(
                    f"multi-kernel sizes must be strictly increasing, "
                    f"got {self.kernels}")
            if any(k < self.stride for k in self.kernels):
                raise ValueError(
                    f"multi-kernel sizes must be >= stride {self.stride} "
                    f"so branch extents match, got {self.kernels}")

    def __str__(self):
        ks = ",".join(str(k) for k in self.kernels)
        return f"{_SPEC_NAMES[self.variant]}:{ks}:s{self.stride}"

    @classmethod
    def parse(cls, text: str) -> "PoolSpec":
        """Parse forms like "vanilla:2:s2", "multi:2,4,8:s2", "stacked:2,2,3:s2"."""
        parts = text.strip().split(":")
        if len(parts) != 3 or not parts[2].startswith("s"):
            raise ValueError(
                f"bad pool spec {text!r}; expected variant:k1,k2,...:sN")
        variant = _SPEC_ALIASES.get(parts[0].lower())
        if variant is None:
            raise ValueError(f"unknown pooling variant {parts[0]!r}")
        try:
            kernels = tuple(int(k) for k in parts[1].split(","))
            stride = int(parts[2][1:])
        except ValueError as exc:
            raise ValueError(f"bad pool spec {text!r}: {exc}") from None
        return cls(variant, kernels, stride)


def pool_vanilla(x: Tensor, k: int, s: int) -> Tensor:
    """Single-kernel max pooling (k x k window, stride s, left-anchored)."""
    return max_pool2d(x, k, s)


def pool_multi_kernel(x: Tensor, spec: PoolSpec) -> Tensor:
    """Parallel max poolings over the kernel set, fused by element-wise mean."""
    if spec.variant != "multi_kernel":
        raise ValueError(f"expected a multi_kernel spec, got {spec.variant}")
    branches = [max_pool2d(x, k, spec.stride) for k in spec.kernels]
    shapes = {b.shape for b in branches}
    assert len(shapes) == 1, f"branch shapes diverged: {shapes}"
    return elementwise_mean(branches)


def pool_stacked(x: Tensor, spec: PoolSpec) -> Tensor:
    """Chained max poolings (stride s then stride 1), intermediates mean-fused."""
    if spec.variant != "stacked":
        raise ValueError(f"expected a stacked spec, got {spec.variant}")
    stages = []
    y = x
    for i, k in enumerate(spec.kernels):
        y = max_pool2d(y, k, spec.stride if i == 0 else 1)
        stages.append(y)
    return elementwise_mean(stages)


def apply_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    if spec.variant == "vanilla":
        return pool_vanilla(x, spec.kernels[0], spec.stride)
    if spec.variant == "multi_kernel":
        return pool_multi_kernel(x, spec)
    return pool_stacked(x, spec)


def stacked_kernels_for(multi_kernels, s: int) -> list:
    """Kernel sizes whose stacked form matches a multi-kernel set at stride s.

    Stage i of the stack has an effective input window of
    k'_1 + sum_{1<j<=i} (k'_j - 1) * s, so k'_1 = k_1 and
    k'_i = (k_i - k_{i-1}) / s + 1 for i > 1. The consecutive gaps must be
    divisible by the stride for an exact match.
    """
    ks = [int(k) for k in multi_kernels]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError(f"kernel set must be strictly increasing, got {ks}")
    out = [ks[0]]
    for prev, cur in zip(ks, ks[1:]):
        gap = cur - prev
        if gap % s != 0:
            raise ValueError(
                f"kernel pair ({prev}, {cur}) has gap {gap} not divisible by "
                f"stride {s}; no exact stacked form exists")
        out.append(gap // s + 1)
    return out


def stacked_spec_for(multi_spec: PoolSpec) -> PoolSpec:
    """Stacked PoolSpec equivalent to the given multi-kernel spec."""
    kernels = stacked_kernels_for(multi_spec.kernels, multi_spec.stride)
    return PoolSpec("stacked", tuple(kernels), multi_spec.stride)


@dataclass(frozen=True)
class EquivalenceResult:
    forward_max_diff: float
    grad_max_diff: float

    @property
    def exact(self) -> bool:
        return self.forward_max_diff == 0.0


def verify_equivalence(x: Tensor, multi_spec: PoolSpec,
                       upstream: np.ndarray = None) -> EquivalenceResult:
    """Max |multi-kernel - stacked| for forward outputs and input gradients.

    Both forms are run on the same input; gradients are taken w.r.t. the
    input under a shared upstream gradient (all ones by default). The
    forward difference is 0 for every valid input; the gradient difference
    is 0 when window maxima are unique (ties may route differently).
    """
    if multi_spec.variant != "multi_kernel":
        raise ValueError(f"expected a multi_kernel spec, got {multi_spec.variant}")
    stacked_spec = stacked_spec_for(multi_spec)

    xa = Tensor(x.data.copy(), requires_grad=True)
    xb = Tensor(x.data.copy(), requires_grad=True)
    ya = pool_multi_kernel(xa, multi_spec)
    yb = pool_stacked(xb, stacked_spec)
    fwd = float(np.max(np.abs(ya.data - yb.data)))

    if upstream is None:
        upstream = np.ones_like(ya.data)
    # weighted sums make the shared upstream an explicit part of both graphs
    la = _weighted_sum(ya, upstream)
    lb = _weighted_sum(yb, upstream)
    la.backward()
    lb.backward()
    grad = float(np.max(np.abs(xa.grad - xb.grad)))
    return EquivalenceResult(fwd, grad)


def _weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    from .tensor import _node

    def bwd(g):
        y._accumulate_grad(g.reshape(-1)[0] * weights)

    return _node(np.sum(y.data * weights).reshape(()), (y,), bwd)
