"""Language-generated convolution kernels for both segmentation branches.

The encoded expression r is split into m equal slices; each slice feeds one
affine per branch level (dropout -> affine -> L2 normalize -> reshape) to
produce that level's convolution kernel. All kernels here are batched: a
leading axis carries one kernel per example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, affine, dropout, narrow, reshape, sqrt, sum_

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Geometry of one text kernel: spatial extent, channels, and mode."""

    spatial: int
    cin: int
    cout: int
    mode: str = "full"

    def __post_init__(self):
        if self.spatial not in (1, 3):
            raise ConfigError(f"text kernel spatial extent must be 1 or 3, got {self.spatial}")
        if self.mode not in ("full", "depthwise"):
            raise ConfigError(f"unknown text kernel mode {self.mode!r}")
        if self.mode == "depthwise" and self.cin != self.cout:
            raise ConfigError(
                f"depthwise kernels need cin == cout, got {self.cin} != {self.cout}")
        if self.cin < 1 or self.cout < 1:
            raise ConfigError("kernel channel counts must be positive")

    @property
    def param_count(self) -> int:
        if self.mode == "full":
            return self.cout * self.cin * self.spatial * self.spatial
        return self.cin * self.spatial * self.spatial

    def batched_shape(self, batch: int) -> tuple[int, ...]:
        if self.mode == "full":
            return (batch, self.cout, self.cin, self.spatial, self.spatial)
        return (batch, self.cin, self.spatial, self.spatial)


@dataclass(frozen=True)
class KernelPlan:
    """Per-level kernel specs for the contracting and expanding branches.

    ``down`` is None when only the expanding branch is language-modulated.
    """

    down: tuple[KernelSpec, ...] | None
    up: tuple[KernelSpec, ...]
    dropout_p: float = 0.2

    @property
    def depth(self) -> int:
        return len(self.up)


@dataclass
class TextKernels:
    """The per-level generated kernels plus the slices they came from."""

    down: list[Tensor]
    up: list[Tensor]
    parts: list[Tensor]


def split_text(r: Tensor, m: int) -> list[Tensor]:
    """Split r (…, Hd) into m contiguous equal slices along the last axis."""
    hd = r.shape[-1]
    if m < 1:
        raise ConfigError(f"split count must be >= 1, got {m}")
    if hd % m != 0:
        raise ConfigError(f"hidden size {hd} is not divisible by depth {m}")
    step = hd // m
    return [narrow(r, r.ndim - 1, i * step, step) for i in range(m)]


def make_text_kernel(t: Tensor, w: Tensor, b: Tensor, spec: KernelSpec,
                     p_drop: float = 0.0, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """dropout -> affine -> L2-normalize -> reshape, for a batch of slices.

    ``t`` is (B, Hd/m) (a single (Hd/m,) slice is treated as a batch of one
    and returned unbatched). The affine output length must equal the spec's
    parameter count; the kernel is normalized to unit Euclidean norm with a
    small floor added to the denominator.
    """
    single = t.ndim == 1
    if single:
        t = reshape(t, (1, t.shape[0]))
    if w.shape[0] != spec.param_count:
        raise DimensionError(
            f"affine produces {w.shape[0]} values but spec needs {spec.param_count}")
    if training and p_drop > 0.0 and rng is None:
        raise ConfigError("training-mode kernel dropout needs an rng")
    x = dropout(t, p_drop, training, rng) if p_drop > 0.0 else t
    flat = affine(x, w, b)
    norm = sqrt(sum_(flat * flat, axis=1, keepdims=True))
    unit = flat / (norm + NORM_FLOOR)
    k = reshape(unit, spec.batched_shape(t.shape[0]))
    if single:
        k = reshape(k, k.shape[1:])
    return k


def build_all_kernels(r: Tensor, down_affines: list[tuple[Tensor, Tensor]] | None,
                      up_affines: list[tuple[Tensor, Tensor]], plan: KernelPlan,
                      training: bool = False,
                      rng: np.random.Generator | None = None) -> TextKernels:
    """Generate kernels for every level from the slices of r.

    Slice t_i feeds both the i-th contracting and the i-th expanding affine;
    the two affines have independent weights. Dropout is drawn independently
    per kernel, contracting branch first, in level order.
    """
    m = plan.depth
    parts = split_text(r, m)
    if plan.down is not None:
        if down_affines is None or len(down_affines) != m:
            raise ConfigError(f"expected {m} contracting affine parameter sets")
    if len(up_affines) != m:
        raise ConfigError(f"expected {m} expanding affine parameter sets")

    down: list[Tensor] = []
    if plan.down is not None:
        for t, (w, b), spec in zip(parts, down_affines, plan.down):
            down.append(make_text_kernel(t, w, b, spec, plan.dropout_p, training, rng))
    up: list[Tensor] = []
    for t, (w, b), spec in zip(parts, up_affines, plan.up):
        up.append(make_text_kernel(t, w, b, spec, plan.dropout_p, training, rng))
    return TextKernels(down=down, up=up, parts=parts)
