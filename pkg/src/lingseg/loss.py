"""Pixel-wise BCE objective with ignore masks and multi-scale auxiliary terms.

The printed form of the training objective lacks a leading minus; what is
minimized here is the standard negated cross-entropy, which has the same
optimum. Auxiliary terms compare each per-level probability map against an
area-averaged (soft) downscale of the ground-truth mask, weighted by the
resolution ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .model import ForwardOutput
from .tensor import Tensor, clip, log, sum_

BCE_EPS = 1e-7
WEIGHT_MODES = ("area", "linear")


@dataclass
class LossReport:
    """total = final_term + sum(weight * aux_value)."""

    total: Tensor
    final_term: Tensor
    aux_terms: list[tuple[tuple[int, int], float, Tensor]]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def bce_loss(p: Tensor, gm, ignore=None) -> Tensor:
    """Mean binary cross-entropy over non-ignored pixels.

    ``p`` is clamped into [eps, 1-eps] before the logs; ``gm`` may be soft
    (values in [0,1]). ``ignore`` marks pixels excluded from the mean with 1.
    """
    gm_arr = _as_array(gm).astype(p.dtype)
    if gm_arr.shape != p.shape:
        raise DimensionError(f"prediction {p.shape} and target {gm_arr.shape} differ")
    if gm_arr.min() < 0.0 or gm_arr.max() > 1.0:
        raise ContractError("target values must lie in [0,1]")
    if ignore is not None:
        ig = _as_array(ignore)
        if ig.shape != p.shape:
            raise DimensionError(f"ignore mask {ig.shape} does not match {p.shape}")
        valid = (ig == 0).astype(p.dtype)
    else:
        valid = np.ones(p.shape, dtype=p.dtype)
    count = valid.sum()
    if count == 0:
        raise ContractError("all pixels are ignored; the loss is undefined")
    pc = clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -1.0 * (gm_arr * log(pc) + (1.0 - gm_arr) * log(1.0 - pc))
    return sum_(per_pixel * valid) * (1.0 / float(count))


def downscale_mask(gm, target: tuple[int, int]) -> np.ndarray:
    """Area-average a (...,H,W) mask down to (...,h,w); soft values in [0,1]."""
    arr = _as_array(gm).astype(np.float64)
    th, tw = target
    h, w = arr.shape[-2], arr.shape[-1]
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ConfigError(
            f"target {th}x{tw} must divide the mask extent {h}x{w} exactly")
    fh, fw = h // th, w // tw
    shaped = arr.reshape(arr.shape[:-2] + (th, fh, tw, fw))
    return shaped.mean(axis=(-3, -1))


def downscale_ignore(ignore, target: tuple[int, int]) -> np.ndarray:
    """Downscale an ignore mask: a low-res pixel is ignored when at least
    half of its source pixels were."""
    return (downscale_mask(ignore, target) >= 0.5).astype(np.uint8)


def multiscale_loss(out: ForwardOutput, gm, ignore=None, enabled: bool = True,
                    weight_mode: str = "area") -> LossReport:
    """Final BCE plus resolution-weighted auxiliary BCE terms.

    With ``enabled=False`` the report's total IS the final BCE term (the
    no-multi-scale ablation is a strict special case). ``weight_mode``
    "area" uses the pixel-count ratio (h*w)/(H*W); "linear" uses its square
    root.
    """
    if weight_mode not in WEIGHT_MODES:
        raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
    final_term = bce_loss(out.p, gm, ignore)
    if not enabled:
        return LossReport(total=final_term, final_term=final_term, aux_terms=[])

    h, w = out.p.shape[-2], out.p.shape[-1]
    gm_arr = _as_array(gm)
    ig_arr = None if ignore is None else _as_array(ignore)
    total = final_term
    aux_terms = []
    for aux in out.aux:
        ah, aw = aux.shape[-2], aux.shape[-1]
        gm_small = downscale_mask(gm_arr, (ah, aw))
        ig_small = None if ig_arr is None else downscale_ignore(ig_arr, (ah, aw))
        value = bce_loss(aux, gm_small, ig_small)
        ratio = (ah * aw) / (h * w)
        weight = ratio if weight_mode == "area" else float(np.sqrt(ratio))
        total = total + weight * value
        aux_terms.append(((ah, aw), weight, value))
    return LossReport(total=total, final_term=final_term, aux_terms=aux_terms)
