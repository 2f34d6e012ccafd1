"""Closed-form differentiable relaxation of area, perimeter and Euler characteristic.

Thresholding is replaced by a temperature-controlled sigmoid. Area is the
weighted sum of the resulting pseudo-probabilities, perimeter their
anisotropic total variation, and the Euler characteristic an alternating sum
over the 4-adjacency complex where ``min`` plays the role of logical AND.
Before thresholding the field can be smoothed by a soft morphological opening
and gated by a local persistence mask; the Euler channel is reported through a
symmetric logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .grid_core import Field2D, NormalizationSpec

_NEIGHBOURS_3X3 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


@dataclass(frozen=True)
class SoftGeomConfig:
    """Settings of the analytic surrogate; thresholds share the field's units."""

    thresholds: tuple[float, ...]
    tau: float = 0.05
    tau_mask: float = 0.02
    persistence_delta: float = 0.0
    use_morph_filter: bool = True
    use_persistence_mask: bool = True
    anneal_ratio: float = 1.0
    anneal_floor: float = 1e-3

    def __post_init__(self):
        t = tuple(float(u) for u in self.thresholds)
        if not t:
            raise ValueError("at least one threshold is required")
        if any(b < a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be ascending")
        if not self.tau > 0 or not self.tau_mask > 0:
            raise ValueError("temperatures must be > 0")
        if self.persistence_delta < 0:
            raise ValueError("persistence_delta must be >= 0")
        if not self.anneal_floor > 0:
            raise ValueError("anneal_floor must be > 0")
        object.__setattr__(self, "thresholds", t)

    @property
    def n_levels(self) -> int:
        return len(self.thresholds)

    @classmethod
    def normalized(
        cls,
        physical_thresholds,
        norm: NormalizationSpec,
        persistence_delta: float = 0.05,
        **kw,
    ) -> "SoftGeomConfig":
        """Config for normalized fields, mapping mm/h thresholds and delta through ``norm``."""
        thr = tuple(float(np.log1p(u) / norm.log_scale) for u in physical_thresholds)
        delta = float(np.log1p(persistence_delta) / norm.log_scale)
        return cls(thr, persistence_delta=delta, **kw)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "tau": self.tau,
            "tau_mask": self.tau_mask,
            "delta": self.persistence_delta,
            "morph_filter": self.use_morph_filter,
            "persistence_mask": self.use_persistence_mask,
            "anneal_ratio": self.anneal_ratio,
            "anneal_floor": self.anneal_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftGeomConfig":
        return cls(
            tuple(d["thresholds"]),
            tau=d.get("tau", 0.05),
            tau_mask=d.get("tau_mask", 0.02),
            persistence_delta=d.get("delta", 0.0),
            use_morph_filter=d.get("morph_filter", True),
            use_persistence_mask=d.get("persistence_mask", True),
            anneal_ratio=d.get("anneal_ratio", 1.0),
            anneal_floor=d.get("anneal_floor", 1e-3),
        )


def soft_indicator(x: Var, u: float, tau: float) -> Var:
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return ad.sigmoid((x - u) * (1.0 / tau))


def soft_area(p: Var, pixel_size: float = 1.0) -> Var:
    return ad.sum(p) * pixel_size**2


def tv_norm(x: Var) -> Var:
    """Anisotropic total variation with zero padding on all four sides."""
    dv = ad.sum(ad.abs(x - ad.shift(x, 1, 0))) + ad.sum(ad.abs(x[-1, :]))
    dh = ad.sum(ad.abs(x - ad.shift(x, 0, 1))) + ad.sum(ad.abs(x[:, -1]))
    return dv + dh


def soft_perimeter(p: Var, pixel_size: float = 1.0) -> Var:
    return tv_norm(p) * pixel_size


def soft_euler(p: Var) -> Var:
    """Vertices minus edges plus faces of the 4-adjacency complex, with min as AND."""
    up, left, diag = ad.shift(p, 1, 0), ad.shift(p, 0, 1), ad.shift(p, 1, 1)
    vertices = ad.sum(p)
    edges = ad.sum(ad.min2(p, up)) + ad.sum(ad.min2(p, left))
    faces = ad.sum(ad.min2(ad.min2(p, up), ad.min2(left, diag)))
    return vertices - edges + faces


def _outside(shape, dy: int, dx: int, fill: float) -> np.ndarray:
    """``fill`` where a shift by ``(dy, dx)`` pulls in pixels from outside the grid."""
    out = np.zeros(shape)
    if dy > 0:
        out[:dy, :] = fill
    elif dy < 0:
        out[dy:, :] = fill
    if dx > 0:
        out[:, :dx] = fill
    elif dx < 0:
        out[:, dx:] = fill
    return out


def _neighbourhood(x: Var, reduce, fill: float) -> Var:
    out = x
    for dy, dx in _NEIGHBOURS_3X3:
        out = reduce(out, ad.shift(x, dy, dx) + _outside(x.shape, dy, dx, fill))
    return out


def soft_erode(x: Var) -> Var:
    """3x3 minimum filter; pixels outside the grid are ignored."""
    return _neighbourhood(x, ad.min2, math.inf)


def soft_dilate(x: Var) -> Var:
    """3x3 maximum filter; pixels outside the grid are ignored."""
    return _neighbourhood(x, ad.max2, -math.inf)


def morph_prefilter(x: Var) -> Var:
    """Morphological opening (erosion then dilation) with a 3x3 stencil."""
    return soft_dilate(soft_erode(x))


def persistence_mask(x: Var, delta: float, tau_mask: float) -> Var:
    """Soft gate that is ~1 near local peaks above ``delta`` and ~0 elsewhere."""
    if delta < 0 or not tau_mask > 0:
        raise ValueError("need delta >= 0 and tau_mask > 0")
    return ad.sigmoid((soft_dilate(x) - delta) * (1.0 / tau_mask))


def symlog(y: Var) -> Var:
    sign = np.sign(y.value)
    return ad.log1p(ad.abs(y)) * sign


def _vec(s: Var) -> Var:
    return s * np.ones(1)


def gamma_soft(x: Var, cfg: SoftGeomConfig, pixel_size: float = 1.0, tau: float | None = None) -> Var:
    """Relaxed gamma vector ``[A, P, symlog(chi)]`` per threshold, length 3N."""
    tau = cfg.tau if tau is None else tau
    xf = morph_prefilter(x) if cfg.use_morph_filter else x
    gate = persistence_mask(xf, cfg.persistence_delta, cfg.tau_mask) if cfg.use_persistence_mask else None
    parts = []
    for u in cfg.thresholds:
        p = soft_indicator(xf, u, tau)
        if gate is not None:
            p = p * gate
        parts += [
            _vec(soft_area(p, pixel_size)),
            _vec(soft_perimeter(p, pixel_size)),
            _vec(symlog(soft_euler(p))),
        ]
    return ad.concat(parts)


def gamma_soft_value(field: Field2D, cfg: SoftGeomConfig, tau: float | None = None) -> np.ndarray:
    tape = ad.Tape()
    return gamma_soft(tape.const(field.values), cfg, field.pixel_size, tau).value.copy()


def anneal_tau(cfg: SoftGeomConfig, epoch: int, tau0: float | None = None) -> float:
    """Geometric schedule ``max(floor, tau0 * ratio**epoch)``."""
    tau0 = cfg.tau if tau0 is None else tau0
    return max(cfg.anneal_floor, tau0 * cfg.anneal_ratio**epoch)
