"""Gradient-quality instruments for the surrogates.

Feature inversion, radially averaged power spectra, an amplitude sweep that
contrasts exact (stepwise) and surrogate (smooth) descriptors, and a
finite-difference gradient checker. Surrogates are plain callables
``f(tape, x) -> gamma`` taking an ``(H, W)`` Var and returning a ``3N`` Var.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .analytic_surrogate import SoftGeomConfig, gamma_soft, tv_norm
from .emulator import Emulator, signed_log1p
from .grid_core import Field2D, Units
from .persistence import superlevel_persistence_0d, count_components_at
from . import exact_geometry as eg

log = logging.getLogger(__name__)

Surrogate = Callable[[ad.Tape, ad.Var], ad.Var]
SPECTRUM_FLOOR = 1e-30


class InversionDiverged(RuntimeError):
    pass


# -------------------------------------------------------------- surrogates


def analytic_surrogate(cfg: SoftGeomConfig, pixel_size: float = 1.0, tau: float | None = None) -> Surrogate:
    """Soft gamma of a field; a ``tau`` passed at call time overrides the default."""
    def f(tape, x, tau=tau):
        return gamma_soft(x, cfg, pixel_size, tau)

    return f


def emulator_surrogate(emu: Emulator, physical: bool = False) -> Surrogate:
    """Wrap an emulator for a single field.

    With ``physical`` the input is in mm/h and goes through the emulator's
    normalization on the tape (the drizzle cut acts as a fixed mask).
    """
    h, w = emu.cfg.height, emu.cfg.width

    def f(tape, x, tau=None):
        if physical:
            wet = (x.value >= emu.norm.drizzle_threshold).astype(np.float64)
            x = ad.log1p(ad.max2(x, 0.0)) * (wet / emu.norm.log_scale)
        out = emu.forward(tape, ad.reshape(x, (1, h, w)))
        return ad.reshape(out, (-1,))

    return f


# --------------------------------------------------------------- inversion


@dataclass(frozen=True)
class InversionConfig:
    target_gamma: np.ndarray
    shape: tuple[int, int] = (32, 32)
    steps: int = 200
    lr: float = 0.1
    lambda_tv: float = 1e-5
    lambda_l2: float = 1e-6
    seed: int = 0
    squared: bool = True
    x0: np.ndarray | None = None
    tau_start: float | None = None
    tau_end: float | None = None
    # per-channel (A, P, CC) weights on the squared log residual; None is unweighted
    weights: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0 or self.lambda_tv < 0 or self.lambda_l2 < 0:
            raise ValueError("lr and regularization weights must be >= 0")
        if (self.tau_start is None) != (self.tau_end is None):
            raise ValueError("tau_start and tau_end go together")
        if self.tau_start is not None and not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperatures must be > 0")
        if self.weights is not None and (len(self.weights) != 3 or min(self.weights) < 0):
            raise ValueError("weights must be three non-negative numbers")

    def tau_at(self, step: int) -> float | None:
        """Geometric temperature schedule reaching ``tau_end`` at the last step."""
        if self.tau_start is None:
            return None
        return self.tau_start * (self.tau_end / self.tau_start) ** (step / self.steps)


@dataclass
class InversionResult:
    x: np.ndarray
    x0: np.ndarray
    trace: list[float] = field(default_factory=list)
    data_trace: list[float] = field(default_factory=list)
    tv_trace: list[float] = field(default_factory=list)
    baseline: float = math.nan

    @property
    def reduction(self) -> float:
        """Fraction of the starting objective removed by the last iterate.

        Both ends are measured at the final temperature.
        """
        return 1.0 - self.trace[-1] / self.baseline if self.baseline > 0 else 0.0


def inversion_objective(surrogate: Surrogate, x: ad.Var, cfg: InversionConfig, tau: float | None = None):
    """Objective terms ``(total, data, tv)`` for a field Var."""
    pred = surrogate(x.tape, x) if tau is None else surrogate(x.tape, x, tau=tau)
    resid = signed_log1p(pred) - np.sign(cfg.target_gamma) * np.log1p(np.abs(cfg.target_gamma))
    sq = resid * resid
    if cfg.weights is not None:
        sq = sq * np.tile(np.asarray(cfg.weights, dtype=np.float64), len(cfg.target_gamma) // 3)
    data = ad.sum(sq)
    if not cfg.squared:
        data = ad.sqrt(data)
    tv = tv_norm(x)
    total = data + tv * cfg.lambda_tv + ad.sum(x * x) * cfg.lambda_l2
    return total, data, tv


def invert(cfg: InversionConfig, surrogate: Surrogate) -> InversionResult:
    """Plain gradient descent on the regularized log-space matching objective.

    ``trace[k]`` is the objective at iterate ``k``; the list has ``steps + 1``
    entries, the last one evaluated at the returned field. With a temperature
    schedule each entry uses that step's temperature, and ``baseline`` holds
    the starting field's objective at the final temperature.
    """
    if cfg.x0 is not None:
        x0 = np.array(cfg.x0, dtype=np.float64)
    else:
        x0 = np.random.default_rng(cfg.seed).standard_normal(cfg.shape)
    x = x0.copy()
    res = InversionResult(x, x0)
    for step in range(cfg.steps + 1):
        tape = ad.Tape()
        xv = tape.var(x)
        total, data, tv = inversion_objective(surrogate, xv, cfg, cfg.tau_at(step))
        loss = float(total.value)
        if not math.isfinite(loss):
            raise InversionDiverged(f"non-finite objective at step {step}")
        res.trace.append(loss)
        res.data_trace.append(float(data.value))
        res.tv_trace.append(float(tv.value))
        if step == cfg.steps:
            break
        g = tape.backward(total)[xv]
        if not np.all(np.isfinite(g)):
            raise InversionDiverged(f"non-finite gradient at step {step}")
        x = x - cfg.lr * g
    res.x = x
    if cfg.tau_start is None:
        res.baseline = res.trace[0]
    else:
        tape = ad.Tape()
        res.baseline = float(inversion_objective(surrogate, tape.const(x0), cfg, cfg.tau_end)[0].value)
    return res


# ---------------------------------------------------------------- spectra


def _radial_bins(h: int, w: int):
    """Annulus index and full-plane multiplicity of every rfft2 mode."""
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.rfftfreq(w) * w
    k = np.hypot(ky[:, None], kx[None, :])
    bins = np.floor(k + 0.5).astype(np.int64)
    mult = np.full(kx.size, 2.0)
    mult[0] = 1.0
    if w % 2 == 0:
        mult[-1] = 1.0
    return bins, np.broadcast_to(mult, bins.shape)


def rapsd(field, full: bool = False, return_counts: bool = False):
    """Hanning-windowed, azimuthally averaged power spectrum ``S(k)``.

    The 2-D power is ``|F(w x)|**2 / (H W)**2``; annulus ``k`` collects modes
    with ``k - 1/2 <= |k| < k + 1/2``. The result covers ``k = 0 ..
    floor(min(H, W) / 2)``, or every occupied annulus with ``full``.
    """
    x = field.values if isinstance(field, Field2D) else np.asarray(field, dtype=np.float64)
    h, w = x.shape
    if h < 4 or w < 4:
        raise ValueError("rapsd needs H, W >= 4")
    win = np.outer(np.hanning(h), np.hanning(w))
    power = np.abs(np.fft.rfft2(win * x)) ** 2 / (h * w) ** 2
    bins, mult = _radial_bins(h, w)
    n_bins = int(bins.max()) + 1 if full else min(h, w) // 2 + 1
    keep = bins < n_bins
    total = np.bincount(bins[keep], weights=(power * mult)[keep], minlength=n_bins)
    counts = np.bincount(bins[keep], weights=mult[keep], minlength=n_bins)
    spec = np.divide(total, counts, out=np.zeros(n_bins), where=counts > 0)
    return (spec, counts) if return_counts else spec


def spectral_ratio(model_field, ref_field) -> np.ndarray:
    a, b = _values(model_field), _values(ref_field)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return rapsd(a) / np.maximum(rapsd(b), SPECTRUM_FLOOR)


def raps_error(model_field, ref_field) -> float:
    """Mean ``|log10 S_model - log10 S_ref|`` over ``k >= 1``."""
    a, b = _values(model_field), _values(ref_field)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sa = np.maximum(rapsd(a)[1:], SPECTRUM_FLOOR)
    sb = np.maximum(rapsd(b)[1:], SPECTRUM_FLOOR)
    return float(np.mean(np.abs(np.log10(sa) - np.log10(sb))))


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, Field2D) else np.asarray(f, dtype=np.float64)


# ----------------------------------------------------------------- sweeps


def attribution(surrogate: Surrogate, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate gamma at ``x`` and the gradient of ``sum(signed_log1p(gamma))``."""
    tape = ad.Tape()
    xv = tape.var(x)
    g = surrogate(tape, xv)
    grads = tape.backward(ad.sum(signed_log1p(g)))
    return g.value.copy(), grads[xv]


def exact_gamma(field: Field2D, thresholds, epsilon: float = 0.0, infinite_cutoff: float = math.inf) -> np.ndarray:
    diagram = superlevel_persistence_0d(field)
    cc = count_components_at(diagram, np.asarray(thresholds, dtype=np.float64), epsilon, infinite_cutoff)
    out = []
    for u, c in zip(thresholds, cc):
        s = eg.excursion(field, u)
        out += [eg.area(s), eg.mask_perimeter(s.mask, field.pixel_size), float(c)]
    return np.asarray(out)


def mechanistic_sweep(
    base: Field2D,
    mask: np.ndarray,
    alphas,
    surrogate: Surrogate,
    thresholds,
    epsilon: float = 0.0,
    infinite_cutoff: float = math.inf,
) -> list[dict]:
    """Scale the masked region by each ``alpha`` and compare descriptors.

    Each row holds the exact gamma (stepwise in alpha), the surrogate gamma
    (smooth) and the share of squared surrogate-gradient energy that falls
    inside the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != base.shape:
        raise ValueError("mask must match the field shape")
    rows = []
    for a in alphas:
        a = float(a)
        if not math.isfinite(a):
            raise ValueError("alphas must be finite")
        vals = np.where(mask, base.values * a, base.values)
        f = base.replace(values=vals)
        g_sur, grad = attribution(surrogate, vals)
        energy = float((grad * grad).sum())
        inside = float((grad[mask] ** 2).sum()) / energy if energy > 0 else 0.0
        rows.append({
            "alpha": a,
            "exact": exact_gamma(f, thresholds, epsilon, infinite_cutoff),
            "surrogate": g_sur,
            "mask_energy": inside,
        })
    return rows


# -------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    h: float
    max_rel_err: list[float]
    tolerance: float = 1e-4

    @property
    def flagged(self) -> list[int]:
        return [i for i, e in enumerate(self.max_rel_err) if not e < self.tolerance]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err) if self.max_rel_err else 0.0

    @property
    def ok(self) -> bool:
        return not self.flagged


def random_smooth_fields(n: int, size: int = 16, seed: int = 0, sigma: float = 2.0) -> list[np.ndarray]:
    """Gaussian-filtered white noise rescaled to [0, 1].

    Generic fields keep finite differences away from the ties and flat tails
    where the min/max and |.| stencils of the surrogates have kinks.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        z = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        out.append((z - z.min()) / (z.max() - z.min()))
    return out


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def surrogate_loss(surrogate: Surrogate, target) -> Callable[[ad.Tape, ad.Var], ad.Var]:
    t = np.asarray(target, dtype=np.float64)

    def f(tape, x):
        return minkowski_signed(surrogate(tape, x), t)

    return f


def minkowski_signed(pred: ad.Var, target: np.ndarray) -> ad.Var:
    return ad.sum(ad.abs(signed_log1p(pred) - np.sign(target) * np.log1p(np.abs(target))))


def gradcheck(
    surrogate: Surrogate,
    fields,
    h: float = 1e-6,
    n_directions: int = 2,
    n_coords: int = 4,
    seed: int = 0,
    target_offset: float = 1.0,
    tolerance: float = 1e-4,
) -> GradcheckReport:
    """Reverse-mode vs central differences for the Minkowski loss of a surrogate.

    The loss compares the surrogate against its own output shifted by
    ``target_offset`` so that no residual sits on the kink of ``|.|``. Each
    field is probed along random unit directions and single coordinates.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    rng = np.random.default_rng(seed)
    errs = []
    for f in fields:
        x = _values(f).copy()
        tape = ad.Tape()
        target = surrogate(tape, tape.const(x)).value + target_offset
        loss_fn = surrogate_loss(surrogate, target)

        def value(z):
            t = ad.Tape()
            return float(loss_fn(t, t.const(z)).value)

        tape = ad.Tape()
        xv = tape.var(x)
        grad = tape.backward(loss_fn(tape, xv))[xv]
        if not np.all(np.isfinite(grad)):
            errs.append(math.inf)
            continue
        worst = 0.0
        for _ in range(n_directions):
            d = rng.standard_normal(x.shape)
            d /= np.linalg.norm(d)
            fd = (value(x + h * d) - value(x - h * d)) / (2 * h)
            worst = max(worst, rel_err(float((grad * d).sum()), fd))
        for idx in rng.choice(x.size, size=min(n_coords, x.size), replace=False):
            e = np.zeros(x.size)
            e[idx] = 1.0
            e = e.reshape(x.shape)
            fd = (value(x + h * e) - value(x - h * e)) / (2 * h)
            worst = max(worst, rel_err(float(grad.ravel()[idx]), fd))
        errs.append(worst)
    return GradcheckReport(h, errs, tolerance)


# ----------------------------------------------------------------- output


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def sweep_rows(rows: list[dict]) -> tuple[list[str], list[list]]:
    """Flatten sweep output into CSV columns ``alpha, A1, P1, CC1, ..., mask_energy``."""
    n = rows[0]["exact"].size // 3 if rows else 0
    header = ["alpha"]
    for i in range(1, n + 1):
        header += [f"A{i}", f"P{i}", f"CC{i}"]
    for i in range(1, n + 1):
        header += [f"A{i}_sur", f"P{i}_sur", f"chi{i}_sur"]
    header.append("mask_energy")
    out = [[r["alpha"], *map(float, r["exact"]), *map(float, r["surrogate"]), r["mask_energy"]] for r in rows]
    return header, out


def write_pgm(path, field) -> None:
    """8-bit binary PGM, linearly stretched from min to max."""
    x = _values(field)
    lo, hi = float(x.min()), float(x.max())
    scaled = np.zeros(x.shape) if hi == lo else (x - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode() + img.tobytes())


def as_field(x: np.ndarray, pixel_size: float = 1.0, units: Units = Units.NORMALIZED) -> Field2D:
    return Field2D(x, pixel_size, units)
