"""Field representation, raster I/O, normalization and synthetic fields.

All operations are pure: a :class:`Field2D` is immutable once built and every
function returns a new instance.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

RASTER_MAGIC = b"MGF2D\x00\x00\x01"
HEADER_SIZE = 32
# 2**28 pixels (1 GiB of float32) is far beyond any radar patch.
MAX_PIXELS = 1 << 28


class FieldError(ValueError):
    """Invalid field construction or incompatible fields."""


class RasterError(ValueError):
    """Base class for raster decoding failures."""


class BadMagicError(RasterError):
    pass


class TruncatedRasterError(RasterError):
    pass


class DimensionOverflowError(RasterError):
    pass


class Units(enum.IntEnum):
    PHYSICAL = 0
    NORMALIZED = 1


@dataclass(frozen=True, eq=False)
class Field2D:
    """A rectangular grid of intensities.

    ``values`` is stored as a read-only float64 array of shape
    ``(height, width)``. ``pixel_size`` is the side of one pixel in km.
    """

    values: np.ndarray
    pixel_size: float = 2.0
    units: Units = Units.PHYSICAL

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise FieldError(f"field must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise FieldError("field must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise FieldError("field contains NaN or Inf")
        if not (np.isfinite(self.pixel_size) and self.pixel_size > 0):
            raise FieldError(f"pixel_size must be > 0, got {self.pixel_size}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))
        object.__setattr__(self, "units", Units(self.units))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def replace(self, values=None, units=None) -> "Field2D":
        return Field2D(
            self.values if values is None else values,
            self.pixel_size,
            self.units if units is None else units,
        )

    def __eq__(self, other):
        if not isinstance(other, Field2D):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.pixel_size == other.pixel_size
            and self.units == other.units
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class NormalizationSpec:
    """Drizzle threshold (mm/h) and the log-max scale ``S``."""

    drizzle_threshold: float = 0.1
    log_scale: float = 1.0

    def __post_init__(self):
        if not self.drizzle_threshold >= 0:
            raise ValueError("drizzle_threshold must be >= 0")
        if not self.log_scale > 0:
            raise ValueError("log_scale must be > 0")

    @classmethod
    def fit(cls, fields, drizzle_threshold: float = 0.1) -> "NormalizationSpec":
        """Scale from the global maximum of ``log(1 + x)`` over ``fields``."""
        peak = 0.0
        for f in fields:
            v = f.values if isinstance(f, Field2D) else np.asarray(f)
            peak = max(peak, float(np.log1p(v.max())))
        return cls(drizzle_threshold, peak if peak > 0 else 1.0)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x < self.drizzle_threshold, 0.0, np.log1p(np.maximum(x, 0.0)) / self.log_scale)

    def inverse(self, y):
        x = np.expm1(self.log_scale * np.asarray(y, dtype=np.float64))
        return np.where(x < self.drizzle_threshold, 0.0, x)


def normalize(field: Field2D, spec: NormalizationSpec) -> Field2D:
    if field.units != Units.PHYSICAL:
        raise FieldError("normalize expects a physical field")
    return field.replace(spec.forward(field.values), Units.NORMALIZED)


def denormalize(field: Field2D, spec: NormalizationSpec) -> Field2D:
    if field.units != Units.NORMALIZED:
        raise FieldError("denormalize expects a normalized field")
    return field.replace(spec.inverse(field.values), Units.PHYSICAL)


def gen_multipeak_gaussian(
    seed: int,
    height: int,
    width: int,
    n_peaks: int,
    amp_range: tuple[float, float] = (1.0, 20.0),
    sigma_range: tuple[float, float] = (1.5, 5.0),
    pixel_size: float = 2.0,
) -> Field2D:
    """Sum of ``n_peaks`` isotropic Gaussians with pixel-snapped centres.

    Amplitudes and widths (in pixels) are uniform in the given ranges.
    """
    if height < 4 or width < 4:
        raise FieldError(f"domain {height}x{width} too small (minimum 4x4)")
    if n_peaks < 1:
        raise ValueError("n_peaks must be >= 1")
    lo_a, hi_a = amp_range
    lo_s, hi_s = sigma_range
    if not (0 < lo_a <= hi_a and 0 < lo_s <= hi_s):
        raise ValueError("amplitude and sigma ranges must be positive and ordered")

    rng = np.random.default_rng(seed)
    cy = rng.integers(0, height, size=n_peaks)
    cx = rng.integers(0, width, size=n_peaks)
    amps = rng.uniform(lo_a, hi_a, size=n_peaks)
    sigmas = rng.uniform(lo_s, hi_s, size=n_peaks)

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for y0, x0, a, s in zip(cy, cx, amps, sigmas):
        out += a * np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2.0 * s * s))
    return Field2D(out, pixel_size, Units.PHYSICAL)


def interp_partner(field: Field2D, factor: int = 4) -> Field2D:
    """Block-average by ``factor`` then bilinearly upsample to the original grid."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    v = field.values
    h, w = v.shape
    hc, wc = -(-h // factor), -(-w // factor)
    padded = np.pad(v, ((0, hc * factor - h), (0, wc * factor - w)), mode="edge")
    coarse = padded.reshape(hc, factor, wc, factor).mean(axis=(1, 3))
    ys = (np.arange(h) + 0.5) / factor - 0.5
    xs = (np.arange(w) + 0.5) / factor - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    up = ndimage.map_coordinates(coarse, [yy, xx], order=1, mode="nearest")
    return field.replace(up)


def _split_seed(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    lam_ss, eps_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(lam_ss), np.random.default_rng(eps_ss)


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    g1 = rng.standard_gamma(alpha)
    g2 = rng.standard_gamma(alpha)
    total = g1 + g2
    # both gammas can underflow to 0 for tiny alpha
    return 0.5 if total == 0 else float(g1 / total)


def mixup(
    real: Field2D,
    interp: Field2D,
    alpha: float = 0.2,
    noise_sigma: float = 0.0,
    seed: int = 0,
    lam: float | None = None,
) -> Field2D:
    """``lam * real + (1 - lam) * (interp + eps)``, clipped at zero.

    ``lam`` is drawn from Beta(alpha, alpha) unless given explicitly.
    """
    if real.shape != interp.shape:
        raise FieldError(f"shape mismatch {real.shape} vs {interp.shape}")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    lam_rng, eps_rng = _split_seed(seed)
    if lam is None:
        lam = sample_beta(alpha, lam_rng)
    eps = eps_rng.normal(0.0, noise_sigma, size=real.shape) if noise_sigma > 0 else 0.0
    out = lam * real.values + (1.0 - lam) * (interp.values + eps)
    return real.replace(np.maximum(out, 0.0))


def write_raster(field: Field2D, path) -> None:
    """Write ``field`` in the MGF2D format (values stored as float32)."""
    h, w = field.shape
    header = RASTER_MAGIC + struct.pack("<IIdB", h, w, field.pixel_size, int(field.units))
    header += b"\x00" * (HEADER_SIZE - len(header))
    payload = field.values.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def decode_raster(data: bytes) -> Field2D:
    if len(data) < HEADER_SIZE:
        if not RASTER_MAGIC.startswith(data[:8]):
            raise BadMagicError("not an MGF2D raster")
        raise TruncatedRasterError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    if data[:8] != RASTER_MAGIC:
        raise BadMagicError("not an MGF2D raster")
    h, w, pixel_size, units = struct.unpack_from("<IIdB", data, 8)
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise DimensionOverflowError(f"bad dimensions {h}x{w}")
    if units not in (0, 1):
        raise RasterError(f"unknown units tag {units}")
    expected = HEADER_SIZE + 4 * h * w
    if len(data) < expected:
        raise TruncatedRasterError(f"payload needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise RasterError(f"{len(data) - expected} trailing bytes")
    values = np.frombuffer(data, dtype="<f4", count=h * w, offset=HEADER_SIZE)
    try:
        return Field2D(values.reshape(h, w).astype(np.float64), pixel_size, Units(units))
    except FieldError as exc:
        raise RasterError(str(exc)) from exc


def read_raster(path) -> Field2D:
    return decode_raster(Path(path).read_bytes())


def synthetic_corpus(
    n: int,
    seed: int = 0,
    height: int = 32,
    width: int = 32,
    max_peaks: int = 5,
    pixel_size: float = 2.0,
) -> list[Field2D]:
    """``n`` multipeak fields with 1..max_peaks peaks; field ``i`` depends only on ``(seed, i)``."""
    if n < 0 or max_peaks < 1:
        raise ValueError("need n >= 0 and max_peaks >= 1")
    out = []
    for i in range(n):
        field_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        n_peaks = 1 + field_seed % max_peaks
        out.append(gen_multipeak_gaussian(field_seed, height, width, n_peaks, pixel_size=pixel_size))
    return out
