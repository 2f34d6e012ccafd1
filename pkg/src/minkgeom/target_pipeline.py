"""Offline generation of exact gamma-vector targets.

Thresholds come from quantiles of wet pixels in a training corpus; each field
is then summarised by area, marching-squares perimeter and the
persistence-filtered component count at every threshold, and the rows are
written to a chunked binary store.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import exact_geometry as eg
from .grid_core import Field2D, RasterError, read_raster
from .persistence import (
    DEFAULT_EPSILON,
    DEFAULT_INFINITE_CUTOFF,
    count_components_at,
    superlevel_persistence_0d,
)

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)
DEFAULT_SAMPLE_CAP = 50_000_000
CHUNK_ROWS = 4096
STORE_FORMAT = "MGSTORE1"
COMPONENT_ORDER = ("A", "P", "CC")
ISO_TOL = 1e-9


class StoreError(RuntimeError):
    """Missing, malformed or corrupted target store."""


@dataclass(frozen=True)
class ThresholdSpec:
    quantile_levels: tuple[float, ...]
    physical_thresholds: tuple[float, ...]
    sample_cap: int = DEFAULT_SAMPLE_CAP
    drizzle_threshold: float = 0.1

    def __post_init__(self):
        q = tuple(float(x) for x in self.quantile_levels)
        t = tuple(float(x) for x in self.physical_thresholds)
        if len(q) != len(t):
            raise ValueError("quantile_levels and physical_thresholds differ in length")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly ascending: {t}")
        object.__setattr__(self, "quantile_levels", q)
        object.__setattr__(self, "physical_thresholds", t)

    @property
    def n_levels(self) -> int:
        return len(self.physical_thresholds)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSpec":
        return cls(
            tuple(d["quantile_levels"]),
            tuple(d["physical_thresholds"]),
            int(d.get("sample_cap", DEFAULT_SAMPLE_CAP)),
            float(d.get("drizzle_threshold", 0.1)),
        )

    @classmethod
    def fixed(cls, thresholds, drizzle_threshold: float = 0.1) -> "ThresholdSpec":
        """Explicit thresholds without a calibration (levels set to NaN)."""
        return cls(tuple(math.nan for _ in thresholds), tuple(thresholds), 0, drizzle_threshold)


@dataclass(frozen=True)
class GammaVector:
    """``[A1, P1, CC1, ..., AN, PN, CCN]`` with optional hole counts per level."""

    entries: np.ndarray
    holes: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 1 or e.size % 3:
            raise ValueError("gamma entries must be a flat vector of length 3N")
        object.__setattr__(self, "entries", e)
        if self.holes is not None:
            object.__setattr__(self, "holes", np.asarray(self.holes, dtype=np.int64))

    @property
    def n_levels(self) -> int:
        return self.entries.size // 3

    @property
    def areas(self) -> np.ndarray:
        return self.entries[0::3]

    @property
    def perimeters(self) -> np.ndarray:
        return self.entries[1::3]

    @property
    def counts(self) -> np.ndarray:
        return self.entries[2::3]

    def row(self) -> np.ndarray:
        if self.holes is None:
            return self.entries
        return np.concatenate([self.entries, self.holes.astype(np.float64)])

    def check(self) -> None:
        if np.any(self.entries < 0):
            raise ValueError("negative gamma entry")
        if np.any(np.diff(self.areas) > 0):
            raise ValueError("area is not non-increasing across levels")


class _Reservoir:
    """Algorithm R over a stream of arrays, vectorised per batch."""

    def __init__(self, cap: int, rng: np.random.Generator):
        self.cap = int(cap)
        self.rng = rng
        self.buf = np.empty(0)
        self.seen = 0

    def extend(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        room = self.cap - self.buf.size
        if room > 0:
            head, values = values[:room], values[room:]
            self.buf = np.concatenate([self.buf, head])
            self.seen += head.size
        if values.size == 0:
            return
        # item t (0-based stream index) replaces slot j ~ U{0..t} when j < cap
        t = self.seen + np.arange(values.size)
        j = self.rng.integers(0, t + 1)
        hit = j < self.cap
        slots, vals = j[hit], values[hit]
        # later items win on a repeated slot, as in the sequential algorithm
        _, last = np.unique(slots[::-1], return_index=True)
        keep = slots.size - 1 - last
        self.buf[slots[keep]] = vals[keep]
        self.seen += values.size


def calibrate_thresholds(
    corpus,
    levels=DEFAULT_LEVELS,
    cap: int = DEFAULT_SAMPLE_CAP,
    seed: int = 0,
    drizzle_threshold: float = 0.1,
) -> ThresholdSpec:
    """Map quantile levels to physical thresholds over wet pixels of ``corpus``.

    Wet pixels exceed ``drizzle_threshold``; at most ``cap`` of them are kept
    by reservoir sampling. Quantiles interpolate linearly between order
    statistics.
    """
    levels = tuple(float(q) for q in levels)
    if not levels or any(not 0 < q < 1 for q in levels):
        raise ValueError("quantile levels must lie in (0, 1)")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("quantile levels must be ascending")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    res = _Reservoir(cap, np.random.default_rng(seed))
    n_fields = 0
    for f in corpus:
        v = f.values if isinstance(f, Field2D) else np.asarray(f)
        res.extend(v[v > drizzle_threshold])
        n_fields += 1
    if n_fields == 0:
        raise ValueError("empty corpus")
    if res.buf.size == 0:
        raise ValueError("corpus has no wet pixels")
    thresholds = np.quantile(res.buf, levels, method="linear")
    return ThresholdSpec(levels, tuple(thresholds.tolist()), int(cap), drizzle_threshold)


def gamma_exact(
    field: Field2D,
    spec: ThresholdSpec,
    epsilon: float = DEFAULT_EPSILON,
    infinite_cutoff: float = DEFAULT_INFINITE_CUTOFF,
    with_holes: bool = False,
) -> GammaVector:
    thresholds = np.asarray(spec.physical_thresholds)
    diagram = superlevel_persistence_0d(field)
    cc = count_components_at(diagram, thresholds, epsilon, infinite_cutoff)
    out = np.empty(3 * thresholds.size)
    holes = np.zeros(thresholds.size, dtype=np.int64) if with_holes else None
    for i, u in enumerate(thresholds):
        s = eg.excursion(field, u)
        out[3 * i] = eg.area(s)
        out[3 * i + 1] = eg.mask_perimeter(s.mask, field.pixel_size)
        out[3 * i + 2] = cc[i]
        if with_holes:
            holes[i] = eg.hole_count(s)
    return GammaVector(out, holes)


def iso_violations(gammas: np.ndarray, tol: float = ISO_TOL) -> np.ndarray:
    """Boolean ``(n, N)`` array of levels where ``P**2 < 4*pi*A``."""
    g = np.atleast_2d(gammas)
    a, p = g[:, 0::3], g[:, 1::3]
    return p * p < 4.0 * np.pi * a * (1.0 - tol)


def _target_row(args):
    path, spec, epsilon, cutoff, with_holes = args
    try:
        f = read_raster(path)
    except (OSError, RasterError) as exc:
        return None, f"{Path(path).name}: {exc}"
    return gamma_exact(f, spec, epsilon, cutoff, with_holes).row(), None


def list_corpus(corpus_dir) -> list[Path]:
    d = Path(corpus_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {d}")
    return sorted(d.glob("*.mgf"))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_targets(
    corpus_dir,
    out_store,
    spec: ThresholdSpec,
    workers: int = 1,
    epsilon: float = DEFAULT_EPSILON,
    infinite_cutoff: float = DEFAULT_INFINITE_CUTOFF,
    with_holes: bool = False,
) -> dict:
    """Compute gamma rows for every raster in ``corpus_dir`` and write the store.

    Output is independent of ``workers``: rows are gathered in sorted file
    order and the manifest holds no run-specific data.
    """
    paths = list_corpus(corpus_dir)
    out = Path(out_store)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("gamma_*.bin"):
        stale.unlink()

    jobs = [(str(p), spec, epsilon, infinite_cutoff, with_holes) for p in paths]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_target_row, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_target_row(j) for j in jobs]

    names, rows, skipped = [], [], []
    for p, (row, err) in zip(paths, results):
        if row is None:
            log.warning("skipping unreadable raster %s", err)
            skipped.append(p.name)
        else:
            names.append(p.name)
            rows.append(row)
    if skipped:
        log.warning("skipped %d unreadable rasters", len(skipped))

    n_levels = spec.n_levels
    row_len = 3 * n_levels + (n_levels if with_holes else 0)
    table = np.asarray(rows, dtype="<f8").reshape(len(rows), row_len)

    chunks = []
    for k, start in enumerate(range(0, max(len(rows), 1), CHUNK_ROWS)):
        block = table[start:start + CHUNK_ROWS]
        if block.shape[0] == 0:
            break
        data = block.tobytes()
        fname = f"gamma_{k}.bin"
        (out / fname).write_bytes(data)
        chunks.append({"file": fname, "rows": int(block.shape[0]), "sha256": _sha256(data)})

    summary = summarize(table[:, : 3 * n_levels], len(skipped))
    manifest = {
        "format": STORE_FORMAT,
        "n_fields": len(rows),
        "n_levels": n_levels,
        "component_order": list(COMPONENT_ORDER),
        "with_holes": bool(with_holes),
        "row_length": row_len,
        "chunk_rows": CHUNK_ROWS,
        "chunks": chunks,
        "fields": names,
        "skipped": skipped,
        "corpus": str(Path(corpus_dir).resolve()),
        "spec": {
            **spec.to_dict(),
            "epsilon": epsilon,
            "infinite_cutoff": infinite_cutoff if math.isfinite(infinite_cutoff) else "inf",
        },
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def summarize(gammas: np.ndarray, n_skipped: int = 0) -> dict:
    g = np.atleast_2d(gammas)
    if g.shape[0] == 0:
        return {"count": 0, "skipped": n_skipped, "mean": [], "max": [], "iso_violation_rate": 0.0}
    return {
        "count": int(g.shape[0]),
        "skipped": int(n_skipped),
        "mean": g.mean(axis=0).tolist(),
        "max": g.max(axis=0).tolist(),
        "iso_violation_rate": float(iso_violations(g).mean()),
    }


@dataclass
class TargetStore:
    root: Path
    manifest: dict
    rows: np.ndarray
    names: list[str] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return int(self.manifest["n_levels"])

    @property
    def gammas(self) -> np.ndarray:
        return self.rows[:, : 3 * self.n_levels]

    @property
    def holes(self) -> np.ndarray | None:
        if not self.manifest["with_holes"]:
            return None
        return self.rows[:, 3 * self.n_levels:].astype(np.int64)

    @property
    def spec(self) -> ThresholdSpec:
        return ThresholdSpec.from_dict(self.manifest["spec"])

    def fields(self, corpus_dir=None) -> list[Field2D]:
        base = Path(corpus_dir or self.manifest["corpus"])
        return [read_raster(base / n) for n in self.names]


def load_store(path) -> TargetStore:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise StoreError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"malformed manifest: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT:
        raise StoreError(f"unknown store format {manifest.get('format')!r}")
    row_len = int(manifest["row_length"])
    blocks = []
    for ch in manifest["chunks"]:
        fp = root / ch["file"]
        if not fp.is_file():
            raise StoreError(f"missing chunk {ch['file']}")
        data = fp.read_bytes()
        if _sha256(data) != ch["sha256"]:
            raise StoreError(f"checksum mismatch in {ch['file']} (partial write?)")
        blocks.append(np.frombuffer(data, dtype="<f8").reshape(ch["rows"], row_len))
    rows = np.concatenate(blocks) if blocks else np.zeros((0, row_len))
    if rows.shape[0] != manifest["n_fields"]:
        raise StoreError("row count does not match manifest")
    return TargetStore(root, manifest, rows.astype(np.float64), list(manifest["fields"]))
