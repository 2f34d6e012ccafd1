"""0-dimensional persistence of the superlevel filtration on a pixel grid.

Pixels enter the filtration in descending order of value (ties broken by
row-major index) and are merged with their already-present 4-neighbours using
union-find. At a merge the component with the higher birth survives (elder
rule); the other one dies at the value of the pixel that joined them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid_core import Field2D

DEFAULT_EPSILON = 0.05  # mm/h
DEFAULT_INFINITE_CUTOFF = 0.01  # mm/h


@dataclass(frozen=True)
class PersistenceDiagram:
    """Finite ``(birth, death)`` pairs plus the essential class.

    The essential (infinite) pair is born at the global maximum; its death is
    stored as the global minimum so arithmetic stays finite, and
    ``has_infinite`` marks it for the special counting rule.
    """

    births: np.ndarray
    deaths: np.ndarray
    global_max: float
    global_min: float
    has_infinite: bool = True

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.births.tolist(), self.deaths.tolist()))

    @property
    def lifetimes(self) -> np.ndarray:
        return self.births - self.deaths

    def __len__(self):
        return len(self.births) + int(self.has_infinite)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def superlevel_persistence_0d(field) -> PersistenceDiagram:
    values = field.values if isinstance(field, Field2D) else np.asarray(field, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("expected a non-empty 2-D field")
    h, w = values.shape
    flat = values.ravel()
    # stable sort on the negated values: descending, ties in row-major order
    order = np.argsort(-flat, kind="stable")
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)

    parent = list(range(flat.size))
    present = bytearray(flat.size)
    flat_l = flat.tolist()
    rank_l = rank.tolist()
    births, deaths = [], []

    for idx in order.tolist():
        present[idx] = 1
        v = flat_l[idx]
        i, j = divmod(idx, w)
        roots = set()
        if i > 0 and present[idx - w]:
            roots.add(_find(parent, idx - w))
        if i < h - 1 and present[idx + w]:
            roots.add(_find(parent, idx + w))
        if j > 0 and present[idx - 1]:
            roots.add(_find(parent, idx - 1))
        if j < w - 1 and present[idx + 1]:
            roots.add(_find(parent, idx + 1))
        if not roots:
            continue  # a new component is born at v; idx is its own root
        # the root of each component is its first pixel, so the smallest rank
        # is the oldest component (highest birth, ties row-major)
        elder = min(roots, key=rank_l.__getitem__)
        for r in roots:
            if r != elder:
                births.append(flat_l[r])
                deaths.append(v)
                parent[r] = elder
        parent[idx] = elder

    return PersistenceDiagram(
        np.asarray(births, dtype=np.float64),
        np.asarray(deaths, dtype=np.float64),
        float(flat.max()),
        float(flat.min()),
        True,
    )


def count_components_at(
    diagram: PersistenceDiagram,
    u,
    epsilon: float = 0.0,
    infinite_cutoff: float = math.inf,
):
    """Persistence-filtered component count at threshold(s) ``u``.

    A finite pair counts when ``death <= u < birth`` and its lifetime is at
    least ``epsilon``. The essential pair counts only when
    ``u <= infinite_cutoff`` and ``u`` is below the global maximum. With
    ``epsilon=0`` and an infinite cutoff this is the number of connected
    components of the excursion set above ``u``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    scalar = np.ndim(u) == 0
    uu = np.atleast_1d(np.asarray(u, dtype=np.float64))
    keep = diagram.lifetimes >= epsilon
    b = diagram.births[keep]
    d = diagram.deaths[keep]
    alive = (d[None, :] <= uu[:, None]) & (uu[:, None] < b[None, :])
    counts = alive.sum(axis=1)
    if diagram.has_infinite:
        counts = counts + ((uu <= infinite_cutoff) & (uu < diagram.global_max))
    counts = counts.astype(np.int64)
    return int(counts[0]) if scalar else counts


@dataclass(frozen=True)
class LifetimeHistogram:
    counts: np.ndarray
    edges: np.ndarray
    knee: float


def _knee(sorted_vals: np.ndarray) -> float:
    """Kneedle-style elbow of the empirical CDF.

    The CDF is rescaled to the unit square and the knee is the sample with the
    largest distance above the chord joining its end points.
    """
    n = sorted_vals.size
    if n < 3 or sorted_vals[-1] == sorted_vals[0]:
        return float(sorted_vals[n // 2])
    x = (sorted_vals - sorted_vals[0]) / (sorted_vals[-1] - sorted_vals[0])
    y = np.arange(1, n + 1) / n
    y = (y - y[0]) / (y[-1] - y[0])
    k = int(np.argmax(y - x))
    # the knee separates the lower cluster from the tail: place it midway to
    # the next distinct lifetime
    nxt = sorted_vals[k + 1:][sorted_vals[k + 1:] > sorted_vals[k]]
    return float(sorted_vals[k] if nxt.size == 0 else 0.5 * (sorted_vals[k] + nxt[0]))


def lifetime_histogram(diagrams, n_bins: int = 50) -> LifetimeHistogram:
    """Histogram of finite lifetimes pooled over ``diagrams``, with a suggested epsilon."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    diagrams = list(diagrams)
    if not diagrams:
        raise ValueError("no diagrams given")
    life = np.concatenate([d.lifetimes for d in diagrams])
    life = life[life > 0]
    if life.size == 0:
        raise ValueError("no finite pairs with positive lifetime")
    counts, edges = np.histogram(life, bins=n_bins)
    return LifetimeHistogram(counts, edges, _knee(np.sort(life)))
