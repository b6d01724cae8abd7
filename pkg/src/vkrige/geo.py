"""
Spatial data model, delta-neighbourhood queries and order statistics.

Neighbourhoods are the half-open axis-aligned rectangles
``(s - delta, s + delta]`` (component-wise), so a point lying exactly on the
lower edge is excluded and one on the upper edge is included. A data site
is always a member of its own neighbourhood.

Coordinates are treated as planar.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import DataError, DomainError, ParameterError, UndefinedDispersionError


@dataclass(frozen=True)
class SpatialPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite coordinates ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Observation:
    """A measured value at a location, with optional elevation and score."""

    id: Hashable
    loc: SpatialPoint
    value: float
    elevation: float | None = None
    vs: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DataError(f"observation {self.id!r}: non-finite value")
        if self.elevation is not None and not math.isfinite(self.elevation):
            raise DataError(f"observation {self.id!r}: non-finite elevation")
        if self.vs is not None and not (0.0 < self.vs <= 1.0):
            raise DataError(f"observation {self.id!r}: vs={self.vs} outside (0, 1]")


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, p: SpatialPoint) -> bool:
        return self.xmin <= p.x <= self.xmax and self.ymin <= p.y <= self.ymax


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of observations with unique ids.

    Array views (``xy``, ``values``, ``elevation``) are built once at
    construction; ``elevation`` holds NaN where an observation has none.
    """

    observations: tuple[Observation, ...]
    xy: np.ndarray = field(init=False, repr=False, compare=False)
    values: np.ndarray = field(init=False, repr=False, compare=False)
    elevation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        seen = set()
        dupes = []
        for o in obs:
            if o.id in seen:
                dupes.append(o.id)
            seen.add(o.id)
        if dupes:
            raise DataError(f"duplicate observation ids: {dupes[:10]}")
        xy = np.array([[o.loc.x, o.loc.y] for o in obs], dtype=float).reshape(-1, 2)
        vals = np.array([o.value for o in obs], dtype=float)
        elev = np.array(
            [np.nan if o.elevation is None else o.elevation for o in obs], dtype=float
        )
        for name, arr in (("xy", xy), ("values", vals), ("elevation", elev)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, xy, values, elevation=None, ids: Sequence | None = None) -> "Dataset":
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        values = np.asarray(values, dtype=float).ravel()
        n = len(values)
        if xy.shape[0] != n:
            raise DataError(f"{xy.shape[0]} locations but {n} values")
        if ids is None:
            ids = range(n)
        ids = list(ids)
        if len(ids) != n:
            raise DataError(f"{len(ids)} ids but {n} values")
        if elevation is None:
            elev = [None] * n
        else:
            e = np.asarray(elevation, dtype=float).ravel()
            if len(e) != n:
                raise DataError(f"{len(e)} elevations but {n} values")
            elev = [None if np.isnan(v) else float(v) for v in e]
        obs = tuple(
            Observation(ids[i], SpatialPoint(float(xy[i, 0]), float(xy[i, 1])), float(values[i]), elev[i])
            for i in range(n)
        )
        return cls(obs)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def ids(self) -> list:
        return [o.id for o in self.observations]

    @property
    def bbox(self) -> BBox | None:
        if len(self) == 0:
            return None
        lo = self.xy.min(axis=0)
        hi = self.xy.max(axis=0)
        return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def subset(self, index: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.observations[i] for i in index))


class NeighborhoodIndex:
    """Uniform grid of cell size ``delta`` bucketing site indices.

    Every index appears in exactly one bucket. Queries scan the cells that
    can intersect the rectangle and then apply the exact membership test,
    so results agree with a brute-force scan.
    """

    def __init__(self, xy: np.ndarray, delta: float):
        if not delta > 0:
            raise ParameterError(f"delta must be positive, got {delta}")
        self.delta = float(delta)
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        cells = np.floor(self.xy / self.delta).astype(np.int64)
        buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, (cx, cy) in enumerate(cells):
            buckets[(int(cx), int(cy))].append(i)
        self.buckets = {k: np.array(v, dtype=np.intp) for k, v in buckets.items()}

    def __len__(self) -> int:
        return self.xy.shape[0]

    def query(self, s) -> np.ndarray:
        """Sorted indices of sites in ``(s - delta, s + delta]``."""
        sx, sy = (float(s.x), float(s.y)) if isinstance(s, SpatialPoint) else map(float, s)
        d = self.delta
        if not self.buckets:
            return np.empty(0, dtype=np.intp)
        cx0, cx1 = math.floor((sx - d) / d), math.floor((sx + d) / d)
        cy0, cy1 = math.floor((sy - d) / d), math.floor((sy + d) / d)
        found = []
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                members = self.buckets.get((cx, cy))
                if members is not None:
                    found.append(members)
        if not found:
            return np.empty(0, dtype=np.intp)
        cand = np.concatenate(found)
        p = self.xy[cand]
        inside = (
            (p[:, 0] > sx - d) & (p[:, 0] <= sx + d) & (p[:, 1] > sy - d) & (p[:, 1] <= sy + d)
        )
        return np.sort(cand[inside])

    def all_neighborhoods(self) -> list[np.ndarray]:
        """Neighbourhood of every indexed site, in index order."""
        return [self.query(p) for p in self.xy]


def build_index(data: Dataset | np.ndarray, delta: float) -> NeighborhoodIndex:
    xy = data.xy if isinstance(data, Dataset) else data
    return NeighborhoodIndex(xy, delta)


def neighbors(index: NeighborhoodIndex, s, delta: float) -> np.ndarray:
    if delta != index.delta:
        raise ParameterError(f"query delta {delta} differs from index delta {index.delta}")
    return index.query(s)


def quantile(values, p: float) -> float:
    """Order-statistic quantile with linear interpolation.

    With sorted ``v[1..n]`` and ``h = (n - 1) p + 1`` the result is
    ``v[floor(h)] + (h - floor(h)) (v[floor(h) + 1] - v[floor(h)])``.
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n == 0:
        raise DomainError("quantile of an empty list")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability {p} outside [0, 1]")
    h = (n - 1) * p
    lo = int(math.floor(h))
    frac = h - lo
    if lo >= n - 1:
        return float(v[-1])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


def median(values) -> float:
    return quantile(values, 0.5)


def iqr(values) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 3:
        raise UndefinedDispersionError(f"IQR needs at least 3 values, got {v.size}")
    return quantile(v, 0.75) - quantile(v, 0.25)


def pairwise_distances(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 2)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
