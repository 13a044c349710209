"""Voronoi tessellation of station layouts, cell areas and areal-average weights.

All coordinates are planar, in km. The tessellation assigns every station a
cell; cells that are unbounded in the full-plane diagram get a finite
surrogate area (the mean area of their bounded neighbours, resolved
transitively) while their polygon, used for region intersections, is the
cell clipped to an expanded bounding box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Voronoi, distance
from shapely.geometry import Polygon

EPS_GEOM = 1e-9  # km, vertex-coincidence tolerance
BBOX_EXPAND_FRACTION = 0.25  # per-side expansion of the clipping box


class GeometryError(ValueError):
    """Invalid site layout or region."""


@dataclass(frozen=True)
class Site:
    """A measurement station: unique id plus planar (x, y) position in km."""

    id: str
    coord: tuple[float, float]

    def __post_init__(self):
        x, y = self.coord
        if not (np.isfinite(x) and np.isfinite(y)):
            raise GeometryError(f"site {self.id!r} has non-finite coordinates {self.coord}")


class StationSet:
    """An ordered collection of sites with unique ids.

    Attributes
    ----------
    ids : list of str
    coords : (N, 2) ndarray, km
    """

    def __init__(self, sites: list[Site]):
        ids = [s.id for s in sites]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise GeometryError(f"duplicate station ids: {dup}")
        self.sites = list(sites)
        self.ids = ids
        self.coords = np.array([s.coord for s in sites], dtype=float).reshape(len(sites), 2)

    def __len__(self):
        return len(self.sites)

    def index_of(self, station_id: str) -> int:
        try:
            return self.ids.index(station_id)
        except ValueError:
            raise GeometryError(f"unknown station id {station_id!r}") from None


@dataclass
class Tessellation:
    """Voronoi cells of a StationSet with finite per-cell areas.

    ``polygons[i]`` is the polygon used for region intersections (the exact
    cell for bounded cells, the box-clipped cell otherwise). ``area[i]`` is
    the scalar area feeding the propagator quadrature: exact polygon area
    for bounded cells, bounded-neighbour average for unbounded ones (box
    clipping for every cell if no bounded cell exists to average from).
    """

    stations: StationSet
    polygons: list[Polygon]
    area: np.ndarray
    is_unbounded: np.ndarray
    neighbors: list[list[int]]
    clipped_fallback: bool = False
    clip_box: tuple[float, float, float, float] = field(default=(0.0, 0.0, 0.0, 0.0))


@dataclass(frozen=True)
class Region:
    """A simple polygon (km) over which areal averages are taken."""

    boundary: np.ndarray  # (M, 2) vertices in order, not closed

    def __post_init__(self):
        b = np.asarray(self.boundary, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 3:
            raise GeometryError("region boundary must be an (M>=3, 2) vertex array")
        object.__setattr__(self, "boundary", b)
        poly = Polygon(b)
        if not poly.is_valid:
            raise GeometryError("region boundary is self-intersecting or degenerate")
        if poly.area <= 0:
            raise GeometryError("region has non-positive area")

    def polygon(self) -> Polygon:
        return Polygon(self.boundary)


def distance_matrix(stations: StationSet) -> np.ndarray:
    """Symmetric N x N matrix of pairwise Euclidean distances in km."""
    c = stations.coords
    d = distance.cdist(c, c)
    np.fill_diagonal(d, 0.0)
    return d


def _expanded_bbox(coords: np.ndarray) -> tuple[float, float, float, float]:
    xmin, ymin = coords.min(axis=0)
    xmax, ymax = coords.max(axis=0)
    # degenerate extents (collinear layouts are rejected earlier, but a very
    # flat layout still needs a usable box)
    wx = max(xmax - xmin, EPS_GEOM)
    wy = max(ymax - ymin, EPS_GEOM)
    pad = BBOX_EXPAND_FRACTION
    return (xmin - pad * wx, ymin - pad * wy, xmax + pad * wx, ymax + pad * wy)


def _clipped_cells(coords: np.ndarray, box: tuple[float, float, float, float]) -> list[Polygon]:
    """Voronoi cells clipped to ``box``, via mirrored ghost sites.

    Reflecting every site across each box edge makes the four edges exact
    cell boundaries of the augmented diagram, so each original cell comes
    out bounded and equal to (original cell) ∩ box.
    """
    xmin, ymin, xmax, ymax = box
    n = coords.shape[0]
    mirrors = []
    for axis, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        for bound in (lo, hi):
            m = coords.copy()
            m[:, axis] = 2.0 * bound - m[:, axis]
            mirrors.append(m)
    aug = np.vstack([coords] + mirrors)
    vor = Voronoi(aug)
    cells = []
    for i in range(n):
        verts = vor.regions[vor.point_region[i]]
        if -1 in verts or len(verts) < 3:  # cannot happen with mirrors, guard anyway
            raise GeometryError("internal error: mirrored Voronoi cell still unbounded")
        poly = Polygon(vor.vertices[verts])
        if not poly.is_valid:
            poly = poly.buffer(0.0)
        cells.append(poly)
    return cells


def _validate_sites(coords: np.ndarray, ids: list[str]) -> None:
    n = coords.shape[0]
    if n < 3:
        raise GeometryError(f"need at least 3 sites to tessellate, got {n}")
    d = distance.cdist(coords, coords)
    iu = np.triu_indices(n, k=1)
    close = np.nonzero(d[iu] < EPS_GEOM)[0]
    if close.size:
        i, j = iu[0][close[0]], iu[1][close[0]]
        raise GeometryError(
            f"duplicate coordinates: stations {ids[i]!r} and {ids[j]!r} coincide at "
            f"{tuple(coords[i])}"
        )
    # collinearity: all cross products of edge vectors vanish
    v = coords - coords[0]
    cross = v[:, 0, None] * v[None, :, 1] - v[:, 1, None] * v[None, :, 0]
    if np.max(np.abs(cross)) < EPS_GEOM:
        raise GeometryError(f"all {n} sites are collinear: {ids}")


def build_tessellation(stations: StationSet) -> Tessellation:
    """Voronoi tessellation with finite surrogate areas for unbounded cells.

    Unbounded cells take the arithmetic mean of the areas of their bounded
    neighbours; cells whose neighbours are all unbounded inherit from
    already-resolved neighbours on later passes. If nothing can be resolved
    that way (no bounded cell at all), every cell area falls back to the
    cell clipped to the expanded bounding box.
    """
    coords = stations.coords
    _validate_sites(coords, stations.ids)
    n = len(stations)

    vor = Voronoi(coords)

    # adjacency from ridges, dropping degenerate zero-length ridges
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for (p, q), rv in zip(vor.ridge_points, vor.ridge_vertices):
        if -1 not in rv and len(rv) == 2:
            a, b = vor.vertices[rv[0]], vor.vertices[rv[1]]
            if np.hypot(*(a - b)) < EPS_GEOM:
                continue
        neighbors[p].add(int(q))
        neighbors[q].add(int(p))

    is_unbounded = np.zeros(n, dtype=bool)
    exact_area = np.full(n, np.nan)
    exact_poly: list[Polygon | None] = [None] * n
    for i in range(n):
        verts = vor.regions[vor.point_region[i]]
        if -1 in verts or len(verts) < 3:
            is_unbounded[i] = True
            continue
        poly = Polygon(vor.vertices[verts])
        exact_poly[i] = poly
        exact_area[i] = poly.area

    box = _expanded_bbox(coords)
    clipped = _clipped_cells(coords, box)

    area = exact_area.copy()
    fallback = False
    if is_unbounded.any():
        if not is_unbounded.all():
            # transitive averaging over bounded (or already resolved) neighbours
            resolved = ~is_unbounded
            pending = list(np.nonzero(is_unbounded)[0])
            while pending:
                progressed = False
                still = []
                for i in pending:
                    vals = [area[j] for j in neighbors[i] if resolved[j]]
                    if vals:
                        area[i] = float(np.mean(vals))
                        resolved[i] = True
                        progressed = True
                    else:
                        still.append(i)
                pending = still
                if not progressed:
                    break
            if pending:
                fallback = True
        else:
            fallback = True

    if fallback:
        area = np.array([c.area for c in clipped])

    polygons = [
        clipped[i] if (fallback or is_unbounded[i]) else exact_poly[i]  # type: ignore[misc]
        for i in range(n)
    ]

    if not np.all(np.isfinite(area)) or np.any(area <= 0):
        raise GeometryError("tessellation produced non-positive or non-finite cell areas")

    return Tessellation(
        stations=stations,
        polygons=polygons,
        area=area,
        is_unbounded=is_unbounded,
        neighbors=[sorted(s) for s in neighbors],
        clipped_fallback=fallback,
        clip_box=box,
    )


def areal_weights(tess: Tessellation, region: Region) -> np.ndarray:
    """Per-station weights |cell_j ∩ region| / |region|.

    Intersections use the stored cell polygons (clipped ones for cells whose
    scalar area was replaced). Weights are nonnegative and sum to at most 1;
    a region with no overlap at all yields all zeros and a warning.
    """
    rpoly = region.polygon()
    rarea = rpoly.area
    w = np.zeros(len(tess.stations))
    for j, cell in enumerate(tess.polygons):
        inter = cell.intersection(rpoly)
        if not inter.is_empty:
            w[j] = inter.area / rarea
    if np.all(w == 0.0):
        warnings.warn("region does not overlap any tessellation cell; all weights zero")
    return w


def load_stations_csv(path) -> StationSet:
    """Read a stations file with header ``id,x,y`` (km)."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y"]:
            raise GeometryError(f"stations file {path}: expected header 'id,x,y', got {header}")
        sites = []
        for ln, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise GeometryError(f"stations file {path}, line {ln}: expected 3 fields")
            try:
                sites.append(Site(row[0].strip(), (float(row[1]), float(row[2]))))
            except ValueError as exc:
                raise GeometryError(f"stations file {path}, line {ln}: {exc}") from None
    return StationSet(sites)


def load_region_csv(path) -> Region:
    """Read a region polygon file: CSV of vertices ``x,y`` in order."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise GeometryError(f"region file {path}: expected header 'x,y', got {header}")
        verts = []
        for ln, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                verts.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise GeometryError(f"region file {path}, line {ln}: {exc}") from None
    return Region(np.array(verts))
