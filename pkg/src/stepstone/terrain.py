"""Terrain tiles as convex polygons at fixed heights.

Provides the half-space form used by the foothold constraints, uniform
inward shrinking, and the exact circle-polygon intersection area that
weights the terrain sampler. Tiles are horizontal; a scenario models
sloped ground by decomposing it into flat pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


class DegeneratePolygonError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


@dataclass
class TerrainTile:
    """Convex CCW polygon in the x-y plane at height z."""

    id: int
    vertices: np.ndarray  # (n, 2)
    z: float

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.z = float(self.z)
        v = self.vertices
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise DegeneratePolygonError("tile needs >= 3 planar vertices")
        if polygon_area(v) <= _EPS:
            raise DegeneratePolygonError("tile polygon must be CCW with positive area")
        e = np.roll(v, -1, axis=0) - v
        f = np.roll(e, -1, axis=0)
        crosses = e[:, 0] * f[:, 1] - e[:, 1] * f[:, 0]
        if np.any(crosses < -1e-9):
            raise DegeneratePolygonError("tile polygon must be convex")

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def contains(self, point, tol: float = 1e-9) -> bool:
        A, b = to_halfspaces(self)
        return bool(np.all(A @ np.asarray(point, float) <= b + tol))


@dataclass
class FootholdAssignment:
    """Shrunk tile polytope bound to (end effector, contact phase)."""

    ee: int
    phase: int
    tile_id: int
    A: np.ndarray  # (m, 2), rows unit norm
    b: np.ndarray  # (m,)
    z: float
    constrained: bool = True  # False when no candidate tile existed

    def violation(self, point_xy) -> float:
        if not self.constrained:
            return 0.0
        return float(np.maximum(self.A @ np.asarray(point_xy, float) - self.b, 0.0).max())


def polygon_area(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def to_halfspaces(tile: TerrainTile):
    """One unit-norm row per edge; interior points satisfy all rows strictly."""
    v = tile.vertices
    e = np.roll(v, -1, axis=0) - v
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)  # outward for CCW
    norms = np.linalg.norm(n, axis=1)
    if np.any(norms < _EPS):
        raise DegeneratePolygonError("zero-length polygon edge")
    A = n / norms[:, None]
    b = np.einsum("ij,ij->i", A, v)
    return A, b


def shrink(tile: TerrainTile, margin: float):
    """Uniform inward offset: each b_i reduced by margin (rows are unit norm).

    Raises EmptyRegionError when the margin swallows the tile.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    A, b = to_halfspaces(tile)
    b = b - margin
    if shrunk_vertices(tile, margin) is None:
        raise EmptyRegionError(
            f"tile {tile.id}: margin {margin} leaves an empty region")
    return A, b


def shrunk_vertices(tile: TerrainTile, margin: float):
    """Vertices of the shrunk polygon, or None if it is empty."""
    A, b = to_halfspaces(tile)
    poly = tile.vertices
    for i in range(A.shape[0]):
        poly = _clip_halfplane(poly, A[i], b[i] - margin)
        if poly.shape[0] < 3 or polygon_area(poly) <= _EPS:
            return None
    return poly


def _clip_halfplane(poly, a, b):
    """Sutherland-Hodgman clip of a polygon against a . x <= b."""
    out = []
    n = poly.shape[0]
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = a @ p - b, a @ q - b
        if dp <= _EPS:
            out.append(p)
            if dq > _EPS:
                t = dp / (dp - dq)
                out.append(p + t * (q - p))
        elif dq <= _EPS:
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def point_polygon_distance(point, vertices) -> float:
    """Euclidean distance from a point to a convex polygon (0 inside)."""
    p = np.asarray(point, float)
    v = np.asarray(vertices, float)
    e = np.roll(v, -1, axis=0) - v
    inside = True
    best = np.inf
    for i in range(v.shape[0]):
        d = p - v[i]
        cross = e[i, 0] * d[1] - e[i, 1] * d[0]
        if cross < 0:
            inside = False
        L2 = e[i] @ e[i]
        t = np.clip((d @ e[i]) / L2, 0.0, 1.0) if L2 > _EPS else 0.0
        best = min(best, float(np.linalg.norm(d - t * e[i])))
    return 0.0 if inside else best


def circle_intersection_area(tile: TerrainTile, center, radius: float) -> float:
    """Exact area of tile polygon intersected with a disk.

    Sums per-edge contributions: triangle areas where the edge runs inside
    the disk and circular sectors where it runs outside, split at the
    circle crossings.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    v = tile.vertices - np.asarray(center, float)
    total = 0.0
    n = v.shape[0]
    for i in range(n):
        total += _edge_disk_contribution(v[i], v[(i + 1) % n], radius)
    if total < 1e-12 * radius * radius:  # disjoint: sector terms cancel
        return 0.0
    return total


def _edge_disk_contribution(a, b, r):
    d = b - a
    dd = d @ d
    if dd < _EPS:
        return 0.0
    # segment-circle crossings: |a + t d|^2 = r^2
    ts = [0.0, 1.0]
    disc = (a @ d) ** 2 - dd * (a @ a - r * r)
    if disc > 0:
        root = np.sqrt(disc)
        for t in ((-(a @ d) - root) / dd, (-(a @ d) + root) / dd):
            if 1e-12 < t < 1 - 1e-12:
                ts.append(float(t))
    ts.sort()
    area = 0.0
    for t0, t1 in zip(ts[:-1], ts[1:]):
        p = a + t0 * d
        q = a + t1 * d
        mid = a + 0.5 * (t0 + t1) * d
        cross = p[0] * q[1] - p[1] * q[0]
        if mid @ mid <= r * r:
            area += 0.5 * cross  # triangle (O, p, q)
        else:
            area += 0.5 * r * r * np.arctan2(cross, p @ q)  # sector
    return area


class Terrain:
    """Immutable tile collection for one scenario."""

    def __init__(self, tiles):
        self.tiles = list(tiles)
        ids = [t.id for t in self.tiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tile ids")
        self._by_id = {t.id: t for t in self.tiles}

    def __len__(self):
        return len(self.tiles)

    def tile(self, tile_id) -> TerrainTile:
        return self._by_id[tile_id]

    def tile_at(self, point_xy, tol: float = 1e-9):
        """Highest tile containing the x-y point, or None."""
        hits = [t for t in self.tiles if t.contains(point_xy, tol)]
        if not hits:
            return None
        return max(hits, key=lambda t: t.z)

    def support_at(self, point_xy, z_foot, capture: float = 0.06):
        """Tile that can push back on a foot at (xy, z): highest tile under
        the foot whose top is within `capture` above-penetration range."""
        best = None
        for t in self.tiles:
            if t.contains(point_xy, 1e-9) and z_foot - t.z > -capture:
                if best is None or t.z > best.z:
                    best = t
        return best

    @classmethod
    def from_dict(cls, d) -> "Terrain":
        tiles = [TerrainTile(t["id"], np.asarray(t["vertices"], float), t["z"])
                 for t in d["tiles"]]
        return cls(tiles)

    def to_dict(self) -> dict:
        return {"tiles": [{"id": t.id, "vertices": t.vertices.tolist(), "z": t.z}
                          for t in self.tiles]}
