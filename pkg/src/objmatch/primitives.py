"""Closed triangulated primitives centered at the model-frame origin.

Boxes and wedges start from their minimal triangulation and are refined by
midpoint subdivision (``tessellation - 1`` rounds), so a tessellation-1 box has
exactly 8 vertices and 12 triangles. Curved primitives are parametric with the
segment count scaled by ``tessellation``. Triangles are wound counter-clockwise
seen from outside.
"""

from __future__ import annotations

import numpy as np

from objmatch.types import TriMesh

KINDS = ("box", "sphere", "cylinder", "cone", "wedge")
# rotationally symmetric shapes have pose-defined but visually ambiguous correspondences
SYMMETRIC_KINDS = frozenset({"sphere", "cylinder", "cone"})


def _positive(kind: str, **dims: float) -> None:
    for name, value in dims.items():
        if not value > 0:
            raise ValueError(f"{kind}: {name} must be positive, got {value}")


def _subdivide(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = [tuple(v) for v in vertices]
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in midpoint:
            midpoint[key] = len(verts)
            verts.append(tuple((np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0))
        return midpoint[key]

    out = []
    for a, b, c in triangles.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.array(verts), np.array(out)


def _orient_outward(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    # valid for convex shapes; the vertex mean is strictly interior
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    normal = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", normal, (a + b + c) / 3.0 - vertices.mean(axis=0)) < 0
    tris = triangles.copy()
    tris[inward] = tris[inward][:, [0, 2, 1]]
    return tris


def _box(sx: float, sy: float, sz: float):
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    corners *= np.array([sx, sy, sz]) / 2.0
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return corners, np.array(tris)


def _wedge(sx: float, sy: float, sz: float):
    # right-triangle profile in x-z extruded along y
    profile = np.array([[-sx / 2, -sz / 2], [sx / 2, -sz / 2], [-sx / 2, sz / 2]])
    verts = np.array([[x, y, z] for y in (-sy / 2, sy / 2) for x, z in profile])
    tris = [(0, 1, 2), (3, 5, 4), (0, 3, 4), (0, 4, 1), (1, 4, 5), (1, 5, 2), (2, 5, 3), (2, 3, 0)]
    return verts, np.array(tris)


def _ring_grid(rings: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stitch consecutive closed rings (each ``(S, 3)`` or a single apex point)."""
    verts, tris, starts = [], [], []
    for ring in rings:
        starts.append(sum(len(r) for r in verts))
        verts.append(ring)
    for k in range(len(rings) - 1):
        a0, b0 = starts[k], starts[k + 1]
        na, nb = len(rings[k]), len(rings[k + 1])
        if na == 1:
            tris += [(a0, b0 + s, b0 + (s + 1) % nb) for s in range(nb)]
        elif nb == 1:
            tris += [(a0 + s, b0, a0 + (s + 1) % na) for s in range(na)]
        else:
            for s in range(na):
                s1 = (s + 1) % na
                tris += [(a0 + s, b0 + s, b0 + s1), (a0 + s, b0 + s1, a0 + s1)]
    return np.concatenate(verts), np.array(tris)


def _circle(radius: float, z: float, segments: int) -> np.ndarray:
    theta = 2 * np.pi * np.arange(segments) / segments
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), np.full(segments, z)], axis=1)


def _apex(z: float) -> np.ndarray:
    return np.array([[0.0, 0.0, z]])


def _sphere(radius: float, tessellation: int):
    stacks = max(3, 3 * tessellation)
    segments = 2 * stacks
    rings = [_apex(-radius)]
    for k in range(1, stacks):
        phi = np.pi * k / stacks - np.pi / 2
        rings.append(_circle(radius * np.cos(phi), radius * np.sin(phi), segments))
    rings.append(_apex(radius))
    return _ring_grid(rings)


def _cylinder(radius: float, height: float, tessellation: int):
    segments = max(6, 6 * tessellation)
    levels = max(1, tessellation)
    cap_rings = max(1, tessellation // 2)
    rings = [_apex(-height / 2)]
    rings += [_circle(radius * k / cap_rings, -height / 2, segments) for k in range(1, cap_rings + 1)]
    rings += [_circle(radius, -height / 2 + height * k / levels, segments) for k in range(1, levels + 1)]
    rings += [_circle(radius * k / cap_rings, height / 2, segments) for k in range(cap_rings - 1, 0, -1)]
    rings.append(_apex(height / 2))
    return _ring_grid(rings)


def _cone(radius: float, height: float, tessellation: int):
    segments = max(6, 6 * tessellation)
    levels = max(1, tessellation)
    cap_rings = max(1, tessellation // 2)
    rings = [_apex(-height / 2)]
    rings += [_circle(radius * k / cap_rings, -height / 2, segments) for k in range(1, cap_rings + 1)]
    rings += [_circle(radius * (1 - k / levels), -height / 2 + height * k / levels, segments)
              for k in range(1, levels)]
    rings.append(_apex(height / 2))
    return _ring_grid(rings)


def make_primitive(kind: str, params: dict, tessellation: int = 1, model_id: str | None = None,
                   base_color=(0.7, 0.7, 0.7)) -> TriMesh:
    """Build a primitive mesh.

    ``params``: box/wedge take ``size=(sx, sy, sz)``; sphere ``radius``;
    cylinder and cone ``radius`` and ``height``. Raises ``ValueError`` on a
    non-positive dimension or unknown kind.
    """
    if tessellation < 1:
        raise ValueError("tessellation must be >= 1")
    if kind in ("box", "wedge"):
        sx, sy, sz = params["size"]
        _positive(kind, sx=sx, sy=sy, sz=sz)
        verts, tris = _box(sx, sy, sz) if kind == "box" else _wedge(sx, sy, sz)
        for _ in range(tessellation - 1):
            verts, tris = _subdivide(verts, tris)
        if kind == "wedge":
            verts = verts - (verts.max(0) + verts.min(0)) / 2.0
    elif kind == "sphere":
        _positive(kind, radius=params["radius"])
        verts, tris = _sphere(params["radius"], tessellation)
    elif kind == "cylinder":
        _positive(kind, radius=params["radius"], height=params["height"])
        verts, tris = _cylinder(params["radius"], params["height"], tessellation)
    elif kind == "cone":
        _positive(kind, radius=params["radius"], height=params["height"])
        verts, tris = _cone(params["radius"], params["height"], tessellation)
    else:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {KINDS}")
    tris = _orient_outward(verts, tris)
    return TriMesh(model_id or kind, verts, tris, base_color)


def footprint_radius(mesh: TriMesh) -> float:
    return float(np.linalg.norm(mesh.vertices[:, :2], axis=1).max())


def half_height(mesh: TriMesh) -> float:
    return float(-mesh.vertices[:, 2].min())
