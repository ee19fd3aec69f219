"""Pinhole projection, z-buffer rasterization and vertex visibility.

Projection is ``(u, v, 1) ~ P @ (X, Y, Z, 1)`` with ``P = K @ [R | t]`` built from
an object's camera-frame pose, so ``P`` takes model-frame vertices straight to
pixels and the camera-frame depth is the third homogeneous component.

The rasterizer is vectorized over triangles: every triangle enumerates the pixel
centers of its bounding box, coverage is an edge-function test, and inverse
depth is evaluated from the triangle's screen-space plane (which makes depth
interpolation perspective-correct). Ownership of a pixel goes to the smallest
``(depth, instance_id, triangle index)``; none of these depend on the order of
the instance list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from objmatch.types import CameraIntrinsics, ObjectInstance, RigidPose, TriMesh, pixel_index

NEAR_PLANE = 0.01
VISIBILITY_EPS = 1e-3
_MAX_CANDIDATES = 1 << 21


def compose_extrinsic(pose: RigidPose) -> np.ndarray:
    """``[R | t]`` as a 3x4 matrix."""
    return np.hstack([pose.rotation, pose.translation[:, None]])


def projection_matrix(camera: CameraIntrinsics, extrinsic: np.ndarray) -> np.ndarray:
    return camera.K @ np.asarray(extrinsic, dtype=np.float64).reshape(3, 4)


def project_vertices(P: np.ndarray, vertices: np.ndarray, camera: CameraIntrinsics,
                     near: float = NEAR_PLANE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project model-frame ``vertices (N, 3)``; return ``uv (N, 2)``, depth ``(N,)``, in-bounds ``(N,)``."""
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    hom = verts @ P[:, :3].T + P[:, 3]
    depth = hom[:, 2]
    front = depth > near
    safe = np.where(front, depth, 1.0)
    uv = hom[:, :2] / safe[:, None]
    uv[~front] = np.nan
    with np.errstate(invalid="ignore"):
        inside = (
            front
            & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
        )
    return uv, depth, inside


def project_vertex(P: np.ndarray, pose: RigidPose, vertex, camera: CameraIntrinsics,
                   near: float = NEAR_PLANE):
    """Single-vertex projection: ``((u, v), depth, in_bounds)``.

    ``pose`` is the pose ``P`` was built from; the camera-frame point it yields
    supplies the depth while ``P`` supplies the pixel.
    """
    cam_point = pose.apply(np.asarray(vertex, dtype=np.float64))
    uv, _, inside = project_vertices(P, vertex, camera, near)
    return (float(uv[0, 0]), float(uv[0, 1])), float(cam_point[2]), bool(inside[0])


@dataclass(frozen=True, eq=False)
class DepthBuffer:
    """Nearest-surface depth (``inf`` where empty) and owning instance per pixel.

    ``triangle`` holds the owning triangle's index within its mesh and ``plane``
    its screen-space inverse-depth plane ``1/z = a*u + b*v + c``; both are absent
    for buffers built from a plain depth raster.
    """

    depth: np.ndarray
    ids: np.ndarray
    triangle: np.ndarray | None = None
    plane: np.ndarray | None = None

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthBuffer":
        return cls(
            np.full((height, width), np.inf),
            np.full((height, width), -1, np.int32),
            np.full((height, width), -1, np.int32),
            np.zeros((height, width, 3)),
        )

    @classmethod
    def from_depth(cls, depth: np.ndarray, ids: np.ndarray | None = None) -> "DepthBuffer":
        depth = np.asarray(depth, dtype=np.float64)
        if ids is None:
            ids = np.where(np.isfinite(depth), 0, -1).astype(np.int32)
        return cls(depth, np.asarray(ids, np.int32))

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def lookup(self, uv: np.ndarray):
        idx = pixel_index(uv)
        return idx[..., 1], idx[..., 0]

    def surface_depth_at(self, uv: np.ndarray) -> np.ndarray:
        """Depth of the surface owning the nearest pixel, evaluated at the exact ``uv``.

        On a triangle's own pixels this is the exact surface depth, so vertices
        on slanted surfaces are not penalized for their offset from the pixel
        center.
        """
        uv = np.asarray(uv, dtype=np.float64)
        rows, cols = self.lookup(uv)
        raw = self.depth[rows, cols]
        if self.plane is None:
            return raw
        coef = self.plane[rows, cols]
        inv = coef[..., 0] * uv[..., 0] + coef[..., 1] * uv[..., 1] + coef[..., 2]
        with np.errstate(divide="ignore"):
            exact = np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), raw)
        return np.where(np.isfinite(raw), exact, raw)

    def depth_raster(self) -> np.ndarray:
        """Depth with the ``0`` sentinel for empty pixels, as stored on disk."""
        return np.where(np.isfinite(self.depth), self.depth, 0.0).astype(np.float32)


def vertex_visible(depth, uv, buffer: DepthBuffer, eps: float = VISIBILITY_EPS):
    """True where a point at ``depth`` projecting to ``uv`` is not behind the buffer surface."""
    return np.asarray(depth) <= buffer.surface_depth_at(uv) + eps


def vertex_only_visible(uv: np.ndarray, depth: np.ndarray, in_bounds: np.ndarray,
                        width: int, height: int, eps: float = VISIBILITY_EPS) -> np.ndarray:
    """Vertex-vs-vertex occlusion: a vertex is visible iff it is within ``eps`` of
    the nearest vertex projecting to the same integer pixel."""
    visible = np.zeros(len(depth), dtype=bool)
    if not in_bounds.any():
        return visible
    idx = pixel_index(uv[in_bounds])
    flat = idx[:, 1] * width + idx[:, 0]
    nearest = np.full(width * height, np.inf)
    np.minimum.at(nearest, flat, depth[in_bounds])
    visible[in_bounds] = depth[in_bounds] <= nearest[flat] + eps
    return visible


# -- rasterization -------------------------------------------------------------------


def _clip_near(tri: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-frame triangle ``(3, 3)`` to ``z >= near``; return sub-triangles."""
    poly = []
    for k in range(3):
        p, q = tri[k], tri[(k + 1) % 3]
        p_in, q_in = p[2] >= near, q[2] >= near
        if p_in:
            poly.append(p)
        if p_in != q_in:
            s = (near - p[2]) / (q[2] - p[2])
            point = p + s * (q - p)
            point[2] = near
            poly.append(point)
    return [np.stack([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _gather(instances: Sequence[ObjectInstance], models: Mapping[str, TriMesh], near: float):
    tris, inst_ids, local = [], [], []
    for inst in instances:
        mesh = models[inst.model_id]
        cam = inst.pose.apply(mesh.vertices)[mesh.triangles]
        in_front = cam[:, :, 2] >= near
        whole = in_front.all(axis=1)
        tris.append(cam[whole])
        local.append(np.flatnonzero(whole))
        for t in np.flatnonzero(~whole & in_front.any(axis=1)):
            parts = _clip_near(cam[t], near)
            tris.append(np.stack(parts))
            local.append(np.full(len(parts), t))
        count = sum(len(a) for a in local) - sum(len(a) for a in inst_ids)
        inst_ids.append(np.full(count, inst.instance_id, np.int32))
    if not instances:
        return np.zeros((0, 3, 3)), np.zeros(0, np.int32), np.zeros(0, np.int64)
    return np.concatenate(tris), np.concatenate(inst_ids), np.concatenate(local).astype(np.int64)


def rasterize(instances: Sequence[ObjectInstance], models: Mapping[str, TriMesh],
              camera: CameraIntrinsics, near: float = NEAR_PLANE) -> DepthBuffer:
    """Render per-pixel nearest depth and owner for posed meshes, sampling pixel centers."""
    W, H = camera.width, camera.height
    out = DepthBuffer.empty(W, H)
    tri_cam, tri_inst, tri_local = _gather(instances, models, near)
    if len(tri_cam) == 0:
        return out

    z = tri_cam[:, :, 2]
    uv = np.empty(tri_cam.shape[:2] + (2,))
    uv[..., 0] = camera.fx * tri_cam[..., 0] / z + camera.cx
    uv[..., 1] = camera.fy * tri_cam[..., 1] / z + camera.cy
    area2 = ((uv[:, 1, 0] - uv[:, 0, 0]) * (uv[:, 2, 1] - uv[:, 0, 1])
             - (uv[:, 1, 1] - uv[:, 0, 1]) * (uv[:, 2, 0] - uv[:, 0, 0]))

    j0 = np.ceil(uv[..., 0].min(1) - 0.5).clip(0, None)
    j1 = np.floor(uv[..., 0].max(1) - 0.5).clip(None, W - 1)
    i0 = np.ceil(uv[..., 1].min(1) - 0.5).clip(0, None)
    i1 = np.floor(uv[..., 1].max(1) - 0.5).clip(None, H - 1)
    live = (np.abs(area2) > 1e-12) & (j1 >= j0) & (i1 >= i0)
    if not live.any():
        return out
    keep = np.flatnonzero(live)
    uv, z, area2 = uv[keep], z[keep], area2[keep]
    tri_inst, tri_local = tri_inst[keep], tri_local[keep]
    j0, i0 = j0[keep].astype(np.int64), i0[keep].astype(np.int64)
    widths = j1[keep].astype(np.int64) - j0 + 1
    heights = i1[keep].astype(np.int64) - i0 + 1

    system = np.concatenate([uv, np.ones(uv.shape[:2] + (1,))], axis=2)
    planes = np.linalg.solve(system, (1.0 / z)[..., None])[..., 0]

    counts = widths * heights
    pix_list, depth_list, order_keys = [], [], []
    start = 0
    while start < len(keep):
        stop = start + max(1, int(np.searchsorted(np.cumsum(counts[start:]), _MAX_CANDIDATES)))
        sl = slice(start, min(stop, len(keep)))
        cand = _candidates(sl, counts, widths, j0, i0, uv, area2, planes)
        if cand is not None:
            t, rows, cols, depth = cand
            pix_list.append(rows * W + cols)
            depth_list.append(depth)
            order_keys.append(t)
        start = sl.stop
    if not pix_list:
        return out
    pix = np.concatenate(pix_list)
    depth = np.concatenate(depth_list)
    t = np.concatenate(order_keys)

    order = np.lexsort((tri_local[t], tri_inst[t], depth, pix))
    pix_s = pix[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    flat_pix = pix[win]
    out.depth.reshape(-1)[flat_pix] = depth[win]
    out.ids.reshape(-1)[flat_pix] = tri_inst[t[win]]
    out.triangle.reshape(-1)[flat_pix] = tri_local[t[win]]
    out.plane.reshape(-1, 3)[flat_pix] = planes[t[win]]
    return out


def _candidates(sl, counts, widths, j0, i0, uv, area2, planes):
    n = counts[sl]
    total = int(n.sum())
    if total == 0:
        return None
    t = np.repeat(np.arange(sl.start, sl.stop), n)
    offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    cols = j0[t] + offsets % widths[t]
    rows = i0[t] + offsets // widths[t]
    pu, pv = cols + 0.5, rows + 0.5
    tri = uv[t]
    sign = np.sign(area2[t])

    def edge(a, b):
        return (tri[:, b, 0] - tri[:, a, 0]) * (pv - tri[:, a, 1]) - (tri[:, b, 1] - tri[:, a, 1]) * (pu - tri[:, a, 0])

    inside = (edge(1, 2) * sign >= 0) & (edge(2, 0) * sign >= 0) & (edge(0, 1) * sign >= 0)
    coef = planes[t]
    inv = coef[:, 0] * pu + coef[:, 1] * pv + coef[:, 2]
    inside &= inv > 0
    if not inside.any():
        return None
    return t[inside], rows[inside], cols[inside], 1.0 / inv[inside]
