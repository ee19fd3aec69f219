"""Independent re-validation of pair files.

Pair files store only pixels, so each match is traced back to a model vertex:
every vertex of every instance is projected with the scalar pinhole formulas
``u = fx * X / Z + cx`` and ``v = fy * Y / Z + cy`` (no projection matrix), and
the stored pixel must coincide with some vertex of a shared model in A and the
same vertex index of an instance of that model in B. The depth check intersects
the camera ray with the 3D plane of the triangle owning the pixel, which is a
different computation from the rasterizer's screen-space plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from objmatch.correspond import Dataset, ImageRecord
from objmatch.geometry import VISIBILITY_EPS
from objmatch.pairfile import iter_pair_file
from objmatch.types import MatchSet, NonMatchCategory

PIXEL_TOL = 1e-4


def scalar_project(rotation, translation, vertices, fx, fy, cx, cy):
    """Camera-frame point and pixel for each model-frame vertex, written out componentwise."""
    r = np.asarray(rotation, np.float64).reshape(3, 3)
    t = np.asarray(translation, np.float64)
    x, y, z = (np.asarray(vertices, np.float64).reshape(-1, 3)[:, k] for k in range(3))
    cx_ = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    cy_ = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    cz_ = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cx_ / cz_ + cx
        v = fy * cy_ / cz_ + cy
    return np.stack([cx_, cy_, cz_], axis=1), np.stack([u, v], axis=1)


@dataclass
class _ImageIndex:
    keys: list  # (instance_id, model_id, vertex index) per projected point
    cam: np.ndarray
    uv: np.ndarray
    tree: cKDTree


def _index(rec: ImageRecord) -> _ImageIndex:
    cam = rec.camera
    keys, pts, uvs = [], [], []
    for inst in rec.annotation.instances:
        mesh = rec.scene.meshes[inst.model_id]
        p, uv = scalar_project(inst.pose.rotation, inst.pose.translation, mesh.vertices,
                               cam.fx, cam.fy, cam.cx, cam.cy)
        ok = p[:, 2] > 0
        keys += [(inst.instance_id, inst.model_id, int(v)) for v in np.flatnonzero(ok)]
        pts.append(p[ok])
        uvs.append(uv[ok])
    uv = np.concatenate(uvs)
    return _ImageIndex(keys, np.concatenate(pts), uv, cKDTree(uv))


def ray_plane_depth(rec: ImageRecord, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Surface depth at ``uv`` via the owning triangle's camera-frame plane, and the owner id."""
    buf = rec.buffer
    cam = rec.camera
    cols = np.floor(uv[:, 0]).astype(np.int64)
    rows = np.floor(uv[:, 1]).astype(np.int64)
    owner = buf.ids[rows, cols]
    tri = buf.triangle[rows, cols]
    depth = np.full(len(uv), np.inf)
    ray = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], axis=1)
    for inst in rec.annotation.instances:
        sel = np.flatnonzero(owner == inst.instance_id)
        if len(sel) == 0:
            continue
        mesh = rec.scene.meshes[inst.model_id]
        corners, _ = scalar_project(inst.pose.rotation, inst.pose.translation,
                                    mesh.vertices[mesh.triangles[tri[sel]]].reshape(-1, 3),
                                    cam.fx, cam.fy, cam.cx, cam.cy)
        corners = corners.reshape(-1, 3, 3)
        normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        depth[sel] = np.sum(normal * corners[:, 0], axis=1) / np.sum(normal * ray[sel], axis=1)
    return depth, owner


@dataclass
class RecordCheck:
    index: int
    matches: int = 0
    exact_f32: int = 0
    failures: list = field(default_factory=list)


def check_record(index: int, rec_a: ImageRecord, rec_b: ImageRecord, ms: MatchSet,
                 eps: float = VISIBILITY_EPS, tol: float = PIXEL_TOL, cache: dict | None = None) -> RecordCheck:
    cache = cache if cache is not None else {}
    out = RecordCheck(index, ms.n_matches)
    idx = []
    for rec in (rec_a, rec_b):
        key = (rec.scene.scene_id, rec.annotation.image_id)
        if key not in cache:
            cache[key] = _index(rec)
        idx.append(cache[key])
    ia, ib = idx
    hits_a = ia.tree.query_ball_point(ms.match_a, tol)
    hits_b = ib.tree.query_ball_point(ms.match_b, tol)
    depth_a, owner_a = ray_plane_depth(rec_a, ms.match_a)
    depth_b, owner_b = ray_plane_depth(rec_b, ms.match_b)
    for k in range(ms.n_matches):
        cand_a = {(ia.keys[h][1], ia.keys[h][2]): h for h in hits_a[k]}
        cand_b = {(ib.keys[h][1], ib.keys[h][2]): h for h in hits_b[k]}
        ok = False
        for mv in sorted(set(cand_a) & set(cand_b)):
            ha, hb = cand_a[mv], cand_b[mv]
            vis_a = ia.keys[ha][0] == owner_a[k] and abs(ia.cam[ha, 2] - depth_a[k]) <= eps
            vis_b = ib.keys[hb][0] == owner_b[k] and abs(ib.cam[hb, 2] - depth_b[k]) <= eps
            if vis_a and vis_b:
                ok = True
                exact = (np.all(ia.uv[ha].astype(np.float32) == ms.match_a[k].astype(np.float32))
                         and np.all(ib.uv[hb].astype(np.float32) == ms.match_b[k].astype(np.float32)))
                out.exact_f32 += int(exact)
                break
        if not ok:
            out.failures.append(("match", k))
    _check_non_matches(rec_a, rec_b, ms, out)
    return out


def _check_non_matches(rec_a: ImageRecord, rec_b: ImageRecord, ms: MatchSet, out: RecordCheck) -> None:
    w, h = rec_a.camera.width, rec_a.camera.height
    for coords, rec in ((ms.non_match_a, rec_a), (ms.non_match_b, rec_b)):
        bad = (coords[:, 0] < 0) | (coords[:, 0] >= w) | (coords[:, 1] < 0) | (coords[:, 1] >= h)
        if bad.any():
            out.failures.append(("non_match_bounds", int(np.flatnonzero(bad)[0])))
            return
    on_a = rec_a.mask[np.floor(ms.non_match_a[:, 1]).astype(int), np.floor(ms.non_match_a[:, 0]).astype(int)] >= 0
    on_b = rec_b.mask[np.floor(ms.non_match_b[:, 1]).astype(int), np.floor(ms.non_match_b[:, 0]).astype(int)] >= 0
    expect_a = ms.non_match_category != NonMatchCategory.BG_BG
    expect_b = ms.non_match_category == NonMatchCategory.OBJ_OBJ
    wrong = np.flatnonzero((on_a != expect_a) | (on_b != expect_b))
    for k in wrong[:10]:
        out.failures.append(("non_match_category", int(k)))


@dataclass
class VerifyReport:
    records: int
    matches: int
    exact_f32: int
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_pair_file(path: str | Path, dataset: Dataset, eps: float = VISIBILITY_EPS,
                     tol: float = PIXEL_TOL) -> VerifyReport:
    cache: dict = {}
    records = matches = exact = 0
    failures = []
    for k, (spec, ms) in enumerate(iter_pair_file(path)):
        rec_a, rec_b = dataset.records(spec)
        check = check_record(k, rec_a, rec_b, ms, eps, tol, cache)
        records += 1
        matches += check.matches
        exact += check.exact_f32
        failures += [(k,) + f for f in check.failures]
    return VerifyReport(records, matches, exact, failures)
