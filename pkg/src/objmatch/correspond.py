"""Object-to-object correspondences between arbitrary image pairs.

Two pixels match when they are projections of the same model vertex through the
poses of two instances of that model, one in each image, and the vertex is
visible in both. Because identity comes from the model and not from a static
reconstruction, pairs may span scenes and domains, and one instance in A may
match several instances of the same model in B.

Visibility is computed against a clean z-buffer re-rendered from the
annotation, never against (possibly noisy) sensor depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from objmatch.geometry import (
    VISIBILITY_EPS,
    DepthBuffer,
    compose_extrinsic,
    project_vertices,
    projection_matrix,
    rasterize,
    vertex_only_visible,
    vertex_visible,
)
from objmatch.rng import derive_seed, seeded_rng
from objmatch.sceneio import SCENE_FILE, ImageAnnotation, Scene, read_scene
from objmatch.types import DomainTag, MatchSet, NonMatchCategory, RgbdImage, pixel_center

log = logging.getLogger(__name__)


class PairingType(IntEnum):
    SIM_SIM = 0
    REAL_REAL = 1
    SIM_REAL = 2

    @property
    def label(self) -> str:
        return ("Sim-Sim", "Real-Real", "Sim-Real")[self]

    @property
    def domains(self) -> tuple[DomainTag, DomainTag]:
        return (
            (DomainTag.SIM, DomainTag.SIM),
            (DomainTag.PSEUDO_REAL, DomainTag.PSEUDO_REAL),
            (DomainTag.SIM, DomainTag.PSEUDO_REAL),
        )[self]


ALL_PAIRINGS = (PairingType.SIM_SIM, PairingType.REAL_REAL, PairingType.SIM_REAL)


class InsufficientScenesError(ValueError):
    pass


class NoSharedModelError(ValueError):
    pass


@dataclass(frozen=True)
class PairSpec:
    pairing_type: PairingType
    scene_a: str
    image_a: str
    scene_b: str
    image_b: str
    same_scene: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairing_type", PairingType(self.pairing_type))
        if self.same_scene != (self.scene_a == self.scene_b):
            raise ValueError("same_scene flag disagrees with scene ids")
        if self.pairing_type == PairingType.SIM_REAL and self.same_scene:
            raise ValueError("Sim-Real pairs are always cross-scene")


@dataclass(frozen=True)
class SamplingConfig:
    n_matches: int = 1000
    n_non_matches: int = 5000
    category_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    occlusion: str = "zbuffer"
    seed: int = 0
    exclusion_radius: float = 5.0
    budget_factor: int = 50
    eps: float = VISIBILITY_EPS
    same_scene_prob: float = 0.3

    def __post_init__(self) -> None:
        if self.n_matches < 1 or self.n_non_matches < 1:
            raise ValueError("match counts must be positive")
        if abs(sum(self.category_mix) - 1.0) > 1e-9 or min(self.category_mix) < 0:
            raise ValueError("category mix must be non-negative and sum to 1")
        if self.occlusion not in ("zbuffer", "vertex_only"):
            raise ValueError("occlusion must be 'zbuffer' or 'vertex_only'")


# -- dataset access -----------------------------------------------------------------


@dataclass
class InstanceProjection:
    uv: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


@dataclass(eq=False)
class ImageRecord:
    """One image with everything correspondence generation needs, computed once."""

    scene: Scene
    annotation: ImageAnnotation
    image: RgbdImage
    _buffer: DepthBuffer | None = None
    _projections: dict = field(default_factory=dict)

    @property
    def camera(self):
        return self.scene.annotation.camera

    @property
    def buffer(self) -> DepthBuffer:
        if self._buffer is None:
            self._buffer = rasterize(self.annotation.instances, self.scene.meshes, self.camera)
        return self._buffer

    @property
    def mask(self) -> np.ndarray:
        return self.buffer.ids

    def instances_of(self, model_id: str) -> list[int]:
        return sorted(i.instance_id for i in self.annotation.instances if i.model_id == model_id)

    @property
    def model_ids(self) -> set[str]:
        return {i.model_id for i in self.annotation.instances}

    def model_raster(self, model_index: dict[str, int]) -> np.ndarray:
        lut = {i.instance_id: model_index.get(i.model_id, -1) for i in self.annotation.instances}
        out = np.full(self.mask.shape, -1, np.int32)
        for inst_id, m in lut.items():
            out[self.mask == inst_id] = m
        return out

    def projections(self, mode: str = "zbuffer", eps: float = VISIBILITY_EPS) -> dict[int, InstanceProjection]:
        key = (mode, eps)
        if key in self._projections:
            return self._projections[key]
        cam = self.camera
        raw = {}
        for inst in self.annotation.instances:
            P = projection_matrix(cam, compose_extrinsic(inst.pose))
            raw[inst.instance_id] = project_vertices(P, self.scene.meshes[inst.model_id].vertices, cam)
        out = {}
        if mode == "zbuffer":
            buf = self.buffer
            for inst_id, (uv, depth, inside) in raw.items():
                vis = inside.copy()
                if inside.any():
                    rows, cols = buf.lookup(uv[inside])
                    own = buf.ids[rows, cols] == inst_id
                    vis[inside] = own & vertex_visible(depth[inside], uv[inside], buf, eps)
                out[inst_id] = InstanceProjection(uv, depth, vis)
        else:
            ids = list(raw)
            uv = np.concatenate([raw[i][0] for i in ids])
            depth = np.concatenate([raw[i][1] for i in ids])
            inside = np.concatenate([raw[i][2] for i in ids])
            vis = vertex_only_visible(uv, depth, inside, cam.width, cam.height, eps)
            on_object = np.zeros_like(vis)
            if inside.any():
                rows, cols = self.buffer.lookup(uv[inside])
                on_object[inside] = self.buffer.ids[rows, cols] >= 0
            vis &= on_object
            start = 0
            for i in ids:
                n = len(raw[i][1])
                out[i] = InstanceProjection(raw[i][0], raw[i][1], vis[start:start + n])
                start += n
        self._projections[key] = out
        return out


class Dataset:
    """Scenes grouped by domain, with cached per-image records."""

    def __init__(self, scenes: Iterable[Scene]):
        self.scenes: dict[str, Scene] = {}
        for scene in scenes:
            if scene.scene_id in self.scenes:
                raise ValueError(f"duplicate scene id {scene.scene_id}")
            self.scenes[scene.scene_id] = scene
        self.by_domain: dict[DomainTag, list[str]] = {d: [] for d in DomainTag}
        for scene_id in sorted(self.scenes):
            self.by_domain[self.scenes[scene_id].domain_tag].append(scene_id)
        self._records: dict[tuple[str, str], ImageRecord] = {}

    @classmethod
    def from_directory(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        dirs = sorted(p.parent for p in root.glob(f"*/{SCENE_FILE}"))
        if (root / SCENE_FILE).is_file():
            dirs.insert(0, root)
        return cls(read_scene(d) for d in dirs)

    def image_ids(self, scene_id: str) -> list[str]:
        return [img.image_id for img in self.scenes[scene_id].annotation.images]

    def record(self, scene_id: str, image_id: str) -> ImageRecord:
        key = (scene_id, image_id)
        if key not in self._records:
            scene = self.scenes[scene_id]
            self._records[key] = ImageRecord(scene, scene.annotation.image(image_id), scene.load_image(image_id))
        return self._records[key]

    def records(self, spec: PairSpec) -> tuple[ImageRecord, ImageRecord]:
        return self.record(spec.scene_a, spec.image_a), self.record(spec.scene_b, spec.image_b)

    def check_pair(self, spec: PairSpec) -> None:
        da, db = spec.pairing_type.domains
        if self.scenes[spec.scene_a].domain_tag != da or self.scenes[spec.scene_b].domain_tag != db:
            raise ValueError(f"domains of {spec} disagree with {spec.pairing_type.label}")


# -- pair scheduling ----------------------------------------------------------------


def sample_pair_spec(dataset: Dataset, rng: np.random.Generator,
                     pairing_types: Sequence[PairingType] = ALL_PAIRINGS,
                     same_scene_prob: float = 0.3) -> PairSpec:
    """Draw a pairing type uniformly, then same/different scene, then images uniformly."""
    ptype = PairingType(pairing_types[int(rng.integers(len(pairing_types)))])
    dom_a, dom_b = ptype.domains
    pool_a, pool_b = dataset.by_domain[dom_a], dataset.by_domain[dom_b]
    if ptype == PairingType.SIM_REAL:
        if not pool_a or not pool_b:
            raise InsufficientScenesError("Sim-Real pairing needs scenes in both domains")
        same = False
        scene_a = pool_a[int(rng.integers(len(pool_a)))]
        scene_b = pool_b[int(rng.integers(len(pool_b)))]
    else:
        if len(pool_a) < 2:
            raise InsufficientScenesError(f"{ptype.label} pairing needs >= 2 {dom_a.value} scenes")
        same = bool(rng.random() < same_scene_prob)
        k = int(rng.integers(len(pool_a)))
        scene_a = pool_a[k]
        if same:
            scene_b = scene_a
        else:
            scene_b = pool_a[(k + 1 + int(rng.integers(len(pool_a) - 1))) % len(pool_a)]
    ids_a, ids_b = dataset.image_ids(scene_a), dataset.image_ids(scene_b)
    ia = int(rng.integers(len(ids_a)))
    if same and len(ids_a) > 1:
        ib = (ia + 1 + int(rng.integers(len(ids_a) - 1))) % len(ids_a)
    else:
        ib = int(rng.integers(len(ids_b)))
    return PairSpec(ptype, scene_a, ids_a[ia], scene_b, ids_b[ib], same)


# -- matches ----------------------------------------------------------------------


def _shared_models(rec_a: ImageRecord, rec_b: ImageRecord) -> list[str]:
    shared = sorted(rec_a.model_ids & rec_b.model_ids)
    if not shared:
        raise NoSharedModelError(f"{rec_a.image.scene_id}/{rec_a.image.image_id} and "
                                 f"{rec_b.image.scene_id}/{rec_b.image.image_id} share no model")
    return shared


def generate_matches(rec_a: ImageRecord, rec_b: ImageRecord, config: SamplingConfig,
                     rng: np.random.Generator) -> tuple[MatchSet, int]:
    """Sample up to ``n_matches`` vertex correspondences; return ``(matches, shortfall)``.

    Each attempt picks a shared model uniformly, an instance pair uniformly from
    the cross product of that model's instances in A and B, then a vertex
    uniformly. The attempt budget is ``budget_factor * n_matches``.
    """
    shared = _shared_models(rec_a, rec_b)
    proj_a = rec_a.projections(config.occlusion, config.eps)
    proj_b = rec_b.projections(config.occlusion, config.eps)
    inst_a = [rec_a.instances_of(m) for m in shared]
    inst_b = [rec_b.instances_of(m) for m in shared]
    n_verts = [len(rec_a.scene.meshes[m].vertices) for m in shared]

    want, budget = config.n_matches, config.budget_factor * config.n_matches
    chunk = max(256, 2 * want)
    out_a, out_b, out_m, out_v, out_i = [], [], [], [], []
    found = attempts = 0
    while found < want and attempts < budget:
        k = min(chunk, budget - attempts)
        attempts += k
        model = rng.integers(len(shared), size=k)
        ra, rb, rv = rng.random(k), rng.random(k), rng.random(k)
        ok = np.zeros(k, bool)
        uva = np.zeros((k, 2))
        uvb = np.zeros((k, 2))
        verts = np.zeros(k, np.int64)
        insts = np.zeros((k, 2), np.int64)
        for mi in range(len(shared)):
            sel = np.flatnonzero(model == mi)
            if not len(sel):
                continue
            ia = np.asarray(inst_a[mi])[(ra[sel] * len(inst_a[mi])).astype(np.int64)]
            ib = np.asarray(inst_b[mi])[(rb[sel] * len(inst_b[mi])).astype(np.int64)]
            v = (rv[sel] * n_verts[mi]).astype(np.int64)
            for inst_id in np.unique(ia):
                rows = sel[ia == inst_id]
                p = proj_a[int(inst_id)]
                vv = v[ia == inst_id]
                uva[rows] = np.nan_to_num(p.uv[vv])
                ok[rows] = p.visible[vv]
            for inst_id in np.unique(ib):
                rows = sel[ib == inst_id]
                p = proj_b[int(inst_id)]
                vv = v[ib == inst_id]
                uvb[rows] = np.nan_to_num(p.uv[vv])
                ok[rows] &= p.visible[vv]
            verts[sel] = v
            insts[sel, 0], insts[sel, 1] = ia, ib
        keep = np.flatnonzero(ok)[: want - found]
        found += len(keep)
        out_a.append(uva[keep])
        out_b.append(uvb[keep])
        out_m.append(model[keep])
        out_v.append(verts[keep])
        out_i.append(insts[keep])
    shortfall = want - found
    if shortfall:
        log.warning("only %d of %d matches found within %d attempts", found, want, budget)
    models = np.concatenate(out_m) if out_m else np.zeros(0, np.int64)
    return MatchSet(
        match_a=np.concatenate(out_a) if out_a else np.zeros((0, 2)),
        match_b=np.concatenate(out_b) if out_b else np.zeros((0, 2)),
        match_models=[shared[int(m)] for m in models],
        match_vertices=np.concatenate(out_v) if out_v else np.zeros(0, np.int64),
        match_instances=np.concatenate(out_i) if out_i else np.zeros((0, 2), np.int64),
    ), shortfall


def true_locations(rec_a: ImageRecord, rec_b: ImageRecord, pixels_a: np.ndarray,
                   eps: float = VISIBILITY_EPS) -> np.ndarray:
    """Where the surface seen at integer pixels ``(col, row)`` of A appears in B.

    Returns ``(N, K, 2)`` pixel coordinates, one slot per instance of the same
    model in B (``K`` = largest such count), NaN where the point is not visible.
    """
    pixels_a = np.asarray(pixels_a, np.int64).reshape(-1, 2)
    cam_a, cam_b = rec_a.camera, rec_b.camera
    buf_a, buf_b = rec_a.buffer, rec_b.buffer
    owner = buf_a.ids[pixels_a[:, 1], pixels_a[:, 0]]
    slots = max([len(rec_b.instances_of(m)) for m in rec_a.model_ids] + [1])
    out = np.full((len(pixels_a), slots, 2), np.nan)
    centers = pixel_center(pixels_a)
    depth = buf_a.depth[pixels_a[:, 1], pixels_a[:, 0]]
    rays = np.stack([(centers[:, 0] - cam_a.cx) / cam_a.fx, (centers[:, 1] - cam_a.cy) / cam_a.fy,
                     np.ones(len(centers))], axis=1)
    for inst in rec_a.annotation.instances:
        sel = np.flatnonzero(owner == inst.instance_id)
        targets = rec_b.instances_of(inst.model_id)
        if not len(sel) or not targets:
            continue
        model_pts = inst.pose.inverse().apply(rays[sel] * depth[sel, None])
        for slot, tgt in enumerate(targets):
            pose_b = rec_b.annotation.instance(tgt).pose
            P = projection_matrix(cam_b, compose_extrinsic(pose_b))
            uv, z, inside = project_vertices(P, model_pts, cam_b)
            vis = inside.copy()
            if inside.any():
                rows, cols = buf_b.lookup(uv[inside])
                vis[inside] = (buf_b.ids[rows, cols] == tgt) & vertex_visible(z[inside], uv[inside], buf_b, eps)
            out[sel[vis], slot] = uv[vis]
    return out


def split_counts(total: int, mix: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier category."""
    raw = np.asarray(mix, float) * total
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    order = sorted(range(len(mix)), key=lambda k: (-remainder[k], k))
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def generate_non_matches(rec_a: ImageRecord, rec_b: ImageRecord, config: SamplingConfig,
                         rng: np.random.Generator) -> MatchSet:
    """Sample object/object, object/background and background/background non-matches.

    Object/object candidates within ``exclusion_radius`` pixels of a true
    correspondence of A's pixel are rejected. Categories that cannot be
    satisfied (for example no background in B) hand their quota to the others.
    """
    mask_a, mask_b = rec_a.mask, rec_b.mask
    obj_a, bg_a = np.argwhere(mask_a >= 0)[:, ::-1], np.argwhere(mask_a < 0)[:, ::-1]
    obj_b, bg_b = np.argwhere(mask_b >= 0)[:, ::-1], np.argwhere(mask_b < 0)[:, ::-1]
    pools = [(obj_a, obj_b), (obj_a, bg_b), (bg_a, bg_b)]
    mix = np.array(config.category_mix, float)
    possible = np.array([len(a) > 0 and len(b) > 0 for a, b in pools])
    total = config.n_non_matches
    if not possible.any():
        log.warning("no non-match category is satisfiable")
        return MatchSet()
    if not possible.all():
        log.warning("non-match categories %s unsatisfiable; redistributing",
                    [NonMatchCategory(k).name for k in np.flatnonzero(~possible)])
    weights = np.where(possible, mix, 0.0)
    if weights.sum() == 0:
        weights = possible.astype(float)
    counts = split_counts(total, weights / weights.sum())

    out_a, out_b, out_c = [], [], []
    # object/object first: a shortfall from exclusion is handed on to the other categories
    oo_a, oo_b = _sample_obj_obj(rec_a, rec_b, obj_a, obj_b, counts[0], config, rng)
    short = counts[0] - len(oo_a)
    if short:
        log.warning("object/object non-matches short by %d after exclusion", short)
        rest = np.array([0.0, weights[1], weights[2]])
        if rest.sum() > 0:
            extra = split_counts(short, rest / rest.sum())
            counts = [len(oo_a), counts[1] + extra[1], counts[2] + extra[2]]
    out_a.append(oo_a)
    out_b.append(oo_b)
    out_c.append(np.zeros(len(oo_a), np.uint8))
    for cat in (1, 2):
        pa, pb = pools[cat]
        n = counts[cat]
        if n == 0:
            continue
        out_a.append(pa[rng.integers(len(pa), size=n)])
        out_b.append(pb[rng.integers(len(pb), size=n)])
        out_c.append(np.full(n, cat, np.uint8))
    return MatchSet(
        non_match_a=pixel_center(np.concatenate(out_a)),
        non_match_b=pixel_center(np.concatenate(out_b)),
        non_match_category=np.concatenate(out_c),
    )


def _sample_obj_obj(rec_a, rec_b, obj_a, obj_b, n, config, rng):
    if n == 0 or not len(obj_a) or not len(obj_b):
        return np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64)
    truth = None
    if rec_a.model_ids & rec_b.model_ids:
        truth = true_locations(rec_a, rec_b, obj_a, config.eps)
    keep_a, keep_b = [], []
    found = attempts = 0
    budget = config.budget_factor * n
    r2 = config.exclusion_radius ** 2
    while found < n and attempts < budget:
        k = min(max(256, 2 * n), budget - attempts)
        attempts += k
        ia = rng.integers(len(obj_a), size=k)
        ib = rng.integers(len(obj_b), size=k)
        ok = np.ones(k, bool)
        if truth is not None:
            diff = truth[ia] - pixel_center(obj_b[ib])[:, None, :]
            with np.errstate(invalid="ignore"):
                near = (diff ** 2).sum(axis=2) < r2
            ok = ~near.any(axis=1)
        sel = np.flatnonzero(ok)[: n - found]
        found += len(sel)
        keep_a.append(obj_a[ia[sel]])
        keep_b.append(obj_b[ib[sel]])
    return np.concatenate(keep_a), np.concatenate(keep_b)


def generate_match_set(rec_a: ImageRecord, rec_b: ImageRecord, config: SamplingConfig,
                       rng: np.random.Generator) -> MatchSet:
    matches, _ = generate_matches(rec_a, rec_b, config, rng)
    non = generate_non_matches(rec_a, rec_b, config, rng)
    matches.non_match_a = non.non_match_a
    matches.non_match_b = non.non_match_b
    matches.non_match_category = non.non_match_category
    return matches


# -- evaluation queries -------------------------------------------------------------


@dataclass
class QuerySet:
    """Query pixels in A with every visible ground-truth location in B."""

    pixels_a: np.ndarray
    models: list[str]
    truth_b: np.ndarray  # (N, K, 2), NaN-padded

    def __len__(self) -> int:
        return len(self.pixels_a)


def sample_queries(rec_a: ImageRecord, rec_b: ImageRecord, n: int, rng: np.random.Generator,
                   config: SamplingConfig = SamplingConfig()) -> QuerySet:
    """Sample up to ``n`` visible vertices on shared models in A with all their matches in B."""
    shared = _shared_models(rec_a, rec_b)
    proj_a = rec_a.projections(config.occlusion, config.eps)
    proj_b = rec_b.projections(config.occlusion, config.eps)
    slots = max(len(rec_b.instances_of(m)) for m in shared)
    candidates = []
    for m in shared:
        for ia in rec_a.instances_of(m):
            vis_a = proj_a[ia].visible
            truth = np.full((len(vis_a), slots, 2), np.nan)
            for slot, ib in enumerate(rec_b.instances_of(m)):
                pb = proj_b[ib]
                truth[pb.visible, slot] = pb.uv[pb.visible]
            good = np.flatnonzero(vis_a & ~np.isnan(truth[:, :, 0]).all(axis=1))
            candidates += [(m, proj_a[ia].uv[v], truth[v]) for v in good]
    if not candidates:
        return QuerySet(np.zeros((0, 2)), [], np.zeros((0, slots, 2)))
    # uniform over models first, then over that model's visible vertices
    by_model = {m: [c for c in candidates if c[0] == m] for m in shared}
    by_model = {m: c for m, c in by_model.items() if c}
    names = sorted(by_model)
    picks = []
    for _ in range(n):
        m = names[int(rng.integers(len(names)))]
        picks.append(by_model[m][int(rng.integers(len(by_model[m])))])
    return QuerySet(
        np.array([p[1] for p in picks], np.float32).astype(np.float64),
        [p[0] for p in picks],
        np.stack([p[2] for p in picks]),
    )


# -- pair sources -----------------------------------------------------------------


@dataclass
class PairSampler:
    """Deterministic pair stream: record ``k`` depends only on ``(seed, k)``."""

    dataset: Dataset
    sampling: SamplingConfig = SamplingConfig()
    seed: int = 0
    pairing_types: tuple[PairingType, ...] = ALL_PAIRINGS
    max_resample: int = 20

    def record(self, index: int) -> tuple[PairSpec, MatchSet]:
        rng = seeded_rng(derive_seed(self.seed, "pair", index))
        for _ in range(self.max_resample):
            spec = sample_pair_spec(self.dataset, rng, self.pairing_types, self.sampling.same_scene_prob)
            rec_a, rec_b = self.dataset.records(spec)
            if rec_a.model_ids & rec_b.model_ids:
                return spec, generate_match_set(rec_a, rec_b, self.sampling, rng)
        raise NoSharedModelError(f"no pair with a shared model after {self.max_resample} draws")

    def records(self, count: int, start: int = 0):
        for k in range(start, start + count):
            yield self.record(k)


_worker_sampler: PairSampler | None = None


def _init_worker(sampler: PairSampler) -> None:
    global _worker_sampler
    _worker_sampler = sampler


def _worker_record(index: int):
    spec, ms = _worker_sampler.record(index)
    ms.match_models = None
    return spec, ms


def build_pair_file(dataset: Dataset, n_pairs: int, sampling: SamplingConfig, seed: int,
                    path: str | Path, pairing_types: Sequence[PairingType] = ALL_PAIRINGS,
                    jobs: int = 1) -> Path:
    """Generate ``n_pairs`` records and write them in index order."""
    from objmatch.pairfile import write_pair_file

    sampler = PairSampler(dataset, sampling, seed, tuple(pairing_types))
    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs, initializer=_init_worker, initargs=(sampler,)) as pool:
            records = pool.map(_worker_record, range(n_pairs), chunksize=8)
    else:
        records = list(sampler.records(n_pairs))
    return write_pair_file(path, records)
