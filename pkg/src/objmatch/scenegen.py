"""Procedural tabletop scenes rendered to RGBD + instance masks.

Objects are placed physics-free: rejection sampling of non-overlapping
footprint circles with random yaw, resting on the table plane ``z = 0``. Cameras
sit on an upper hemisphere and look at the table center. Three independent
random streams are used per scene (geometry, appearance, sensor noise) so that
changing the texture-randomization probability never moves geometry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from objmatch.geometry import DepthBuffer, rasterize
from objmatch.primitives import SYMMETRIC_KINDS, footprint_radius, half_height, make_primitive
from objmatch.rng import derive_seed, seeded_rng
from objmatch.sceneio import ImageAnnotation, ModelInfo, Scene, SceneAnnotation, write_scene
from objmatch.types import (
    CameraIntrinsics,
    DomainTag,
    ObjectInstance,
    RgbdImage,
    RigidPose,
    TriMesh,
)

log = logging.getLogger(__name__)

PLACEMENT_ATTEMPTS = 1000
PLACEMENT_GAP = 0.005

# (kind, params, base color)
MODEL_SPECS: dict[str, tuple[str, dict, tuple[float, float, float]]] = {
    "box": ("box", {"size": (0.08, 0.06, 0.05)}, (0.80, 0.30, 0.25)),
    "sphere": ("sphere", {"radius": 0.035}, (0.30, 0.65, 0.30)),
    "cylinder": ("cylinder", {"radius": 0.03, "height": 0.09}, (0.25, 0.40, 0.80)),
    "cone": ("cone", {"radius": 0.04, "height": 0.08}, (0.85, 0.75, 0.25)),
    "wedge": ("wedge", {"size": (0.09, 0.06, 0.05)}, (0.65, 0.35, 0.70)),
}
FLAT_BACKGROUND = (0.42, 0.40, 0.38)
LIGHT_DIRECTION = np.array([0.3, -0.4, 0.87]) / np.linalg.norm([0.3, -0.4, 0.87])
AMBIENT = 0.35


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Sensor perturbation turning a sim render into the pseudo-real domain."""

    rgb_sigma: float = 25.0
    depth_sigma: float = 0.01
    dropout: float = 0.03
    gain_spread: float = 0.0
    offset_sigma: float = 0.0
    seed_offset: int = 1

    def __post_init__(self) -> None:
        if min(self.rgb_sigma, self.depth_sigma, self.offset_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.gain_spread < 1.0:
            raise ValueError("gain_spread must lie in [0, 1)")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


@dataclass(frozen=True)
class SceneGenConfig:
    object_count: tuple[int, int] = (9, 10)
    model_pool: tuple[str, ...] = tuple(MODEL_SPECS)
    views: int = 50
    width: int = 64
    height: int = 64
    texture_randomization: float = 0.0
    background: str = "flat"
    domain_tag: DomainTag = DomainTag.SIM
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)
    camera_radius: tuple[float, float] = (0.8, 1.5)
    camera_elevation_deg: tuple[float, float] = (25.0, 80.0)
    table_half_extent: float = 0.2
    focal_scale: float = 1.4
    tessellation: int = 3

    def __post_init__(self) -> None:
        lo, hi = self.object_count
        if lo < 1 or hi < lo:
            raise ValueError("object_count must be a positive range")
        if self.views < 1 or not self.model_pool:
            raise ValueError("views and model pool must be non-empty")
        if not 0.0 <= self.texture_randomization <= 1.0:
            raise ValueError("texture_randomization must lie in [0, 1]")
        if self.background not in ("flat", "random"):
            raise ValueError("background must be 'flat' or 'random'")
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.width, self.height, self.focal_scale)


@dataclass(frozen=True)
class Appearance:
    """How one instance is colored in one view."""

    kind: str  # solid | stripes | checker
    color: tuple[float, float, float]
    color2: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: int = 0
    period: float = 0.02


@dataclass(eq=False)
class GeneratedScene:
    annotation: SceneAnnotation
    meshes: dict[str, TriMesh]
    images: list[RgbdImage]
    appearances: list[dict[int, Appearance]]
    buffers: list[DepthBuffer]

    def write(self, path: str | Path) -> Path:
        return write_scene(path, self.annotation, self.meshes, self.images)

    def as_scene(self) -> Scene:
        return Scene(self.annotation, self.meshes, None, {img.image_id: img for img in self.images})


def model_library(pool=tuple(MODEL_SPECS), tessellation: int = 3) -> dict[str, TriMesh]:
    out = {}
    for model_id in pool:
        kind, params, color = MODEL_SPECS[model_id]
        out[model_id] = make_primitive(kind, params, tessellation, model_id, color)
    return out


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_at(position: np.ndarray, target: np.ndarray) -> RigidPose:
    """World-to-camera pose for a camera at ``position`` (x right, y down, z forward)."""
    forward = target - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return RigidPose(rot, -rot @ position)


def place_objects(rng: np.random.Generator, meshes: list[TriMesh], half_extent: float) -> list[RigidPose]:
    placed: list[tuple[np.ndarray, float]] = []
    poses = []
    for mesh in meshes:
        radius = footprint_radius(mesh)
        for _ in range(PLACEMENT_ATTEMPTS):
            xy = rng.uniform(-half_extent, half_extent, size=2)
            yaw = rng.uniform(0.0, 2 * np.pi)
            if all(np.linalg.norm(xy - c) >= radius + r + PLACEMENT_GAP for c, r in placed):
                break
        else:
            raise PlacementError(f"could not place {mesh.model_id} after {PLACEMENT_ATTEMPTS} attempts")
        placed.append((xy, radius))
        poses.append(RigidPose(yaw_rotation(yaw), [xy[0], xy[1], half_height(mesh)]))
    return poses


def sample_camera(rng: np.random.Generator, config: SceneGenConfig) -> RigidPose:
    radius = rng.uniform(*config.camera_radius)
    elevation = np.deg2rad(rng.uniform(*config.camera_elevation_deg))
    azimuth = rng.uniform(0.0, 2 * np.pi)
    position = radius * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    return look_at(position, np.array([0.0, 0.0, 0.02]))


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))


def random_appearance(rng: np.random.Generator) -> Appearance:
    kind = ("solid", "stripes", "checker")[int(rng.integers(3))]
    return Appearance(kind, _random_color(rng), _random_color(rng), int(rng.integers(3)),
                      float(rng.uniform(0.01, 0.03)))


def _pattern_color(app: Appearance, model_points: np.ndarray) -> np.ndarray:
    if app.kind == "solid":
        return np.tile(app.color, (len(model_points), 1))
    if app.kind == "stripes":
        parity = np.floor(model_points[:, app.axis] / app.period).astype(np.int64) % 2
    else:
        parity = np.floor(model_points / app.period).astype(np.int64).sum(axis=1) % 2
    return np.where(parity[:, None] == 0, app.color, app.color2)


def shade_image(buffer: DepthBuffer, instances, meshes, camera: CameraIntrinsics, world_to_cam: RigidPose,
                appearances: dict[int, Appearance], background) -> np.ndarray:
    H, W = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    rays = np.stack([(cols - camera.cx) / camera.fx, (rows - camera.cy) / camera.fy, np.ones_like(cols)], axis=-1)
    color = np.zeros((H, W, 3))
    light = world_to_cam.rotation @ LIGHT_DIRECTION

    for inst in instances:
        sel = buffer.ids == inst.instance_id
        if not sel.any():
            continue
        mesh = meshes[inst.model_id]
        tri = buffer.triangle[sel]
        a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
        normal = np.cross(b - a, c - a) @ inst.pose.rotation.T
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ light, 0.0, None)
        cam_points = rays[sel] * buffer.depth[sel][:, None]
        model_points = (cam_points - inst.pose.translation) @ inst.pose.rotation
        color[sel] = _pattern_color(appearances[inst.instance_id], model_points) * shade[:, None]

    bg = buffer.ids < 0
    if isinstance(background, Appearance) and background.kind == "checker":
        cam_to_world = world_to_cam.inverse()
        d = rays[bg] @ cam_to_world.rotation.T
        origin = cam_to_world.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(d[:, 2] < 0, -origin[2] / d[:, 2], np.nan)
        hit = origin + s[:, None] * d
        parity = (np.floor(hit[:, 0] / background.period) + np.floor(hit[:, 1] / background.period)) % 2
        color[bg] = np.where((parity == 0)[:, None], background.color, background.color2)
    else:
        flat = background.color if isinstance(background, Appearance) else background
        color[bg] = flat
    return np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)


def apply_noise(image: RgbdImage, noise: NoiseModel, seed: int) -> RgbdImage:
    """Perturb a sim render into the pseudo-real domain; the mask is untouched.

    Per image: a white-balance gain per channel and an exposure offset. Per
    pixel: Gaussian color noise, multiplicative depth noise and depth dropout.
    """
    rng = seeded_rng(derive_seed(seed, "noise", noise.seed_offset))
    gain = rng.uniform(1.0 - noise.gain_spread, 1.0 + noise.gain_spread, 3)
    offset = rng.standard_normal() * noise.offset_sigma
    rgb_noise = rng.standard_normal(image.rgb.shape) * noise.rgb_sigma
    depth_noise = rng.standard_normal(image.depth.shape) * noise.depth_sigma
    drop = rng.random(image.depth.shape) < noise.dropout
    rgb = np.clip(np.round(image.rgb.astype(np.float64) * gain + offset + rgb_noise), 0, 255).astype(np.uint8)
    depth = image.depth.astype(np.float64) * (1.0 + depth_noise)
    depth = np.where(drop | (image.depth <= 0), 0.0, np.clip(depth, 0.0, None))
    return RgbdImage(rgb, depth.astype(np.float32), image.mask, DomainTag.PSEUDO_REAL,
                     image.scene_id, image.image_id)


def generate_scene(config: SceneGenConfig, scene_seed: int, scene_id: str | None = None,
                   library: dict[str, TriMesh] | None = None) -> GeneratedScene:
    library = library or model_library(config.model_pool, config.tessellation)
    scene_id = scene_id or f"{config.domain_tag.value}_{scene_seed:016x}"
    geo_rng = seeded_rng(derive_seed(scene_seed, "geometry"))
    app_rng = seeded_rng(derive_seed(scene_seed, "appearance"))
    camera = config.camera

    lo, hi = config.object_count
    count = int(geo_rng.integers(lo, hi + 1))
    pool = list(config.model_pool)
    chosen = [pool[int(k)] for k in geo_rng.integers(len(pool), size=count)]
    world_poses = place_objects(geo_rng, [library[m] for m in chosen], config.table_half_extent)

    used = sorted(set(chosen), key=pool.index)
    models = tuple(ModelInfo(m, library[m].base_color, MODEL_SPECS.get(m, (m,))[0] in SYMMETRIC_KINDS)
                   for m in used)
    meshes = {m: library[m] for m in used}

    annotations, images, appearances, buffers = [], [], [], []
    for view in range(config.views):
        world_to_cam = sample_camera(geo_rng, config)
        instances = tuple(
            ObjectInstance(model_id, world_to_cam.compose(pose), k)
            for k, (model_id, pose) in enumerate(zip(chosen, world_poses))
        )
        image_id = f"{view:03d}"
        view_app = {}
        for inst in instances:
            randomize = app_rng.random() < config.texture_randomization
            candidate = random_appearance(app_rng)
            view_app[inst.instance_id] = candidate if randomize else Appearance("solid", library[inst.model_id].base_color)
        if config.background == "random":
            background = Appearance("checker" if app_rng.random() < 0.5 else "solid",
                                    _random_color(app_rng), _random_color(app_rng), 0,
                                    float(app_rng.uniform(0.03, 0.08)))
        else:
            background = FLAT_BACKGROUND

        buffer = rasterize(instances, meshes, camera)
        rgb = shade_image(buffer, instances, meshes, camera, world_to_cam, view_app, background)
        image = RgbdImage(rgb, buffer.depth_raster(), buffer.ids, DomainTag.SIM, scene_id, image_id)
        if config.domain_tag == DomainTag.PSEUDO_REAL:
            image = apply_noise(image, config.noise, derive_seed(scene_seed, "view", view))
        annotations.append(ImageAnnotation(image_id, instances))
        images.append(image)
        appearances.append(view_app)
        buffers.append(buffer)

    ann = SceneAnnotation(scene_id, config.domain_tag, camera, models, tuple(annotations))
    return GeneratedScene(ann, meshes, images, appearances, buffers)


def scene_seed_for(config: SceneGenConfig, index: int) -> int:
    return derive_seed(config.seed, config.domain_tag.value, index)


def scene_name(config: SceneGenConfig, index: int) -> str:
    return f"{config.domain_tag.value}_{config.seed}_{index:04d}"


def _generate_one(args) -> Path:
    config, index, out = args
    scene = generate_scene(config, scene_seed_for(config, index), scene_name(config, index))
    return scene.write(Path(out) / scene.annotation.scene_id)


def generate_dataset(config: SceneGenConfig, count: int, out: str | Path, jobs: int = 1) -> list[Path]:
    """Write ``count`` scenes under ``out``; output is identical for any ``jobs``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(config, k, out) for k in range(count)]
    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs) as pool:
            return pool.map(_generate_one, tasks)
    return [_generate_one(t) for t in tasks]


def with_domain(config: SceneGenConfig, domain: DomainTag | str) -> SceneGenConfig:
    return replace(config, domain_tag=DomainTag(domain))
