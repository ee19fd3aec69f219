"""Canonical on-disk scene format.

A scene directory holds::

    scene.json            ids, domain tag, camera, model table, per-image instances
    models/<id>.obj       ``v`` and triangular ``f`` lines only
    rgb_<image>.ppm       binary P6
    depth_<image>.dbin    b"DPT1", u32 width, u32 height, f32 meters (0 = invalid)
    mask_<image>.mbin     b"MSK1", u32 width, u32 height, i32 instance id (-1 = background)

All binary fields are little-endian. Writing is canonical: reading a scene and
writing it back produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from objmatch.types import (
    CameraIntrinsics,
    DomainTag,
    InvariantError,
    ObjectInstance,
    RgbdImage,
    RigidPose,
    TriMesh,
)

SCENE_FILE = "scene.json"
DEPTH_MAGIC = b"DPT1"
MASK_MAGIC = b"MSK1"


class SceneFormatError(ValueError):
    """Missing file, malformed header or invariant violation, tagged with a field path."""

    def __init__(self, where: str, reason: str):
        super().__init__(f"{where}: {reason}")
        self.where = where
        self.reason = reason


@dataclass(frozen=True)
class ModelInfo:
    model_id: str
    base_color: tuple[float, float, float]
    symmetric: bool = False


@dataclass(frozen=True, eq=False)
class ImageAnnotation:
    image_id: str
    instances: tuple[ObjectInstance, ...]

    def instance(self, instance_id: int) -> ObjectInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def model_of(self) -> dict[int, str]:
        return {inst.instance_id: inst.model_id for inst in self.instances}


@dataclass(frozen=True, eq=False)
class SceneAnnotation:
    scene_id: str
    domain_tag: DomainTag
    camera: CameraIntrinsics
    models: tuple[ModelInfo, ...]
    images: tuple[ImageAnnotation, ...]

    def image(self, image_id: str) -> ImageAnnotation:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise KeyError(image_id)

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(m.model_id for m in self.models)


@dataclass(eq=False)
class Scene:
    """A scene on disk: annotation, mesh library and lazily loaded rasters."""

    annotation: SceneAnnotation
    meshes: dict[str, TriMesh]
    root: Path | None = None
    images: dict[str, RgbdImage] | None = None

    @property
    def scene_id(self) -> str:
        return self.annotation.scene_id

    @property
    def domain_tag(self) -> DomainTag:
        return self.annotation.domain_tag

    def load_image(self, image_id: str) -> RgbdImage:
        if self.images is not None and image_id in self.images:
            return self.images[image_id]
        if self.root is None:
            raise FileNotFoundError(f"scene {self.scene_id} has no directory")
        return read_image(self.root, self.annotation, image_id)


# -- Wavefront OBJ subset -----------------------------------------------------------


def format_obj(mesh: TriMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


def parse_obj(text: str, model_id: str, base_color=(0.7, 0.7, 0.7), where: str = "obj") -> TriMesh:
    vertices, triangles = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        try:
            if toks[0] == "v" and len(toks) == 4:
                vertices.append([float(t) for t in toks[1:]])
            elif toks[0] == "f" and len(toks) == 4:
                # tolerate v/vt/vn references, keep the vertex index only
                triangles.append([int(t.split("/")[0]) - 1 for t in toks[1:]])
            else:
                raise ValueError(f"unsupported record {toks[0]!r}")
        except ValueError as exc:
            raise SceneFormatError(f"{where}:{lineno}", str(exc)) from None
    try:
        return TriMesh(model_id, np.array(vertices), np.array(triangles), base_color)
    except InvariantError as exc:
        raise SceneFormatError(where, str(exc)) from None


# -- rasters ---------------------------------------------------------------------


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def decode_ppm(data: bytes, where: str = "ppm") -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError(where, "truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise SceneFormatError(where, "expected binary P6 with maxval 255")
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise SceneFormatError(where, "malformed size") from None
    body = data[pos:]
    if len(body) != w * h * 3:
        raise SceneFormatError(where, f"expected {w * h * 3} bytes, got {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3)


def encode_raster(magic: bytes, array: np.ndarray, dtype: str) -> bytes:
    h, w = array.shape
    return magic + struct.pack("<II", w, h) + np.ascontiguousarray(array, dtype).tobytes()


def decode_raster(data: bytes, magic: bytes, dtype: str, where: str) -> np.ndarray:
    if len(data) < 12 or data[:4] != magic:
        raise SceneFormatError(where, f"bad magic, expected {magic!r}")
    w, h = struct.unpack("<II", data[4:12])
    expected = w * h * np.dtype(dtype).itemsize
    if len(data) - 12 != expected:
        raise SceneFormatError(where, f"header says {w}x{h} but payload has {len(data) - 12} bytes")
    return np.frombuffer(data[12:], dtype).reshape(h, w)


# -- scene.json ---------------------------------------------------------------------


def annotation_to_json(ann: SceneAnnotation) -> str:
    cam = ann.camera
    doc = {
        "scene_id": ann.scene_id,
        "domain_tag": ann.domain_tag.value,
        "camera": {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
        },
        "models": [
            {"model_id": m.model_id, "base_color": list(m.base_color), "symmetric": m.symmetric}
            for m in ann.models
        ],
        "images": [
            {
                "image_id": img.image_id,
                "instances": [
                    {
                        "model_id": inst.model_id,
                        "instance_id": inst.instance_id,
                        "rotation": inst.pose.rotation.reshape(-1).tolist(),
                        "translation": inst.pose.translation.tolist(),
                    }
                    for inst in img.instances
                ],
            }
            for img in ann.images
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def _field(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise SceneFormatError(f"{where}.{key}", "missing field")
    return doc[key]


def annotation_from_json(text: str) -> SceneAnnotation:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError("scene.json", f"invalid JSON ({exc})") from None
    where = "scene"
    try:
        domain = DomainTag(_field(doc, "domain_tag", where))
    except ValueError:
        raise SceneFormatError("scene.domain_tag", "unknown domain") from None
    cam_doc = _field(doc, "camera", where)
    try:
        camera = CameraIntrinsics(*(_field(cam_doc, k, "scene.camera") for k in
                                    ("fx", "fy", "cx", "cy", "width", "height")))
    except (InvariantError, TypeError) as exc:
        raise SceneFormatError("scene.camera", str(exc)) from None
    models = []
    for i, m in enumerate(_field(doc, "models", where)):
        w = f"scene.models[{i}]"
        models.append(ModelInfo(str(_field(m, "model_id", w)),
                                tuple(float(c) for c in _field(m, "base_color", w)),
                                bool(m.get("symmetric", False))))
    known = {m.model_id for m in models}
    images = []
    for i, img in enumerate(_field(doc, "images", where)):
        w = f"scene.images[{i}]"
        instances = []
        seen: set[int] = set()
        for j, inst in enumerate(_field(img, "instances", w)):
            wi = f"{w}.instances[{j}]"
            model_id = str(_field(inst, "model_id", wi))
            if model_id not in known:
                raise SceneFormatError(f"{wi}.model_id", f"{model_id!r} not in model library")
            instance_id = int(_field(inst, "instance_id", wi))
            if instance_id < 0 or instance_id in seen:
                raise SceneFormatError(f"{wi}.instance_id", "negative or duplicate id")
            seen.add(instance_id)
            rot = _field(inst, "rotation", wi)
            trans = _field(inst, "translation", wi)
            if len(rot) != 9 or len(trans) != 3:
                raise SceneFormatError(wi, "rotation needs 9 and translation 3 components")
            try:
                pose = RigidPose(np.array(rot, float).reshape(3, 3), np.array(trans, float))
            except InvariantError as exc:
                field_name, _, reason = str(exc).partition(": ")
                raise SceneFormatError(f"{wi}.{field_name}", reason) from None
            instances.append(ObjectInstance(model_id, pose, instance_id))
        images.append(ImageAnnotation(str(_field(img, "image_id", w)), tuple(instances)))
    return SceneAnnotation(str(_field(doc, "scene_id", where)), domain, camera,
                           tuple(models), tuple(images))


# -- whole scenes ------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise SceneFormatError(path.name, "missing file") from None


def read_image(root: Path, ann: SceneAnnotation, image_id: str) -> RgbdImage:
    root = Path(root)
    cam = ann.camera
    rgb = decode_ppm(_read_bytes(root / f"rgb_{image_id}.ppm"), f"rgb_{image_id}.ppm")
    depth = decode_raster(_read_bytes(root / f"depth_{image_id}.dbin"), DEPTH_MAGIC, "<f4",
                          f"depth_{image_id}.dbin")
    mask = decode_raster(_read_bytes(root / f"mask_{image_id}.mbin"), MASK_MAGIC, "<i4",
                         f"mask_{image_id}.mbin")
    for name, arr in (("rgb", rgb), ("depth", depth), ("mask", mask)):
        if arr.shape[:2] != (cam.height, cam.width):
            raise SceneFormatError(f"{name}_{image_id}", f"header size {arr.shape[1]}x{arr.shape[0]} "
                                   f"differs from camera {cam.width}x{cam.height}")
    ids = set(np.unique(mask).tolist()) - {-1}
    declared = {inst.instance_id for inst in ann.image(image_id).instances}
    if not ids <= declared:
        raise SceneFormatError(f"mask_{image_id}", f"ids {sorted(ids - declared)} not annotated")
    try:
        return RgbdImage(rgb, depth.astype(np.float32), mask.astype(np.int32),
                         ann.domain_tag, ann.scene_id, image_id)
    except InvariantError as exc:
        raise SceneFormatError(f"image {image_id}", str(exc)) from None


def read_scene(path: str | Path) -> Scene:
    root = Path(path)
    ann = annotation_from_json(_read_bytes(root / SCENE_FILE).decode("utf-8"))
    meshes = {}
    for info in ann.models:
        obj_path = root / "models" / f"{info.model_id}.obj"
        text = _read_bytes(obj_path).decode("utf-8")
        meshes[info.model_id] = parse_obj(text, info.model_id, info.base_color, where=f"models/{info.model_id}.obj")
    for img in ann.images:
        for name in (f"rgb_{img.image_id}.ppm", f"depth_{img.image_id}.dbin", f"mask_{img.image_id}.mbin"):
            if not (root / name).is_file():
                raise SceneFormatError(name, "missing file")
    return Scene(ann, meshes, root)


def write_scene(path: str | Path, annotation: SceneAnnotation, meshes: dict[str, TriMesh],
                images: list[RgbdImage]) -> Path:
    root = Path(path)
    (root / "models").mkdir(parents=True, exist_ok=True)
    (root / SCENE_FILE).write_text(annotation_to_json(annotation), encoding="utf-8")
    for info in annotation.models:
        (root / "models" / f"{info.model_id}.obj").write_text(format_obj(meshes[info.model_id]),
                                                              encoding="utf-8")
    for img in images:
        (root / f"rgb_{img.image_id}.ppm").write_bytes(encode_ppm(img.rgb))
        (root / f"depth_{img.image_id}.dbin").write_bytes(encode_raster(DEPTH_MAGIC, img.depth, "<f4"))
        (root / f"mask_{img.image_id}.mbin").write_bytes(encode_raster(MASK_MAGIC, img.mask, "<i4"))
    return root


def copy_scene(scene: Scene, path: str | Path) -> Path:
    images = [scene.load_image(img.image_id) for img in scene.annotation.images]
    return write_scene(path, scene.annotation, scene.meshes, images)
