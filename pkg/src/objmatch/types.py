"""Core domain types shared by every stage of the pipeline.

Constructors validate their invariants and freeze array fields, so a value that
exists is a valid value. Pixel coordinates follow one convention everywhere:
``u`` is horizontal, ``v`` vertical, origin at the top-left image corner, and
pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` with its center at
``(col + 0.5, row + 0.5)``. A real coordinate is looked up at the pixel whose
center is nearest, i.e. ``floor(u)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ROTATION_TOL = 1e-5


class InvariantError(ValueError):
    """A value violates one of its type invariants."""


class DomainTag(str, Enum):
    SIM = "sim"
    PSEUDO_REAL = "pseudo_real"

    @classmethod
    def parse(cls, text: str) -> "DomainTag":
        # CLI spelling uses a hyphen
        return cls(text.replace("-", "_"))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise InvariantError(f"{name}: non-finite component")


def pixel_index(coords: np.ndarray) -> np.ndarray:
    """Integer ``(col, row)`` of the pixel nearest to real coordinates ``(..., 2)``."""
    return np.floor(np.asarray(coords)).astype(np.int64)


def pixel_center(index: np.ndarray) -> np.ndarray:
    return np.asarray(index, dtype=np.float64) + 0.5


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation and translation (meters) mapping model-frame points to the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        _finite("rotation", rot)
        _finite("translation", trans)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ROTATION_TOL:
            raise InvariantError("rotation: not orthonormal")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise InvariantError(f"rotation: determinant {det:.6f}, expected +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        for name in ("fx", "fy", "cx", "cy"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise InvariantError(f"{name}: non-finite")
            object.__setattr__(self, name, value)
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvariantError("width/height: must be integers")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise InvariantError("width/height: must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantError("fx/fy: must be positive")
        if not (0 <= self.cx < self.width):
            raise InvariantError("cx: outside [0, width)")
        if not (0 <= self.cy < self.height):
            raise InvariantError("cy: outside [0, height)")

    @classmethod
    def default(cls, width: int, height: int, focal_scale: float = 1.4) -> "CameraIntrinsics":
        f = focal_scale * width
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


@dataclass(frozen=True, eq=False)
class TriMesh:
    model_id: str
    vertices: np.ndarray
    triangles: np.ndarray
    base_color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def __post_init__(self) -> None:
        verts = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        _finite(f"{self.model_id}.vertices", verts)
        if len(tris) == 0:
            raise InvariantError(f"{self.model_id}.triangles: empty")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise InvariantError(f"{self.model_id}.triangles: index out of range")
        if np.any(triangle_areas(verts, tris) <= 1e-14):
            raise InvariantError(f"{self.model_id}.triangles: degenerate triangle")
        color = tuple(float(c) for c in self.base_color)
        if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
            raise InvariantError(f"{self.model_id}.base_color: outside [0, 1]")
        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "triangles", _frozen(tris))
        object.__setattr__(self, "base_color", color)

    @property
    def surface_area(self) -> float:
        return float(triangle_areas(self.vertices, self.triangles).sum())


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    model_id: str
    pose: RigidPose
    instance_id: int


@dataclass(frozen=True, eq=False)
class RgbdImage:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    domain_tag: DomainTag
    scene_id: str
    image_id: str

    def __post_init__(self) -> None:
        rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
        depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        mask = np.ascontiguousarray(self.mask, dtype=np.int32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise InvariantError("rgb: expected H x W x 3")
        if depth.shape != rgb.shape[:2] or mask.shape != rgb.shape[:2]:
            raise InvariantError("depth/mask: dimensions differ from rgb")
        if not np.all(np.isfinite(depth)) or depth.min(initial=0.0) < 0:
            raise InvariantError("depth: must be finite and >= 0")
        if mask.min(initial=-1) < -1:
            raise InvariantError("mask: ids below -1")
        object.__setattr__(self, "rgb", _frozen(rgb))
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True, eq=False)
class DescriptorMap:
    """Per-pixel descriptors stored as an ``(H, W, D)`` array."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise InvariantError("descriptor values: expected H x W x D")
        _finite("descriptor values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at(self, coords: np.ndarray) -> np.ndarray:
        idx = pixel_index(coords)
        return self.values[idx[..., 1], idx[..., 0]]


class NonMatchCategory(int, Enum):
    OBJ_OBJ = 0
    OBJ_BG = 1
    BG_BG = 2


@dataclass(eq=False)
class MatchSet:
    """Matching and non-matching pixel pairs between images A and B.

    Pixel arrays have shape ``(N, 2)`` holding ``(u, v)``. ``match_models``,
    ``match_vertices`` and the instance arrays are side information known at
    generation time; they are not part of the pair file, which holds pixels only.
    """

    match_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))
    match_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))
    non_match_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))
    non_match_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))
    non_match_category: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    match_models: list[str] | None = None
    match_vertices: np.ndarray | None = None
    match_instances: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.match_a = np.asarray(self.match_a, dtype=np.float32).reshape(-1, 2)
        self.match_b = np.asarray(self.match_b, dtype=np.float32).reshape(-1, 2)
        self.non_match_a = np.asarray(self.non_match_a, dtype=np.float32).reshape(-1, 2)
        self.non_match_b = np.asarray(self.non_match_b, dtype=np.float32).reshape(-1, 2)
        self.non_match_category = np.asarray(self.non_match_category, dtype=np.uint8).reshape(-1)
        if len(self.match_a) != len(self.match_b):
            raise InvariantError("matches: A and B lengths differ")
        if not (len(self.non_match_a) == len(self.non_match_b) == len(self.non_match_category)):
            raise InvariantError("non_matches: lengths differ")
        if self.non_match_category.size and self.non_match_category.max() > 2:
            raise InvariantError("non_matches: unknown category")

    @property
    def n_matches(self) -> int:
        return len(self.match_a)

    @property
    def n_non_matches(self) -> int:
        return len(self.non_match_a)

    def category_counts(self) -> tuple[int, int, int]:
        counts = np.bincount(self.non_match_category, minlength=3)
        return int(counts[0]), int(counts[1]), int(counts[2])

    def check_bounds(self, width: int, height: int) -> None:
        for name in ("match_a", "match_b", "non_match_a", "non_match_b"):
            px = getattr(self, name)
            if px.size and (
                px[:, 0].min() < 0 or px[:, 1].min() < 0
                or px[:, 0].max() >= width or px[:, 1].max() >= height
            ):
                raise InvariantError(f"{name}: pixel out of bounds")
