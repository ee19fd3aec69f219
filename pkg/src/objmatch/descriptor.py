"""A small fully-convolutional descriptor network with a hand-written backward pass.

Architecture: a stack of 3x3 stride-1 zero-padded convolutions with ReLU,
followed by a 1x1 projection to ``dim`` channels. Resolution is preserved, so
the output is one ``dim``-vector per input pixel. Arrays are channels-last,
``(N, H, W, C)``. Training defaults to float32; a float64 mode exists for
gradient checks.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from objmatch.loss import LossConfig, loss_and_gradients
from objmatch.rng import derive_seed, seeded_rng
from objmatch.types import DescriptorMap, RgbdImage

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SRD1"
CHECKPOINT_VERSION = 1
INPUT_CHANNELS = {"rgb": 3, "rgbd": 4, "depth": 1}


class StaleCacheError(RuntimeError):
    """Backward was called with activations from before a parameter update."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class DescriptorNetConfig:
    input_mode: str = "rgbd"
    hidden: tuple[int, ...] = (16, 16)
    dim: int = 8
    init_scale: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.input_mode not in INPUT_CHANNELS:
            raise ValueError(f"input_mode must be one of {sorted(INPUT_CHANNELS)}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("dim and hidden channel counts must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def in_channels(self) -> int:
        return INPUT_CHANNELS[self.input_mode]

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, np.float32).reshape(-1)
        std = np.asarray(self.std, np.float32).reshape(-1)
        if mean.shape != std.shape or np.any(std <= 0):
            raise ValueError("stats need matching shapes and std > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, channels: int) -> "NormalizationStats":
        return cls(np.zeros(channels), np.ones(channels))

    @classmethod
    def from_images(cls, images: Iterable[RgbdImage], input_mode: str) -> "NormalizationStats":
        rgb_sum = np.zeros(3)
        rgb_sq = np.zeros(3)
        n_rgb = 0
        d_sum = d_sq = 0.0
        n_d = 0
        for img in images:
            rgb = img.rgb.reshape(-1, 3).astype(np.float64) / 255.0
            rgb_sum += rgb.sum(0)
            rgb_sq += (rgb ** 2).sum(0)
            n_rgb += len(rgb)
            d = img.depth[img.depth > 0].astype(np.float64)
            d_sum += d.sum()
            d_sq += (d ** 2).sum()
            n_d += d.size
        rgb_mean = rgb_sum / max(n_rgb, 1)
        rgb_std = np.sqrt(np.maximum(rgb_sq / max(n_rgb, 1) - rgb_mean ** 2, 0)) + 1e-6
        d_mean = d_sum / max(n_d, 1)
        d_std = np.sqrt(max(d_sq / max(n_d, 1) - d_mean ** 2, 0)) + 1e-6
        if input_mode == "rgb":
            return cls(rgb_mean, rgb_std)
        if input_mode == "depth":
            return cls([d_mean], [d_std])
        return cls(np.append(rgb_mean, d_mean), np.append(rgb_std, d_std))


def prepare_input(image: RgbdImage, input_mode: str, stats: NormalizationStats,
                  dtype=np.float32) -> np.ndarray:
    """Normalized ``(H, W, C)`` network input; invalid depth maps to the channel mean."""
    parts = []
    if input_mode in ("rgb", "rgbd"):
        parts.append(image.rgb.astype(np.float64) / 255.0)
    if input_mode in ("rgbd", "depth"):
        parts.append(image.depth.astype(np.float64)[..., None])
    x = np.concatenate(parts, axis=2)
    mean, std = stats.mean.astype(np.float64), stats.std.astype(np.float64)
    out = (x - mean) / std
    if input_mode in ("rgbd", "depth"):
        out[..., -1] = np.where(image.depth > 0, out[..., -1], 0.0)
    return out.astype(dtype)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, dy, dx, :]
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class ForwardCache:
    version: int
    shapes: list
    cols: list
    active: list
    last_hidden: np.ndarray


class DescriptorNet:
    """Parameters live in one ordered dict; both images of a pair go through it."""

    def __init__(self, config: DescriptorNetConfig, stats: NormalizationStats | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.stats = stats or NormalizationStats.identity(config.in_channels)
        if len(self.stats.mean) != config.in_channels:
            raise ValueError("normalization stats do not match input channels")
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params()
        self.version = 0

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = seeded_rng(derive_seed(self.config.seed, "init"))
        params: dict[str, np.ndarray] = {}
        c_in = self.config.in_channels
        for i, c_out in enumerate(self.config.hidden):
            bound = self.config.init_scale * np.sqrt(6.0 / (9 * c_in))
            params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (3, 3, c_in, c_out)).astype(self.dtype)
            params[f"conv{i}.bias"] = np.zeros(c_out, self.dtype)
            c_in = c_out
        bound = self.config.init_scale * np.sqrt(3.0 / c_in)
        params["proj.weight"] = rng.uniform(-bound, bound, (c_in, self.config.dim)).astype(self.dtype)
        params["proj.bias"] = np.zeros(self.config.dim, self.dtype)
        return params

    @property
    def parameter_names(self) -> list[str]:
        return list(self.params)

    def bump_version(self) -> None:
        self.version += 1

    def prepare(self, image: RgbdImage) -> np.ndarray:
        return prepare_input(image, self.config.input_mode, self.stats, self.dtype)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """``x (N, H, W, C)`` -> descriptors ``(N, H, W, dim)`` and the backward cache."""
        x = np.asarray(x, self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[-1]}")
        n, h, w, _ = x.shape
        shapes, cols_list, active = [], [], []
        a = x
        for i in range(len(self.config.hidden)):
            weight = self.params[f"conv{i}.weight"]
            cols = _im2col(a)
            z = cols @ weight.reshape(-1, weight.shape[-1]) + self.params[f"conv{i}.bias"]
            shapes.append(a.shape)
            cols_list.append(cols)
            mask = z > 0
            active.append(mask)
            a = (z * mask).reshape(n, h, w, -1)
        flat = a.reshape(n * h * w, -1)
        out = flat @ self.params["proj.weight"] + self.params["proj.bias"]
        cache = ForwardCache(self.version, shapes, cols_list, active, flat)
        return out.reshape(n, h, w, self.config.dim), cache

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(grad_out, self.dtype).reshape(-1, self.config.dim)
        grads: dict[str, np.ndarray] = {}
        grads["proj.weight"] = cache.last_hidden.T @ g
        grads["proj.bias"] = g.sum(axis=0)
        da = g @ self.params["proj.weight"].T
        for i in reversed(range(len(self.config.hidden))):
            weight = self.params[f"conv{i}.weight"]
            dz = da * cache.active[i]
            grads[f"conv{i}.weight"] = (cache.cols[i].T @ dz).reshape(weight.shape)
            grads[f"conv{i}.bias"] = dz.sum(axis=0)
            if i > 0:
                dcols = dz @ weight.reshape(-1, weight.shape[-1]).T
                da = _col2im(dcols, cache.shapes[i]).reshape(-1, cache.shapes[i][-1])
        return {name: grads[name] for name in self.params}

    def describe(self, image: RgbdImage) -> DescriptorMap:
        out, _ = self.forward(self.prepare(image))
        return DescriptorMap(out[0])

    def copy(self) -> "DescriptorNet":
        net = DescriptorNet(self.config, self.stats, {k: v.copy() for k, v in self.params.items()})
        return net


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    decay_interval: int = 5000
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0 or self.step < 0:
            raise ValueError("lr must be positive and step non-negative")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update in place; lr decays by ``decay`` every ``decay_interval`` steps."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} at step {state.step + 1}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    state.step = t
    if t % state.decay_interval == 0:
        state.lr *= state.decay
    return params


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    net: DescriptorNet
    optimizer: AdamState
    losses: list[float]
    n_strict: list[int]
    seconds: float


PairSource = Callable[[int], tuple]  # k -> (PairSpec, MatchSet)


def replay(records: Sequence) -> PairSource:
    """Cycle through pre-generated ``(PairSpec, MatchSet)`` records."""
    if not records:
        raise ValueError("no pair records to replay")
    return lambda k: records[k % len(records)]


def train(net: DescriptorNet, dataset, pairs: PairSource, steps: int,
          loss_config: LossConfig = LossConfig(), optimizer: AdamState | None = None,
          log_every: int = 0) -> TrainResult:
    """Run ``steps`` Adam updates on pairs ``pairs(0), pairs(1), ...``."""
    optimizer = optimizer or AdamState()
    inputs: dict[tuple[str, str], np.ndarray] = {}

    def load(scene_id: str, image_id: str) -> np.ndarray:
        key = (scene_id, image_id)
        if key not in inputs:
            inputs[key] = net.prepare(dataset.record(scene_id, image_id).image)
        return inputs[key]

    losses, strict = [], []
    start = time.perf_counter()
    for step in range(steps):
        spec, ms = pairs(step)
        xa, xb = load(spec.scene_a, spec.image_a), load(spec.scene_b, spec.image_b)
        if xa.shape == xb.shape:
            out, cache = net.forward(np.stack([xa, xb]))
            terms, ga, gb = loss_and_gradients(out[0], out[1], ms, loss_config)
            _check(terms.total, step)
            grads = net.backward(cache, np.stack([ga, gb]))
        else:
            out_a, cache_a = net.forward(xa)
            out_b, cache_b = net.forward(xb)
            terms, ga, gb = loss_and_gradients(out_a[0], out_b[0], ms, loss_config)
            _check(terms.total, step)
            grads_a = net.backward(cache_a, ga[None])
            grads = {k: v + gb_k for (k, v), gb_k in zip(grads_a.items(), net.backward(cache_b, gb[None]).values())}
        adam_step(net.params, grads, optimizer)
        net.bump_version()
        losses.append(terms.total)
        strict.append(terms.n_strict)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (recent mean %.4f)", step + 1, terms.total,
                     float(np.mean(losses[-log_every:])))
    return TrainResult(net, optimizer, losses, strict, time.perf_counter() - start)


def _check(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(step + 1, value)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(net: DescriptorNet, path: str | Path) -> Path:
    path = Path(path)
    config = json.dumps(net.config.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(config)))
        out.write(config)
        out.write(struct.pack("<I", len(net.stats.mean)))
        out.write(net.stats.mean.astype("<f4").tobytes())
        out.write(net.stats.std.astype("<f4").tobytes())
        out.write(struct.pack("<I", len(net.params)))
        for name, tensor in net.params.items():
            encoded = name.encode("utf-8")
            out.write(struct.pack("<I", len(encoded)) + encoded)
            out.write(struct.pack("<I", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            out.write(np.ascontiguousarray(tensor, "<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> DescriptorNet:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a descriptor checkpoint")
    pos = 4
    version, n = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    doc = json.loads(data[pos:pos + n])
    pos += n
    doc["hidden"] = tuple(doc["hidden"])
    doc["dtype"] = "float32"
    config = DescriptorNetConfig(**doc)
    (c,) = struct.unpack_from("<I", data, pos)
    pos += 4
    mean = np.frombuffer(data, "<f4", c, pos)
    std = np.frombuffer(data, "<f4", c, pos + 4 * c)
    pos += 8 * c
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        params[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    net = DescriptorNet(config, NormalizationStats(mean, std), params)
    expected = DescriptorNet(config, net.stats).params
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in params):
        raise ValueError(f"{path}: parameter layout does not match its config")
    return net
