"""Heatmaps, match overlays and principal-component colorizations of descriptor maps."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from objmatch.evaluate import best_match, distance_map
from objmatch.sceneio import encode_ppm

log = logging.getLogger(__name__)

HEATMAP_ALPHA = 0.6
MATCH_COLOR = (0, 220, 0)
NON_MATCH_COLOR = (230, 0, 0)
PREDICTION_COLOR = (255, 230, 0)
MARK_COLOR = (255, 255, 255)


def _colormap() -> np.ndarray:
    """256 entries, piecewise linear through blue, cyan, yellow, red."""
    anchors = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], np.float64)
    t = np.linspace(0.0, 1.0, 256)
    at = np.linspace(0.0, 1.0, len(anchors))
    return np.stack([np.interp(t, at, anchors[:, c]) for c in range(3)], axis=1).round().astype(np.uint8)


COLORMAP = _colormap()


def heat_values(query: np.ndarray, target) -> np.ndarray:
    """Per-pixel match quality in [0, 1]; 1 is the closest descriptor. A constant map is all 0."""
    dist = np.sqrt(distance_map(query, target))
    lo, hi = dist.min(), dist.max()
    if hi - lo <= 0:
        return np.zeros_like(dist)
    return 1.0 - (dist - lo) / (hi - lo)


def render_heatmap(query: np.ndarray, target, target_rgb: np.ndarray) -> np.ndarray:
    """Blend the colormapped heat over ``target_rgb`` and mark the best match in white."""
    heat = heat_values(query, target)
    if heat.shape != target_rgb.shape[:2]:
        raise ValueError("descriptor map and rgb image differ in size")
    color = COLORMAP[np.round(heat * 255).astype(np.int64)].astype(np.float64)
    out = HEATMAP_ALPHA * color + (1 - HEATMAP_ALPHA) * target_rgb.astype(np.float64)
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    col, row = best_match(query, target)
    out[row, col] = MARK_COLOR
    return out


def draw_segment(canvas: np.ndarray, start, end, color) -> None:
    """Set every pixel the segment from ``start`` to ``end`` (real pixel coords) passes through."""
    start, end = np.asarray(start, np.float64), np.asarray(end, np.float64)
    steps = int(np.ceil(np.abs(end - start).max() * 2)) + 1
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    pts = np.floor(start + t * (end - start)).astype(np.int64)
    h, w = canvas.shape[:2]
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    canvas[pts[ok, 1], pts[ok, 0]] = color


def render_matches(rgb_a: np.ndarray, rgb_b: np.ndarray, match_a=(), match_b=(), non_a=(), non_b=(),
                   predicted: np.ndarray | None = None) -> np.ndarray:
    """A and B side by side; green matches, red non-matches, yellow from match in A to prediction in B."""
    ha, wa = rgb_a.shape[:2]
    hb, wb = rgb_b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb, 3), np.uint8)
    canvas[:ha, :wa] = rgb_a
    canvas[:hb, wa:] = rgb_b
    shift = np.array([wa, 0.0])
    for a, b in zip(np.reshape(non_a, (-1, 2)), np.reshape(non_b, (-1, 2))):
        draw_segment(canvas, a, b + shift, NON_MATCH_COLOR)
    for a, b in zip(np.reshape(match_a, (-1, 2)), np.reshape(match_b, (-1, 2))):
        draw_segment(canvas, a, b + shift, MATCH_COLOR)
    if predicted is not None:
        for a, p in zip(np.reshape(match_a, (-1, 2)), np.reshape(predicted, (-1, 2))):
            draw_segment(canvas, a, p + shift, PREDICTION_COLOR)
    return canvas


def _power_iteration(work: np.ndarray, done: np.ndarray, v: np.ndarray, iterations: int, tol: float,
                     floor: float) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of ``work`` restricted to the complement of the rows of ``done``."""
    v = v - done.T @ (done @ v)
    norm = np.linalg.norm(v)
    if norm <= 0:
        return v, 0.0
    v, lam = v / norm, 0.0
    for _ in range(iterations):
        w = work @ v
        w -= done.T @ (done @ w)
        norm = np.linalg.norm(w)
        if norm <= floor:
            return v, 0.0
        w /= norm
        converged = np.linalg.norm(w - v) < tol
        v, lam = w, norm
        if converged:
            break
    return v, lam


def principal_components(samples: np.ndarray, k: int = 3, iterations: int = 1000,
                         tol: float = 1e-12, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` covariance eigenvectors by power iteration with deflation.

    Each component is iterated from the coordinate axis with the largest
    remaining variance and from a random start; the larger eigenvalue wins, the
    axis start on ties, so degenerate (isotropic) spectra keep axis-aligned
    components. Returns ``(mean, basis (k, D), eigenvalues)``. Components
    beyond the rank of the covariance are zero rows with eigenvalue 0.
    """
    x = np.asarray(samples, np.float64)
    if len(x) < x.shape[1]:
        raise ValueError(f"need at least {x.shape[1]} samples, got {len(x)}")
    d = x.shape[1]
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(d, d)
    floor = 1e-12 * max(np.trace(cov), 1e-300)
    rng = np.random.default_rng(seed)
    basis = np.zeros((k, d))
    values = np.zeros(k)
    work = cov.copy()
    for c in range(min(k, d)):
        done = basis[:c]
        axis = np.eye(d)[int(np.argmax(np.diag(work)))]
        v, lam = _power_iteration(work, done, axis, iterations, tol, floor)
        v2, lam2 = _power_iteration(work, done, rng.standard_normal(d), iterations, tol, floor)
        if lam2 > lam * (1 + 1e-9) + floor:
            v, lam = v2, lam2
        if lam == 0.0:
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        basis[c], values[c] = v, lam
        work -= lam * np.outer(v, v)
    missing = int(np.sum(values <= 0))
    if missing:
        log.warning("covariance has rank %d < %d; padding with zero components", k - missing, k)
    return mean, basis, values


def pca_colorize(maps: Sequence, masks: Sequence[np.ndarray] | None = None,
                 samples_per_image: int = 2000, seed: int = 0) -> list[np.ndarray]:
    """One shared 3-component basis for all maps; each component min-max scaled to bytes over the batch."""
    values = [m.values if hasattr(m, "values") else np.asarray(m) for m in maps]
    rng = np.random.default_rng(seed)
    pool = []
    for i, v in enumerate(values):
        flat = v.reshape(-1, v.shape[2])
        if masks is not None:
            flat = flat[np.asarray(masks[i]).reshape(-1) >= 0]
        if len(flat) > samples_per_image:
            flat = flat[np.sort(rng.choice(len(flat), samples_per_image, replace=False))]
        pool.append(flat)
    mean, basis, _ = principal_components(np.concatenate(pool), seed=seed)
    proj = [(v.reshape(-1, v.shape[2]) - mean) @ basis.T for v in values]
    lo = np.min([p.min(axis=0) for p in proj], axis=0)
    hi = np.max([p.max(axis=0) for p in proj], axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return [np.clip(np.round((p - lo) / span * 255), 0, 255).astype(np.uint8).reshape(v.shape[0], v.shape[1], 3)
            for p, v in zip(proj, values)]


def write_image(path: str | Path, rgb: np.ndarray) -> Path:
    """PPM for ``.ppm``, PNG (via Pillow) for anything else."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(rgb))
    else:
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(rgb, np.uint8), "RGB").save(path, format="PNG")
    return path
