"""Pixelwise contrastive loss over matches and margin-hinged non-matches.

``L = mean_matches ||d_a - d_b||^2 + (1 / N_strict) * sum_nonmatches max(0, M - ||d_a - d_b||)^2``

where ``N_strict`` counts the non-match terms that are strictly positive. The
count is a constant of the forward pass: no gradient flows through it.
Descriptors are read at the nearest pixel of each (real) coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from objmatch.types import DescriptorMap, MatchSet, pixel_index


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5

    def __post_init__(self) -> None:
        if not self.margin > 0:
            raise ValueError("margin must be positive")


@dataclass(frozen=True)
class LossTerms:
    total: float
    match: float
    non_match: float
    n_strict: int


def _values(desc) -> np.ndarray:
    return desc.values if isinstance(desc, DescriptorMap) else np.asarray(desc)


def _gather(values: np.ndarray, coords: np.ndarray):
    idx = pixel_index(coords)
    return values[idx[:, 1], idx[:, 0]], idx


def match_loss(desc_a, desc_b, match_a: np.ndarray, match_b: np.ndarray) -> float:
    if len(match_a) == 0:
        raise ValueError("match list is empty")
    da, _ = _gather(_values(desc_a), match_a)
    db, _ = _gather(_values(desc_b), match_b)
    return float(np.sum((da - db) ** 2, axis=1).mean())


def non_match_loss(desc_a, desc_b, non_a: np.ndarray, non_b: np.ndarray,
                   config: LossConfig = LossConfig()) -> tuple[float, int]:
    """Return ``(loss, N_strict)``; the loss is 0 when no term is active."""
    if len(non_a) == 0:
        raise ValueError("non-match list is empty")
    da, _ = _gather(_values(desc_a), non_a)
    db, _ = _gather(_values(desc_b), non_b)
    dist = np.linalg.norm(da - db, axis=1)
    hinge = np.maximum(0.0, config.margin - dist)
    n_strict = int(np.count_nonzero(hinge > 0))
    if n_strict == 0:
        return 0.0, 0
    return float(np.sum(hinge ** 2) / n_strict), n_strict


def total_loss(desc_a, desc_b, match_set: MatchSet, config: LossConfig = LossConfig()) -> float:
    lm = match_loss(desc_a, desc_b, match_set.match_a, match_set.match_b)
    lnm, _ = non_match_loss(desc_a, desc_b, match_set.non_match_a, match_set.non_match_b, config)
    return lm + lnm


def loss_and_gradients(desc_a, desc_b, match_set: MatchSet, config: LossConfig = LossConfig()):
    """Forward and analytic backward in one pass: ``(LossTerms, grad_a, grad_b)``.

    Gradients have the descriptor maps' shape and are non-zero only at pixels
    referenced by the match set; repeated pixels accumulate.
    """
    va, vb = _values(desc_a), _values(desc_b)
    if match_set.n_matches == 0:
        raise ValueError("match list is empty")
    if match_set.n_non_matches == 0:
        raise ValueError("non-match list is empty")
    grad_a = np.zeros_like(va)
    grad_b = np.zeros_like(vb)

    da, ia = _gather(va, match_set.match_a)
    db, ib = _gather(vb, match_set.match_b)
    diff = da - db
    lm = float(np.sum(diff ** 2, axis=1).mean())
    g = (2.0 / len(diff)) * diff
    np.add.at(grad_a, (ia[:, 1], ia[:, 0]), g)
    np.add.at(grad_b, (ib[:, 1], ib[:, 0]), -g)

    na, ja = _gather(va, match_set.non_match_a)
    nb, jb = _gather(vb, match_set.non_match_b)
    ndiff = na - nb
    dist = np.linalg.norm(ndiff, axis=1)
    hinge = np.maximum(0.0, config.margin - dist)
    active = hinge > 0
    n_strict = int(np.count_nonzero(active))
    lnm = 0.0
    if n_strict:
        lnm = float(np.sum(hinge ** 2) / n_strict)
        # identical descriptors: direction undefined, contribute nothing
        ok = active & (dist > 0)
        coef = np.zeros_like(dist)
        coef[ok] = (2.0 / n_strict) * hinge[ok] / dist[ok]
        gn = -coef[:, None] * ndiff
        np.add.at(grad_a, (ja[ok, 1], ja[ok, 0]), gn[ok])
        np.add.at(grad_b, (jb[ok, 1], jb[ok, 0]), -gn[ok])
    return LossTerms(lm + lnm, lm, lnm, n_strict), grad_a, grad_b


def loss_gradients(desc_a, desc_b, match_set: MatchSet, config: LossConfig = LossConfig()):
    _, grad_a, grad_b = loss_and_gradients(desc_a, desc_b, match_set, config)
    return grad_a, grad_b
