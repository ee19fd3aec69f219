"""Desk-scale train/evaluate runs shared by the acceptance suite and the CLI demo.

Training scenes and held-out evaluation scenes come from disjoint seed ranges.
Scenes are generated in memory; nothing touches disk unless asked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from objmatch.correspond import ALL_PAIRINGS, Dataset, PairingType, PairSampler, SamplingConfig
from objmatch.descriptor import DescriptorNet, DescriptorNetConfig, NormalizationStats, TrainResult, train
from objmatch.evaluate import EvalReport, evaluate_pairs, held_out_pairs
from objmatch.loss import LossConfig
from objmatch.scenegen import SceneGenConfig, generate_scene, scene_name, scene_seed_for, with_domain
from objmatch.types import DomainTag

log = logging.getLogger(__name__)

EVAL_SCENE_OFFSET = 10_000


@dataclass(frozen=True)
class DeskConfig:
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)
    train_scenes: int = 12
    eval_scenes: int = 3
    net: DescriptorNetConfig = field(default_factory=lambda: DescriptorNetConfig(dim=3))
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    steps: int = 2000
    pairing_types: tuple[PairingType, ...] = ALL_PAIRINGS
    eval_pairs: int = 50
    eval_queries: int = 1000
    stats_images: int = 5
    seed: int = 0


def build_scenes(config: SceneGenConfig, count: int, offset: int = 0) -> list:
    """``count`` sim and ``count`` pseudo-real scenes as in-memory :class:`Scene` objects."""
    out = []
    for domain in (DomainTag.SIM, DomainTag.PSEUDO_REAL):
        cfg = with_domain(config, domain)
        for k in range(offset, offset + count):
            out.append(generate_scene(cfg, scene_seed_for(cfg, k), scene_name(cfg, k)).as_scene())
    return out


def train_dataset(config: DeskConfig) -> Dataset:
    return Dataset(build_scenes(config.scenes, config.train_scenes))


def eval_dataset(config: DeskConfig, texture_randomization: float | None = None) -> Dataset:
    scenes = config.scenes
    if texture_randomization is not None:
        scenes = replace(scenes, texture_randomization=texture_randomization)
    return Dataset(build_scenes(scenes, config.eval_scenes, EVAL_SCENE_OFFSET))


def dataset_stats(dataset: Dataset, input_mode: str, per_scene: int = 5) -> NormalizationStats:
    images = [dataset.record(s, i).image for s in sorted(dataset.scenes) for i in dataset.image_ids(s)[:per_scene]]
    return NormalizationStats.from_images(images, input_mode)


def init_net(config: DeskConfig, dataset: Dataset) -> DescriptorNet:
    stats = dataset_stats(dataset, config.net.input_mode, config.stats_images)
    return DescriptorNet(replace(config.net, seed=config.seed), stats)


def train_desk(config: DeskConfig, dataset: Dataset) -> TrainResult:
    net = init_net(config, dataset)
    sampler = PairSampler(dataset, config.sampling, config.seed, tuple(config.pairing_types))
    return train(net, dataset, sampler.record, config.steps, config.loss)


def cross_domain_pairs(config: DeskConfig, dataset: Dataset, seed: int = 0):
    return held_out_pairs(dataset, config.eval_pairs, PairingType.SIM_REAL, seed, config.sampling.same_scene_prob)


def evaluate_desk(net: DescriptorNet, config: DeskConfig, dataset: Dataset, pairs: Sequence | None = None,
                  seed: int = 0) -> EvalReport:
    pairs = pairs if pairs is not None else cross_domain_pairs(config, dataset, seed)
    echo = {
        "dim": net.config.dim,
        "input_mode": net.config.input_mode,
        "texture_randomization": config.scenes.texture_randomization,
        "steps": config.steps,
        "seed": config.seed,
    }
    return evaluate_pairs(net, dataset, pairs, config.eval_queries, seed, config.sampling, echo)
