"""Frozen desk-scale fixtures shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .confounder_dict import ConfounderDictionary, build_fixed, build_random
from .feature_store import RegionFeatureSet, synth_region_features
from .scm_sim import deconfounded_world, fixture_world, sample_scenes
from .vc_head import PairDataset, TrainConfig, extract_features, train

DESK_CONFIG = TrainConfig(learning_rate=0.05, epochs=20, batch_images=16, sigma=16, seed=0, log_every=10)


@dataclass
class DeskTask:
    world: object
    features: RegionFeatureSet  # confounded training regions
    test_features: RegionFeatureSet  # regions from the deconfounded world
    dictionary: ConfounderDictionary

    @property
    def n_categories(self) -> int:
        return self.world.n_categories


def desk_task(n_scenes: int = 1770, d: int = 16, noise: float = 0.5) -> DeskTask:
    """Just over 5k confounded regions from the shipped training world."""
    world = fixture_world("training_world")
    scenes = sample_scenes(world, n_scenes, seed=100)
    feats = synth_region_features(world, scenes, d=d, noise=noise, seed=7)
    test_scenes = sample_scenes(deconfounded_world(world), 1500, seed=200)
    test = synth_region_features(world, test_scenes, d=d, noise=noise, seed=7, noise_seed=300)
    return DeskTask(world, feats, test, build_fixed(feats, world.n_categories))


def linear_probe_accuracy(train_x, train_y, test_x, test_y, n_classes: int) -> float:
    """Least-squares fit of one-hot labels (with bias), scored by argmax."""
    A = np.hstack([train_x, np.ones((len(train_x), 1))])
    coef = np.linalg.lstsq(A, np.eye(n_classes)[train_y], rcond=None)[0]
    pred = (np.hstack([test_x, np.ones((len(test_x), 1))]) @ coef).argmax(axis=1)
    return float((pred == test_y).mean())


def train_variant(task: DeskTask, config: TrainConfig = DESK_CONFIG, variant: str = "fixed",
                  sample_filter=None):
    dct = task.dictionary
    if variant == "random":
        dct = build_random(task.n_categories, task.features.dim, config.seed)
    elif variant == "expectation_only":
        dct = dct.as_variant("expectation_only")
    elif variant != "fixed":
        raise ValueError(f"unsupported desk variant {variant!r}")
    return train(PairDataset(task.features), dct, config, sample_filter=sample_filter), dct


def probe_comparison(task: DeskTask, config: TrainConfig = DESK_CONFIG) -> dict:
    """Probe accuracy on deconfounded regions for do- vs correlation-trained features."""
    out = {}
    for label, intervene in (("do", True), ("cor", False)):
        params = train_variant(task, replace(config, intervention=intervene))[0].params
        tr = extract_features(task.features, params).features()
        te = extract_features(task.test_features, params).features()
        out[label] = linear_probe_accuracy(tr, task.features.categories, te,
                                           task.test_features.categories, task.n_categories)
    return out
