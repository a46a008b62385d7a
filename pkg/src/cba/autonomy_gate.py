"""Autonomy gate: decides execute-vs-request from confidence and novelty.

Two thresholds guard autonomous execution. The distance threshold flags states
far from every demonstration (novelty); the confidence thresholds flag states
the classifier itself finds ambiguous. Both comparisons are strict: a fresh
learner with no data must always request.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import DOMAIN_SCALER, Action, StateVector, TrainingPoint
from .policy_model import Classification, GmmPolicy, ModelConfig, fit

log = logging.getLogger(__name__)

DEFAULT_DISTANCE_MULTIPLIER = 3.0
DEFAULT_TRAIN_RATIO = 0.7


class ThresholdMode(Enum):
    SINGLE_FIXED = "single_fixed"
    MULTIPLE_ADJUSTABLE = "multiple_adjustable"


class Aggregation(Enum):
    MEAN = "mean"
    MAX = "max"
    MEAN_PLUS_SIGMA = "mean_plus_sigma"


@dataclass(frozen=True)
class ThresholdSet:
    """Gate parameters. sentinel_infinite forces requests (pre-model state);
    all_pass disables gating entirely (corrective-only learning)."""

    tau_dist: float
    mode: ThresholdMode
    tau_conf_fixed: float = 0.0
    tau_conf_by_boundary: Mapping[int, float] = field(default_factory=dict)
    sentinel_infinite: bool = False
    all_pass: bool = False

    @classmethod
    def initial(cls) -> "ThresholdSet":
        """Before any data: confidence bar unreachable, distance bar zero."""
        return cls(tau_dist=0.0, mode=ThresholdMode.SINGLE_FIXED, sentinel_infinite=True)

    @classmethod
    def all_passing(cls) -> "ThresholdSet":
        return cls(
            tau_dist=math.inf, mode=ThresholdMode.MULTIPLE_ADJUSTABLE, all_pass=True
        )

    def to_dict(self) -> dict:
        return {
            "tau_dist": self.tau_dist,
            "mode": self.mode.value,
            "tau_conf_fixed": self.tau_conf_fixed,
            "tau_conf_by_boundary": {
                str(k): v for k, v in sorted(self.tau_conf_by_boundary.items())
            },
            "sentinel_infinite": self.sentinel_infinite,
            "all_pass": self.all_pass,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSet":
        return cls(
            tau_dist=float(d["tau_dist"]),
            mode=ThresholdMode(d["mode"]),
            tau_conf_fixed=float(d["tau_conf_fixed"]),
            tau_conf_by_boundary={int(k): float(v) for k, v in d["tau_conf_by_boundary"].items()},
            sentinel_infinite=bool(d["sentinel_infinite"]),
            all_pass=bool(d["all_pass"]),
        )


@dataclass(frozen=True)
class GateDecision:
    autonomous: bool
    action: Optional[Action] = None
    reason: str = ""

    @classmethod
    def execute(cls, action: Action) -> "GateDecision":
        return cls(True, action)

    @classmethod
    def request(cls, reason: str) -> "GateDecision":
        return cls(False, None, reason)


def nearest_neighbor_distance(features: np.ndarray, x: np.ndarray) -> float:
    """Euclidean distance from x to its nearest row; +inf for an empty set."""
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        return math.inf
    diff = features - np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff))))


def dataset_nn_distances(features: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Each row's distance to its nearest *other* row (self excluded)."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        return np.zeros(0, dtype=np.float64)
    sq = np.einsum("ij,ij->i", features, features)
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = features[start:stop]
        d2 = sq[start:stop][:, None] + sq[None, :] - 2.0 * (block @ features.T)
        np.maximum(d2, 0.0, out=d2)
        idx = np.arange(start, stop)
        d2[np.arange(stop - start), idx] = np.inf
        out[start:stop] = np.sqrt(d2.min(axis=1))
    return out


def compute_distance_threshold(
    features: np.ndarray, multiplier: float = DEFAULT_DISTANCE_MULTIPLIER
) -> float:
    """multiplier times the mean nearest-neighbor distance; 0 below 2 points."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        return 0.0
    return multiplier * float(np.mean(dataset_nn_distances(features)))


@dataclass(frozen=True)
class SplitConfig:
    train_ratio: float = DEFAULT_TRAIN_RATIO
    seed: int = 0
    aggregation: Aggregation = Aggregation.MEAN

    def with_seed(self, seed: int) -> "SplitConfig":
        from dataclasses import replace

        return replace(self, seed=seed)


def aggregate_threshold(confidences: Sequence[float], aggregation: Aggregation) -> float:
    """Collapse the misclassified-point confidences of one boundary."""
    if not confidences:
        return 0.0
    arr = np.asarray(confidences, dtype=np.float64)
    if aggregation is Aggregation.MEAN:
        return float(arr.mean())
    if aggregation is Aggregation.MAX:
        return float(arr.max())
    return float(arr.mean() + arr.std())


def stratified_split_indices(
    labels: Sequence[int], train_ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle and split; every class keeps at least one train point."""
    labels = np.asarray(labels)
    train: list[int] = []
    test: list[int] = []
    for lab in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(idx.shape[0])]
        n_train = max(1, int(round(train_ratio * idx.shape[0])))
        train.extend(idx[:n_train].tolist())
        test.extend(idx[n_train:].tolist())
    return np.array(sorted(train), dtype=np.intp), np.array(sorted(test), dtype=np.intp)


@dataclass(frozen=True)
class ThresholdEstimate:
    """Audit trail of one confidence-threshold computation."""

    by_boundary: dict[int, float]
    split_by_boundary: dict[int, float]
    split_confidences: dict[int, tuple[float, ...]]
    split_model: Optional[GmmPolicy]
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


def compute_confidence_thresholds_detailed(
    dataset: Sequence[TrainingPoint],
    deployed_model: GmmPolicy,
    model_config: ModelConfig,
    split_config: SplitConfig,
) -> ThresholdEstimate:
    """Per-boundary confidence thresholds from a held-out misclassification study.

    A stratified split trains a throwaway model; the mean confidence of the test
    points each split boundary misclassifies becomes that boundary's threshold
    (0 when it misclassifies nothing). Split boundaries then map onto the
    deployed model by nearest component mean within the same class; deployed
    boundaries left unmatched inherit their class's maximum, and a class absent
    from the split model contributes 0.
    """
    zeros = {bid: 0.0 for bid in deployed_model.boundary_ids}
    if len({p.action for p in dataset}) < 2:
        return ThresholdEstimate(zeros, {}, {}, None, (), ())

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((split_config.seed, 0x5EED)))
    )
    labels = [int(p.action) for p in dataset]
    train_idx, test_idx = stratified_split_indices(labels, split_config.train_ratio, rng)
    if test_idx.size == 0:
        return ThresholdEstimate(zeros, {}, {}, None, tuple(train_idx.tolist()), ())

    train_points = [dataset[i] for i in train_idx]
    split_model = fit(
        train_points, model_config.with_seed(split_config.seed), deployed_model.scaler
    )

    confidences: dict[int, list[float]] = {bid: [] for bid in split_model.boundary_ids}
    for i in test_idx:
        p = dataset[i]
        c = split_model.classify(p.state)
        if c.action != p.action:
            confidences[c.boundary_id].append(c.confidence)
    split_thresholds = {
        bid: aggregate_threshold(vals, split_config.aggregation)
        for bid, vals in confidences.items()
    }

    # Correspondence back onto the deployed model's boundaries.
    by_boundary: dict[int, float] = {}
    for cls in deployed_model.classes:
        split_comps = [
            (bid, np.asarray(split_model.boundary_owner(bid)[1].mean))
            for bid in split_model.boundary_ids
            if split_model.boundary_owner(bid)[0] == cls.action
        ]
        assigned: dict[int, list[float]] = {c.boundary_id: [] for c in cls.components}
        if split_comps:
            dep_means = {
                c.boundary_id: np.asarray(c.mean, dtype=np.float64)
                for c in cls.components
            }
            for s_bid, s_mean in split_comps:
                target = min(
                    dep_means,
                    key=lambda dbid: (
                        float(np.linalg.norm(dep_means[dbid] - s_mean)),
                        dbid,
                    ),
                )
                assigned[target].append(split_thresholds[s_bid])
        matched = {
            bid: max(vals) for bid, vals in assigned.items() if vals
        }
        class_max = max(matched.values()) if matched else 0.0
        for comp in cls.components:
            by_boundary[comp.boundary_id] = matched.get(comp.boundary_id, class_max)

    return ThresholdEstimate(
        by_boundary,
        split_thresholds,
        {bid: tuple(vals) for bid, vals in confidences.items()},
        split_model,
        tuple(train_idx.tolist()),
        tuple(test_idx.tolist()),
    )


def compute_confidence_thresholds(
    dataset: Sequence[TrainingPoint],
    deployed_model: GmmPolicy,
    model_config: ModelConfig,
    split_config: SplitConfig,
) -> dict[int, float]:
    return compute_confidence_thresholds_detailed(
        dataset, deployed_model, model_config, split_config
    ).by_boundary


def decide(
    classification: Optional[Classification],
    nn_distance: float,
    thresholds: ThresholdSet,
) -> GateDecision:
    """Autonomous iff confidence strictly exceeds its threshold and the
    nearest-demonstration distance is strictly below the distance threshold."""
    if classification is None or thresholds.sentinel_infinite:
        return GateDecision.request("sentinel")
    if thresholds.all_pass:
        return GateDecision.execute(classification.action)
    if thresholds.mode is ThresholdMode.SINGLE_FIXED:
        tau_conf = thresholds.tau_conf_fixed
    else:
        tau = thresholds.tau_conf_by_boundary.get(classification.boundary_id)
        if tau is None:
            log.warning(
                "no confidence threshold for boundary %d; forcing demonstration",
                classification.boundary_id,
            )
            return GateDecision.request("missing_boundary")
        tau_conf = tau
    if classification.confidence <= tau_conf:
        return GateDecision.request("confidence")
    if not nn_distance < thresholds.tau_dist:
        return GateDecision.request("distance")
    return GateDecision.execute(classification.action)
