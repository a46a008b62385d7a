"""Action classifier: one Gaussian mixture per action class.

classify returns the action with the highest class posterior together with a
confidence (that posterior) and the decision boundary that produced it (the
mixture component with the highest responsibility inside the winning class).
Boundary ids are globally unique and index the per-boundary confidence
thresholds maintained by the autonomy gate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import gmm
from .domain import (
    DOMAIN_SCALER,
    N_FEATURES,
    Action,
    FeatureScaler,
    StateVector,
    TrainingPoint,
)


class ModelUnavailableError(RuntimeError):
    """Raised when a model is requested from an empty dataset."""


class UnknownBoundaryError(ValueError):
    """Raised for a boundary id that no fitted component owns."""


@dataclass(frozen=True)
class ModelConfig:
    k_max: int = 8
    cov_floor: float = gmm.DEFAULT_COV_FLOOR
    em_tol: float = gmm.DEFAULT_EM_TOL
    em_max_iter: int = gmm.DEFAULT_EM_MAX_ITER
    seed: int = 0

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class Classification:
    action: Action
    confidence: float
    boundary_id: int


@dataclass(frozen=True)
class GaussianComponent:
    boundary_id: int
    weight: float
    mean: tuple[float, ...]
    covariance: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class ClassMixture:
    action: Action
    prior: float
    components: tuple[GaussianComponent, ...]


class GmmPolicy:
    """Fitted per-class mixtures over normalized features.

    Instances are immutable by convention; evaluation arrays are precomputed
    once at construction.
    """

    def __init__(self, classes: Sequence[ClassMixture], scaler: FeatureScaler):
        if not classes:
            raise ModelUnavailableError("no classes fitted")
        self.classes: tuple[ClassMixture, ...] = tuple(
            sorted(classes, key=lambda c: c.action)
        )
        self.scaler = scaler
        self._log_priors = np.array(
            [np.log(c.prior) for c in self.classes], dtype=np.float64
        )
        self._means = []
        self._covs = []
        self._log_w = []
        self._boundary_ids = []
        owners: dict[int, tuple[int, int]] = {}
        for ci, cls in enumerate(self.classes):
            self._means.append(
                np.array([comp.mean for comp in cls.components], dtype=np.float64)
            )
            self._covs.append(
                np.array([comp.covariance for comp in cls.components], dtype=np.float64)
            )
            self._log_w.append(
                np.log(np.array([comp.weight for comp in cls.components], dtype=np.float64))
            )
            ids = [comp.boundary_id for comp in cls.components]
            self._boundary_ids.append(ids)
            for pj, bid in enumerate(ids):
                if bid in owners:
                    raise ValueError(f"duplicate boundary id {bid}")
                owners[bid] = (ci, pj)
        self._owners = owners

    # -- queries ----------------------------------------------------------

    @property
    def actions(self) -> tuple[Action, ...]:
        return tuple(c.action for c in self.classes)

    @property
    def boundary_ids(self) -> tuple[int, ...]:
        return tuple(bid for ids in self._boundary_ids for bid in ids)

    @property
    def total_components(self) -> int:
        return sum(len(c.components) for c in self.classes)

    def boundary_owner(self, boundary_id: int) -> tuple[Action, GaussianComponent]:
        try:
            ci, pj = self._owners[boundary_id]
        except KeyError:
            raise UnknownBoundaryError(f"no boundary {boundary_id}") from None
        return self.classes[ci].action, self.classes[ci].components[pj]

    def _normalize(self, state: StateVector) -> np.ndarray:
        return self.scaler.transform(state.features())

    def class_log_densities(self, x_norm: np.ndarray) -> np.ndarray:
        """Per-class mixture log density at one normalized point."""
        x = np.asarray(x_norm, dtype=np.float64).reshape(1, N_FEATURES)
        out = np.empty(len(self.classes), dtype=np.float64)
        for ci in range(len(self.classes)):
            log_p = gmm.component_log_densities(x, self._means[ci], self._covs[ci])
            out[ci] = gmm.logsumexp(log_p[0] + self._log_w[ci])
        return out

    def class_density(self, action: Action, x_norm: np.ndarray) -> float:
        """Mixture density (not log) of one class; used by density audits."""
        ci = self.actions.index(action)
        x = np.asarray(x_norm, dtype=np.float64).reshape(1, N_FEATURES)
        log_p = gmm.component_log_densities(x, self._means[ci], self._covs[ci])
        return float(np.exp(gmm.logsumexp(log_p[0] + self._log_w[ci])))

    def log_posteriors(self, state: StateVector) -> np.ndarray:
        log_joint = self.class_log_densities(self._normalize(state)) + self._log_priors
        return log_joint - gmm.logsumexp(log_joint)

    def classify(self, state: StateVector) -> Classification:
        x = self._normalize(state)
        log_joint = self.class_log_densities(x) + self._log_priors
        log_post = log_joint - gmm.logsumexp(log_joint)
        # argmax takes the first maximum: class order is Action order, so exact
        # ties resolve to the smaller action.
        ci = int(np.argmax(log_post))
        x2 = x.reshape(1, N_FEATURES)
        resp = (
            gmm.component_log_densities(x2, self._means[ci], self._covs[ci])[0]
            + self._log_w[ci]
        )
        pj = int(np.argmax(resp))  # first max: lowest boundary id within the class
        return Classification(
            action=self.classes[ci].action,
            confidence=float(np.exp(log_post[ci])),
            boundary_id=self._boundary_ids[ci][pj],
        )

    def boundary_confidence(self, state: StateVector, boundary_id: int) -> float:
        """Class posterior of the class owning the boundary."""
        if boundary_id not in self._owners:
            raise UnknownBoundaryError(f"no boundary {boundary_id}")
        ci, _ = self._owners[boundary_id]
        return float(np.exp(self.log_posteriors(state)[ci]))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": "gmm-policy/1",
            "scaler": self.scaler.to_dict(),
            "classes": [
                {
                    "action": cls.action.wire,
                    "prior": cls.prior,
                    "components": [
                        {
                            "boundary_id": comp.boundary_id,
                            "weight": comp.weight,
                            "mean": list(comp.mean),
                            "covariance": [list(row) for row in comp.covariance],
                        }
                        for comp in cls.components
                    ],
                }
                for cls in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmPolicy":
        if d.get("schema") != "gmm-policy/1":
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        classes = []
        for c in d["classes"]:
            comps = tuple(
                GaussianComponent(
                    boundary_id=int(comp["boundary_id"]),
                    weight=float(comp["weight"]),
                    mean=tuple(float(v) for v in comp["mean"]),
                    covariance=tuple(
                        tuple(float(v) for v in row) for row in comp["covariance"]
                    ),
                )
                for comp in c["components"]
            )
            classes.append(
                ClassMixture(Action.from_wire(c["action"]), float(c["prior"]), comps)
            )
        return cls(tuple(classes), FeatureScaler.from_dict(d["scaler"]))

    def params_equal(self, other: "GmmPolicy") -> bool:
        if self.to_dict() == other.to_dict():
            return True
        return False


def fit(dataset: Sequence[TrainingPoint], config: ModelConfig,
        scaler: FeatureScaler = DOMAIN_SCALER) -> GmmPolicy:
    """Fit one mixture per action class present in the dataset.

    Per class, k is chosen by BIC over 1..k_max; class priors are empirical
    frequencies; boundary ids are assigned sequentially in (action, component)
    order. Deterministic given (dataset, config.seed).
    """
    if not dataset:
        raise ModelUnavailableError("empty dataset")
    by_action: dict[Action, list[TrainingPoint]] = {}
    for p in dataset:
        by_action.setdefault(p.action, []).append(p)

    classes: list[ClassMixture] = []
    total = len(dataset)
    next_boundary = 0
    for action in sorted(by_action):
        pts = by_action[action]
        X = scaler.transform_many(
            np.array([p.state.features() for p in pts], dtype=np.float64)
        )
        res = gmm.fit_best_k(
            X,
            config.k_max,
            seed_parts=(config.seed, int(action)),
            cov_floor=config.cov_floor,
            tol=config.em_tol,
            max_iter=config.em_max_iter,
        )
        comps = []
        for j in range(res.k):
            comps.append(
                GaussianComponent(
                    boundary_id=next_boundary,
                    weight=float(res.weights[j]),
                    mean=tuple(float(v) for v in res.means[j]),
                    covariance=tuple(
                        tuple(float(v) for v in row) for row in res.covariances[j]
                    ),
                )
            )
            next_boundary += 1
        classes.append(ClassMixture(action, len(pts) / total, tuple(comps)))
    return GmmPolicy(tuple(classes), scaler)
