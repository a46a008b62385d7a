import math

import numpy as np
import pytest

from cba.domain import Action, DemoSource, SENSE_RANGE, StateVector, TrainingPoint


def make_state(lane=2, left=25.0, center=25.0, right=25.0) -> StateVector:
    return StateVector(lane, left, center, right)


def clip_feature(v: float) -> float:
    return max(-SENSE_RANGE, min(SENSE_RANGE, v))


def raw_from_normalized(row) -> StateVector:
    """Map a normalized feature row back into a valid StateVector."""
    lane = int(round(min(max(row[0], 0.0), 1.0) * 4))
    dists = [clip_feature(v * 50.0 - 25.0) for v in row[1:]]
    return StateVector(lane, *dists)


def gaussian_class_points(
    rng: np.random.Generator,
    mean_norm,
    sigma_norm,
    n: int,
    action: Action,
    start_seq: int = 0,
) -> list[TrainingPoint]:
    """Sample n points around a normalized-space mean and label them."""
    mean = np.asarray(mean_norm, dtype=np.float64)
    pts = []
    for i in range(n):
        row = mean + rng.normal(0.0, sigma_norm, size=4)
        pts.append(
            TrainingPoint(raw_from_normalized(row), action, start_seq + i, DemoSource.INIT_SESSION)
        )
    return pts


def direct_gaussian_pdf(x, mean, cov) -> float:
    """Independent density oracle: explicit inverse and determinant."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = x.shape[0]
    diff = x - mean
    inv = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    expo = -0.5 * float(diff @ inv @ diff)
    return float(math.exp(expo) / math.sqrt((2.0 * math.pi) ** d * det))


def direct_mixture_pdf(x, weights, means, covs) -> float:
    return float(
        sum(w * direct_gaussian_pdf(x, m, c) for w, m, c in zip(weights, means, covs))
    )


def direct_gaussian_logpdf(x, mean, cov) -> float:
    """Log-space density oracle via explicit inverse and slogdet."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = x.shape[0]
    diff = x - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (d * math.log(2.0 * math.pi) + logdet + diff @ inv @ diff))


def direct_mixture_logpdf(x, weights, means, covs) -> float:
    logs = [
        math.log(w) + direct_gaussian_logpdf(x, m, c)
        for w, m, c in zip(weights, means, covs)
    ]
    top = max(logs)
    return top + math.log(sum(math.exp(v - top) for v in logs))


def direct_log_posteriors(model, state) -> np.ndarray:
    """Posterior oracle over a GmmPolicy's classes, computed independently."""
    x = model.scaler.transform(state.features())
    log_joints = []
    for cls in model.classes:
        weights = [c.weight for c in cls.components]
        means = [c.mean for c in cls.components]
        covs = [c.covariance for c in cls.components]
        log_joints.append(math.log(cls.prior) + direct_mixture_logpdf(x, weights, means, covs))
    arr = np.asarray(log_joints)
    top = arr.max()
    return arr - (top + math.log(np.exp(arr - top).sum()))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
