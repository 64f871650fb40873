"""Per-class Gaussian mixtures over classification logits with likelihood floors."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

log = logging.getLogger(__name__)


@dataclass
class GaussianMixturePerClass:
    class_id: int
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, D)
    covariances: np.ndarray  # (C, D, D)
    theta_like: float = -np.inf
    sample_count: int = 0
    seed: int = 0

    def log_likelihood(self, x) -> np.ndarray | float:
        """Log-density of one logit vector (D,) or a batch (N, D)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        parts = np.stack(
            [
                np.log(w) + multivariate_normal(mean=m, cov=c, allow_singular=False).logpdf(xs)
                for w, m, c in zip(self.weights, self.means, self.covariances)
            ],
            axis=0,
        ).reshape(len(self.weights), len(xs))
        out = logsumexp(parts, axis=0)
        return float(out[0]) if single else out

    def responsibilities(self, x) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
        parts = np.stack(
            [np.log(w) + multivariate_normal(mean=m, cov=c).logpdf(xs) for w, m, c in
             zip(self.weights, self.means, self.covariances)],
            axis=1,
        ).reshape(len(xs), len(self.weights))
        return np.exp(parts - logsumexp(parts, axis=1, keepdims=True))

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "theta_like": self.theta_like,
            "sample_count": self.sample_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixturePerClass":
        return cls(
            class_id=int(d["class_id"]),
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            covariances=np.asarray(d["covariances"], dtype=np.float64),
            theta_like=float(d["theta_like"]),
            sample_count=int(d["sample_count"]),
            seed=int(d["seed"]),
        )


@dataclass
class GmmStore:
    models: dict[int, GaussianMixturePerClass] = field(default_factory=dict)
    # class id -> reason the class has no mixture (the mixture relabel is skipped for it)
    bypassed: dict[int, str] = field(default_factory=dict)

    def get(self, class_id: int) -> GaussianMixturePerClass | None:
        return self.models.get(class_id)

    def covers(self) -> set[int]:
        return set(self.models) | set(self.bypassed)

    def save(self, path) -> None:
        doc = {
            "models": [m.to_dict() for m in self.models.values()],
            "bypassed": {str(k): v for k, v in self.bypassed.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "GmmStore":
        doc = json.loads(Path(path).read_text())
        models = {int(d["class_id"]): GaussianMixturePerClass.from_dict(d) for d in doc["models"]}
        return cls(models, {int(k): v for k, v in doc.get("bypassed", {}).items()})


def fit_class_gmm(
    class_id: int, samples: np.ndarray, components: int = 1, seed: int = 0, reg_covar: float = 1e-6
) -> GaussianMixturePerClass:
    x = np.asarray(samples, dtype=np.float64)
    n_distinct = len(np.unique(x, axis=0))
    k = max(1, min(components, n_distinct))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gm = GaussianMixture(
            n_components=k, covariance_type="full", reg_covar=reg_covar, random_state=seed, max_iter=200
        ).fit(x)
    model = GaussianMixturePerClass(
        class_id=class_id,
        weights=gm.weights_.copy(),
        means=gm.means_.copy(),
        covariances=gm.covariances_.copy(),
        sample_count=len(x),
        seed=seed,
    )
    model.theta_like = float(np.min(model.log_likelihood(x)))
    return model


def fit_gmms(
    per_class_logits: Mapping[int, np.ndarray],
    components: int = 1,
    min_samples: int = 10,
    seed: int = 0,
    reg_covar: float = 1e-6,
) -> GmmStore:
    """Fit one mixture per class; the likelihood floor is the lowest training log-density."""
    store = GmmStore()
    for cid in sorted(per_class_logits):
        samples = np.asarray(per_class_logits[cid], dtype=np.float64)
        if len(samples) < max(min_samples, 1):
            reason = f"{len(samples)} samples < minimum {min_samples}"
            log.warning("class %s bypasses likelihood correction: %s", cid, reason)
            store.bypassed[cid] = reason
            continue
        store.models[cid] = fit_class_gmm(cid, samples, components, seed, reg_covar)
    return store
