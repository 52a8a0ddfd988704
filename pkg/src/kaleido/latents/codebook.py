"""Vector-quantization codebook via k-means.

Hand-rolled Lloyd iterations so the per-iteration objective is exposed
and its monotone decrease can be asserted, and so assignments are
deterministic (ties to the lowest centroid index) across platforms.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ..errors import ContractError
from ..validation import as_float_array, substream


def _pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clamp tiny negatives from cancellation
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * x @ c.T
        + np.sum(c**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


class KMeansCodebook(BaseEstimator):
    """k-means quantizer with k-means++ seeding.

    transform returns nearest-centroid ids (ties to the lowest index);
    inverse_transform returns centroid rows. objective_history_ records
    the mean squared quantization error after every update and must be
    non-increasing.
    """

    def __init__(self, n_codes: int = 16, max_iter: int = 100, seed: int = 0):
        self.n_codes = n_codes
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        X = as_float_array(X, "X", ndim=2)
        if self.n_codes < 1:
            raise ContractError(f"n_codes must be >= 1, got {self.n_codes}")
        distinct = np.unique(X, axis=0)
        if distinct.shape[0] < self.n_codes:
            raise ContractError(
                f"n_codes={self.n_codes} exceeds {distinct.shape[0]} distinct samples")
        rng = substream(self.seed, "codebook")
        centroids = self._seed_centroids(X, rng)
        history = []
        assign = None
        for _ in range(self.max_iter):
            d2 = _pairwise_sq_dists(X, centroids)
            new_assign = np.argmin(d2, axis=1)
            history.append(float(np.mean(d2[np.arange(X.shape[0]), new_assign])))
            if len(history) >= 2 and history[-1] > history[-2] + 1e-12:
                raise ContractError("k-means objective increased")
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for k in range(self.n_codes):
                members = X[assign == k]
                if members.shape[0]:
                    centroids[k] = members.mean(axis=0)
                else:
                    # re-seed an empty cluster at the worst-quantized point
                    worst = int(np.argmax(d2[np.arange(X.shape[0]), assign]))
                    centroids[k] = X[worst]
        self.centroids_ = centroids
        self.objective_history_ = history
        return self

    def _seed_centroids(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        centroids = np.empty((self.n_codes, X.shape[1]))
        centroids[0] = X[int(rng.integers(n))]
        closest = _pairwise_sq_dists(X, centroids[:1]).reshape(-1)
        for k in range(1, self.n_codes):
            total = closest.sum()
            if total <= 0:
                centroids[k] = X[int(rng.integers(n))]
            else:
                centroids[k] = X[int(rng.choice(n, p=closest / total))]
            closest = np.minimum(closest, _pairwise_sq_dists(X, centroids[k:k + 1]).reshape(-1))
        return centroids

    def transform(self, X) -> np.ndarray:
        X = as_float_array(X, "X", ndim=2)
        if X.shape[1] != self.centroids_.shape[1]:
            raise ContractError(
                f"input dim {X.shape[1]} != codebook dim {self.centroids_.shape[1]}")
        return np.argmin(_pairwise_sq_dists(X, self.centroids_), axis=1)

    def inverse_transform(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        if np.any(ids < 0) or np.any(ids >= self.centroids_.shape[0]):
            raise ContractError(f"codebook id outside [0, {self.centroids_.shape[0]})")
        return self.centroids_[ids]

    def to_jsonable(self) -> dict:
        return {
            "n_codes": self.n_codes,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "centroids": [row.tolist() for row in self.centroids_],
        }

    @classmethod
    def from_jsonable(cls, blob: dict) -> "KMeansCodebook":
        model = cls(n_codes=blob["n_codes"], max_iter=blob["max_iter"], seed=blob["seed"])
        model.centroids_ = np.array(blob["centroids"])
        model.objective_history_ = []
        return model


def build_codebook(samples, k: int, seed: int) -> KMeansCodebook:
    """Fit a k-entry codebook on sample rows, deterministic given seed."""
    return KMeansCodebook(n_codes=k, seed=seed).fit(samples)
