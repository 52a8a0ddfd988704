"""Diversity and quality metrics over generated sample sets.

All metrics are pure, permutation-invariant functions computed exactly
(O(n^2) distances, eigen-decomposition square roots); nothing here is
stochastic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import GmmSpec, assign_component
from .errors import ContractError
from .latents.codecs import (
    DEFAULT_POSITION_BINS,
    DEFAULT_THETA_BINS,
    COORD_RANGE,
    THETA_RANGE,
    decode_bbox,
    decode_blob,
    split_combined,
)
from .latents.vocab import LatentSequence
from .validation import as_float_array

logger = logging.getLogger(__name__)

MAHALANOBIS_GATE = 3.0   # confident-assignment radius for coverage counting
UNASSIGNED = "_unassigned"

FRECHET_FLOOR = -1e-9
FRECHET_JITTER = 1e-6

VOKEN_AGREEMENT = 0.75


def mode_coverage(x: np.ndarray, spec: GmmSpec, min_count: int = 10,
                  class_id: str | None = None) -> tuple[float, dict[str, int]]:
    """Fraction of modes receiving at least min_count confident samples.

    A sample counts only when its Mahalanobis distance to the winning
    component is <= 3; others land in the '_unassigned' bucket so the
    returned counts always sum to the sample total. The denominator is
    the mode set of the conditioned class (all modes when class_id is
    None).
    """
    if min_count < 1:
        raise ContractError(f"min_count must be >= 1, got {min_count}")
    x = as_float_array(x, "x", ndim=2)
    if x.shape[0] == 0:
        raise ContractError("empty sample set")
    eligible = (spec.modes_of(class_id) if class_id is not None else spec.mode_ids())
    counts = {mode: 0 for mode in spec.mode_ids()}
    counts[UNASSIGNED] = 0
    winners = assign_component(x, spec)
    for comp in np.unique(winners):
        rows = np.nonzero(winners == comp)[0]
        dist = spec.mahalanobis(x[rows], int(comp))
        confident = int(np.sum(dist <= MAHALANOBIS_GATE))
        counts[spec.components[int(comp)].mode_id] += confident
        counts[UNASSIGNED] += rows.size - confident
    covered = sum(1 for mode in eligible if counts[mode] >= min_count)
    return covered / len(eligible), counts


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance to the k-th nearest neighbor within x, self excluded."""
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * x @ x.T
        + np.sum(x**2, axis=1)[None, :]
    )
    np.fill_diagonal(d2, np.inf)
    d2 = np.maximum(d2, 0.0)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sqrt(kth)


def _fraction_covered(queries: np.ndarray, support: np.ndarray, radii: np.ndarray) -> float:
    d2 = (
        np.sum(queries**2, axis=1)[:, None]
        - 2.0 * queries @ support.T
        + np.sum(support**2, axis=1)[None, :]
    )
    d2 = np.maximum(d2, 0.0)
    inside = d2 <= (radii**2)[None, :]
    return float(np.mean(inside.any(axis=1)))


def knn_recall_precision(real: np.ndarray, gen: np.ndarray, k: int = 3,
                         ) -> tuple[float, float]:
    """k-NN manifold recall and precision.

    recall: fraction of real points inside the union of balls around
    generated points with per-point k-th-neighbor radii; precision is
    the symmetric quantity. Exact O(n^2) distances.
    """
    real = as_float_array(real, "real", ndim=2)
    gen = as_float_array(gen, "gen", ndim=2)
    if real.shape[0] == 0 or gen.shape[0] == 0:
        raise ContractError("both sample sets must be non-empty")
    if not 1 <= k < min(real.shape[0], gen.shape[0]):
        raise ContractError(f"k={k} out of range for set sizes "
                            f"{real.shape[0]}, {gen.shape[0]}")
    recall = _fraction_covered(real, gen, _knn_radii(gen, k))
    precision = _fraction_covered(gen, real, _knn_radii(real, k))
    return recall, precision


def frechet_distance(real: np.ndarray, gen: np.ndarray) -> float:
    """Squared Frechet distance between Gaussian moment fits in raw data
    space: ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}).

    Near-singular covariances get a 1e-6 diagonal jitter (logged); tiny
    negative totals from rounding are floored at -1e-9 and clipped to 0.
    """
    real = as_float_array(real, "real", ndim=2)
    gen = as_float_array(gen, "gen", ndim=2)
    d = real.shape[1]
    if gen.shape[1] != d:
        raise ContractError(f"dimension mismatch: {d} vs {gen.shape[1]}")
    if real.shape[0] <= d or gen.shape[0] <= d:
        raise ContractError("each set must hold more samples than dimensions")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    cov_r = np.cov(real, rowvar=False).reshape(d, d)
    cov_g = np.cov(gen, rowvar=False).reshape(d, d)
    if min(float(np.linalg.eigvalsh(cov_r)[0]), float(np.linalg.eigvalsh(cov_g)[0])) < 1e-10:
        logger.warning("near-singular covariance; applying %g diagonal jitter", FRECHET_JITTER)
        cov_r = cov_r + FRECHET_JITTER * np.eye(d)
        cov_g = cov_g + FRECHET_JITTER * np.eye(d)
    evals_r, evecs_r = np.linalg.eigh(cov_r)
    sqrt_r = (evecs_r * np.sqrt(np.clip(evals_r, 0.0, None))) @ evecs_r.T
    inner = sqrt_r @ cov_g @ sqrt_r
    inner = 0.5 * (inner + inner.T)
    cross = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None))))
    total = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * cross)
    if total < FRECHET_FLOOR:
        raise ContractError(f"Frechet distance {total} below numerical floor")
    return max(total, 0.0)


# ---------------------------------------------------------------------------
# Latent adherence

def _bbox_within_one_bin(a, b) -> bool:
    return all(abs(u - v) <= 1 for u, v in zip(a.as_tuple(), b.as_tuple()))


def _blob_within_one_bin(a, b, position_bins: int, theta_bins: int) -> bool:
    pos_w = COORD_RANGE / position_bins
    th_w = THETA_RANGE / theta_bins
    fa, fb = a.as_tuple(), b.as_tuple()
    eps = 1e-9
    for u, v in zip(fa[:4], fb[:4]):
        if abs(u - v) > pos_w + eps:
            return False
    dth = abs(fa[4] - fb[4])
    return min(dth, THETA_RANGE - dth) <= th_w + eps


def _voken_agrees(a: tuple[str, ...], b: tuple[str, ...]) -> bool:
    ids_a = [t for t in a if t != "#"]
    ids_b = [t for t in b if t != "#"]
    if not ids_a or len(ids_a) != len(ids_b):
        return False
    agree = sum(1 for u, v in zip(ids_a, ids_b) if u == v)
    return agree / len(ids_a) >= VOKEN_AGREEMENT


def latents_match(conditioned: LatentSequence, extracted: LatentSequence,
                  position_bins: int = DEFAULT_POSITION_BINS,
                  theta_bins: int = DEFAULT_THETA_BINS) -> bool:
    """Scheme-specific agreement rule between a conditioning sequence
    and the re-extracted one.

    text: exact token match; bbox/blob: decoded parameters within one
    quantization bin; voken: at least 75% positional id agreement;
    combined: all three segment rules hold.
    """
    if conditioned.scheme != extracted.scheme:
        raise ContractError(
            f"scheme mismatch: {conditioned.scheme!r} vs {extracted.scheme!r}")
    if conditioned.truncated or extracted.truncated:
        return False
    scheme = conditioned.scheme
    if scheme == "text":
        return conditioned.payload == extracted.payload
    if scheme == "bbox":
        return _bbox_within_one_bin(decode_bbox(conditioned.payload),
                                    decode_bbox(extracted.payload))
    if scheme == "blob":
        return _blob_within_one_bin(
            decode_blob(conditioned.payload, position_bins, theta_bins),
            decode_blob(extracted.payload, position_bins, theta_bins),
            position_bins, theta_bins)
    if scheme == "voken":
        return _voken_agrees(conditioned.payload, extracted.payload)
    if scheme == "combined":
        ct, cb, cv = split_combined(conditioned.payload)
        et, eb, ev = split_combined(extracted.payload)
        return (
            ct == et
            and _bbox_within_one_bin(decode_bbox(cb), decode_bbox(eb))
            and _voken_agrees(cv, ev)
        )
    raise ContractError(f"unknown scheme {scheme!r}")


def latent_adherence(x: np.ndarray, class_ids, conditioned, spec, codebook=None,
                     position_bins: int = DEFAULT_POSITION_BINS,
                     theta_bins: int = DEFAULT_THETA_BINS) -> float:
    """Fraction of samples whose re-extracted latent matches the one
    they were conditioned on."""
    from .latents.extract import extract_latent

    x = as_float_array(x, "x", ndim=2)
    n = x.shape[0]
    if n == 0:
        raise ContractError("empty sample set")
    if len(conditioned) != n or len(class_ids) != n:
        raise ContractError("need one class id and one conditioning sequence per sample")
    hits = 0
    for i in range(n):
        seq = conditioned[i]
        if seq is None:
            raise ContractError(f"sample {i} has no conditioning sequence")
        extracted = extract_latent(x[i], class_ids[i], seq.scheme, spec, codebook,
                                   position_bins, theta_bins)
        hits += int(latents_match(seq, extracted, position_bins, theta_bins))
    return hits / n


# ---------------------------------------------------------------------------
# Report container

@dataclass
class MetricReport:
    """One evaluation cell: coverage, k-NN recall/precision, Frechet
    distance, optional adherence, sample counts and the guidance used."""

    mode_coverage: float | None
    mode_counts: dict[str, int] | None
    recall: float
    precision: float
    frechet_distance: float
    latent_adherence: float | None
    n_real: int
    n_gen: int
    guidance: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # coverage is mixture-only; canvas cells carry None there
        if (self.mode_coverage is None) != (self.mode_counts is None):
            raise ContractError("mode_coverage and mode_counts must be set together")
        names = ("recall", "precision") if self.mode_coverage is None else (
            "mode_coverage", "recall", "precision")
        for name in names:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if self.latent_adherence is not None and not 0.0 <= self.latent_adherence <= 1.0:
            raise ContractError(f"latent_adherence={self.latent_adherence} outside [0, 1]")
        if self.frechet_distance < 0:
            raise ContractError(f"frechet_distance={self.frechet_distance} negative")
        if self.mode_counts is not None and sum(self.mode_counts.values()) != self.n_gen:
            raise ContractError("mode counts must sum to the generated sample total")

    def to_json(self) -> str:
        blob = {
            "mode_coverage": self.mode_coverage,
            "mode_counts": self.mode_counts,
            "recall": self.recall,
            "precision": self.precision,
            "frechet_distance": self.frechet_distance,
            "latent_adherence": self.latent_adherence,
            "n_real": self.n_real,
            "n_gen": self.n_gen,
            "guidance": self.guidance,
            "extra": self.extra,
        }
        return json.dumps(blob, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        blob = json.loads(text)
        return cls(**blob)


def compute_report(real: np.ndarray, gen: np.ndarray, spec, guidance: float,
                   class_id: str | None = None, min_count: int = 10, k: int = 3,
                   class_ids=None, conditioned=None, codebook=None) -> MetricReport:
    """Assemble the full report for one generated set; adherence only
    when conditioning sequences are supplied, coverage only for mixture
    specs."""
    if isinstance(spec, GmmSpec):
        coverage, counts = mode_coverage(gen, spec, min_count=min_count, class_id=class_id)
    else:
        coverage, counts = None, None
    recall, precision = knn_recall_precision(real, gen, k=k)
    fd = frechet_distance(real, gen)
    adherence = None
    if conditioned is not None:
        adherence = latent_adherence(gen, class_ids, conditioned, spec, codebook)
    return MetricReport(
        mode_coverage=coverage,
        mode_counts=counts,
        recall=recall,
        precision=precision,
        frechet_distance=fd,
        latent_adherence=adherence,
        n_real=real.shape[0],
        n_gen=gen.shape[0],
        guidance=guidance,
    )
