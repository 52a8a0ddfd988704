"""Token codecs for the latent grammars.

Bounding boxes are four integers in [0, 1000] spelled digit by digit
with ',' separators. Blobs are five quantized fields (center, semi-axis
radii in the same normalized [0, 1000] frame, orientation in degrees)
spelled the same way; decode returns bin centers. Visual tokens are
codebook ids joined by '#'. Combined sequences are
text | bbox | voken segments in that fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, GrammarError
from ..validation import as_float_array
from .vocab import (
    COMMA,
    DIGITS,
    HASH,
    PIPE,
    LatentSequence,
    voken_id_of_token,
    voken_token,
)

COORD_RANGE = 1000  # normalized coordinate range shared by bbox and blob
THETA_RANGE = 180.0

DEFAULT_POSITION_BINS = 1000
DEFAULT_THETA_BINS = 180

DEGENERATE_RADIUS = 1e-6


@dataclass(frozen=True)
class BboxParams:
    """Axis-aligned box, integer corners in [0, 1000], top-left first."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ContractError(f"bbox field {name} must be an integer, got {v!r}")
            if not 0 <= v <= COORD_RANGE:
                raise ContractError(f"bbox field {name}={v} outside [0, {COORD_RANGE}]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ContractError(
                f"bbox corners must satisfy x1 <= x2, y1 <= y2, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (int(self.x1), int(self.y1), int(self.x2), int(self.y2))


@dataclass(frozen=True)
class BlobParams:
    """Tilted ellipse: center and semi-axis radii in normalized
    coordinates, orientation theta in degrees within [0, 180)."""

    x_c: float
    y_c: float
    r_major: float
    r_minor: float
    theta_deg: float

    def __post_init__(self):
        if not self.r_major >= self.r_minor > 0:
            raise ContractError(
                f"need r_major >= r_minor > 0, got ({self.r_major}, {self.r_minor})")
        if not 0.0 <= self.theta_deg < THETA_RANGE:
            raise ContractError(f"theta must lie in [0, 180), got {self.theta_deg}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.x_c, self.y_c, self.r_major, self.r_minor, self.theta_deg)


# ---------------------------------------------------------------------------
# Digit plumbing

def _digit_tokens(value: int) -> list[str]:
    return list(str(int(value)))


def _split_fields(tokens, separator: str, expected: int) -> list[list[str]]:
    fields: list[list[str]] = [[]]
    for tok in tokens:
        if tok == separator:
            fields.append([])
        else:
            fields[-1].append(tok)
    if len(fields) != expected:
        raise GrammarError(f"expected {expected} '{separator}'-separated fields, got {len(fields)}")
    return fields


def _parse_int_field(field: list[str], name: str) -> int:
    if not field:
        raise GrammarError(f"empty integer field {name}")
    for tok in field:
        if tok not in DIGITS:
            raise GrammarError(f"non-digit token {tok!r} in integer field {name}")
    if len(field) > 1 and field[0] == "0":
        raise GrammarError(f"leading zero in integer field {name}")
    return int("".join(field))


# ---------------------------------------------------------------------------
# Bbox

def encode_bbox(box: BboxParams) -> tuple[str, ...]:
    tokens: list[str] = []
    for i, v in enumerate(box.as_tuple()):
        if i:
            tokens.append(COMMA)
        tokens.extend(_digit_tokens(v))
    return tuple(tokens)


def decode_bbox(tokens) -> BboxParams:
    fields = _split_fields(tuple(tokens), COMMA, 4)
    x1, y1, x2, y2 = (_parse_int_field(f, n) for f, n in zip(fields, ("x1", "y1", "x2", "y2")))
    try:
        return BboxParams(x1=x1, y1=y1, x2=x2, y2=y2)
    except ContractError as exc:
        raise GrammarError(str(exc)) from None


# ---------------------------------------------------------------------------
# Blob

def _bin_of(value: float, limit: float, bins: int) -> int:
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    width = limit / bins
    return min(int(value / width), bins - 1)


def _center_of(idx: int, limit: float, bins: int) -> float:
    return (idx + 0.5) * (limit / bins)


def quantize_blob(blob: BlobParams, position_bins: int = DEFAULT_POSITION_BINS,
                  theta_bins: int = DEFAULT_THETA_BINS) -> tuple[int, int, int, int, int]:
    """Bin indices for (x_c, y_c, r_major, r_minor, theta)."""
    for name, v in zip(("x_c", "y_c", "r_major", "r_minor"), blob.as_tuple()[:4]):
        if not 0.0 <= v <= COORD_RANGE:
            raise ContractError(f"blob field {name}={v} outside [0, {COORD_RANGE}]")
    return (
        _bin_of(blob.x_c, COORD_RANGE, position_bins),
        _bin_of(blob.y_c, COORD_RANGE, position_bins),
        _bin_of(blob.r_major, COORD_RANGE, position_bins),
        _bin_of(blob.r_minor, COORD_RANGE, position_bins),
        _bin_of(blob.theta_deg, THETA_RANGE, theta_bins),
    )


def encode_blob(blob: BlobParams, position_bins: int = DEFAULT_POSITION_BINS,
                theta_bins: int = DEFAULT_THETA_BINS) -> tuple[str, ...]:
    tokens: list[str] = []
    for i, idx in enumerate(quantize_blob(blob, position_bins, theta_bins)):
        if i:
            tokens.append(COMMA)
        tokens.extend(_digit_tokens(idx))
    return tuple(tokens)


def decode_blob(tokens, position_bins: int = DEFAULT_POSITION_BINS,
                theta_bins: int = DEFAULT_THETA_BINS) -> BlobParams:
    """Bin-center blob parameters from a token stream."""
    names = ("x_c", "y_c", "r_major", "r_minor", "theta")
    fields = _split_fields(tuple(tokens), COMMA, 5)
    idx = [_parse_int_field(f, n) for f, n in zip(fields, names)]
    for i, (name, bins) in enumerate(zip(names, (position_bins,) * 4 + (theta_bins,))):
        if idx[i] >= bins:
            raise GrammarError(f"blob field {name} bin {idx[i]} >= {bins}")
    try:
        return BlobParams(
            x_c=_center_of(idx[0], COORD_RANGE, position_bins),
            y_c=_center_of(idx[1], COORD_RANGE, position_bins),
            r_major=_center_of(idx[2], COORD_RANGE, position_bins),
            r_minor=_center_of(idx[3], COORD_RANGE, position_bins),
            theta_deg=_center_of(idx[4], THETA_RANGE, theta_bins),
        )
    except ContractError as exc:
        raise GrammarError(str(exc)) from None


# ---------------------------------------------------------------------------
# Ellipse fitting (second moments)

def ellipse_fit(points: np.ndarray, weights: np.ndarray | None = None,
                ) -> tuple[BlobParams, bool]:
    """Moment fit of a tilted ellipse to a weighted point set.

    Center is the weighted mean; semi-axis radii are 2 * sqrt(eigenvalue)
    of the weighted covariance; theta is the major eigenvector angle
    folded into [0, 180). Units follow the input coordinates. Returns
    (params, degenerate); a near-zero covariance yields a minimal-radius
    circle flagged degenerate.
    """
    points = as_float_array(points, "points", ndim=2)
    if points.shape[1] != 2:
        raise ContractError(f"points must be [n, 2], got {points.shape}")
    if weights is None:
        weights = np.ones(points.shape[0])
    else:
        weights = as_float_array(weights, "weights", ndim=1)
        if weights.shape[0] != points.shape[0]:
            raise ContractError("weights length mismatch")
        if np.any(weights < 0):
            raise ContractError("weights must be non-negative")
    total = float(weights.sum())
    if total <= 0:
        raise ContractError("ellipse fit needs non-zero total mass")
    center = (weights[:, None] * points).sum(axis=0) / total
    diff = points - center
    cov = (weights[:, None, None] * (diff[:, :, None] * diff[:, None, :])).sum(axis=0) / total
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    if eigvals[1] <= 1e-18:
        return BlobParams(x_c=float(center[0]), y_c=float(center[1]),
                          r_major=DEGENERATE_RADIUS, r_minor=DEGENERATE_RADIUS,
                          theta_deg=0.0), True
    r_major = 2.0 * float(np.sqrt(eigvals[1]))
    r_minor = 2.0 * float(np.sqrt(max(eigvals[0], 0.0)))
    major = eigvecs[:, 1]
    theta = float(np.degrees(np.arctan2(major[1], major[0]))) % 180.0
    r_minor = max(r_minor, DEGENERATE_RADIUS)
    return BlobParams(x_c=float(center[0]), y_c=float(center[1]),
                      r_major=max(r_major, r_minor), r_minor=r_minor,
                      theta_deg=theta), False


# ---------------------------------------------------------------------------
# Vokens

def voken_encode(x: np.ndarray, codebook) -> tuple[str, ...]:
    """Nearest-centroid ids of the patch rows, joined by '#'."""
    x = as_float_array(x, "x")
    if x.ndim == 1:
        patch_dim = codebook.centroids_.shape[1]
        if x.shape[0] % patch_dim:
            raise ContractError(
                f"flat input length {x.shape[0]} not divisible by patch dim {patch_dim}")
        x = x.reshape(-1, patch_dim)
    ids = codebook.transform(x)
    tokens: list[str] = []
    for i, code in enumerate(ids):
        if i:
            tokens.append(HASH)
        tokens.append(voken_token(int(code)))
    return tuple(tokens)


def voken_decode(tokens, codebook) -> np.ndarray:
    """Concatenated centroid vectors for a '#'-joined id stream."""
    fields = _split_fields(tuple(tokens), HASH, max(1, tuple(tokens).count(HASH) + 1))
    ids = []
    for f in fields:
        if len(f) != 1:
            raise GrammarError(f"each '#'-separated field must hold one voken token, got {f!r}")
        code = voken_id_of_token(f[0])
        if code >= codebook.centroids_.shape[0]:
            raise GrammarError(f"voken id {code} >= codebook size {codebook.centroids_.shape[0]}")
        ids.append(code)
    return codebook.centroids_[np.array(ids, dtype=np.intp)].reshape(-1)


# ---------------------------------------------------------------------------
# Combined sequences and grammar validation

def join_combined(text_tokens, bbox_tokens, voken_tokens) -> tuple[str, ...]:
    return tuple(text_tokens) + (PIPE,) + tuple(bbox_tokens) + (PIPE,) + tuple(voken_tokens)


def split_combined(tokens) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    fields = _split_fields(tuple(tokens), PIPE, 3)
    return tuple(fields[0]), tuple(fields[1]), tuple(fields[2])


def validate_sequence(seq: LatentSequence, vocab, codebook=None,
                      position_bins: int = DEFAULT_POSITION_BINS,
                      theta_bins: int = DEFAULT_THETA_BINS) -> None:
    """Raise GrammarError unless seq parses under its scheme grammar.

    The voken and combined grammars need the codebook to bound ids; a
    missing codebook only checks vocabulary membership for those ids.
    """
    if seq.truncated:
        raise GrammarError("truncated sequence is not grammar-valid")
    if seq.scheme != vocab.scheme:
        raise GrammarError(f"sequence scheme {seq.scheme!r} != vocabulary scheme {vocab.scheme!r}")
    vocab.ids(seq.payload)  # membership check with a precise error
    payload = seq.payload
    if seq.scheme == "text":
        if len(payload) != 1:
            raise GrammarError(f"text sequence must hold exactly one token, got {len(payload)}")
        tok = payload[0]
        if not (tok.startswith("mode_") or tok.startswith("count_")):
            raise GrammarError(f"not a text label token: {tok!r}")
    elif seq.scheme == "bbox":
        decode_bbox(payload)
    elif seq.scheme == "blob":
        decode_blob(payload, position_bins, theta_bins)
    elif seq.scheme == "voken":
        _validate_voken_payload(payload, codebook)
    elif seq.scheme == "combined":
        text, bbox, voken = split_combined(payload)
        if len(text) != 1 or not text[0].startswith("count_"):
            raise GrammarError(f"combined text segment must be one count token, got {text!r}")
        decode_bbox(bbox)
        _validate_voken_payload(voken, codebook)


def _validate_voken_payload(payload, codebook) -> None:
    fields = _split_fields(tuple(payload), HASH, max(1, tuple(payload).count(HASH) + 1))
    for f in fields:
        if len(f) != 1:
            raise GrammarError(f"each '#'-separated field must hold one voken token, got {f!r}")
        code = voken_id_of_token(f[0])
        if codebook is not None and code >= codebook.centroids_.shape[0]:
            raise GrammarError(f"voken id {code} >= codebook size {codebook.centroids_.shape[0]}")
