"""Deterministic latent extractors q(z | x, c) for synthetic data.

Each extractor is a pure function of the sample and dataset spec and
emits a grammar-valid LatentSequence:

* text on the mixture: the mode label of the argmax-responsibility
  component; text on the canvas: the bump-count label.
* bbox: the thresholded support of the canvas mass, padded by one pixel
  and normalized to [0, 1000].
* blob: a second-moment ellipse fit of the canvas mass in the same
  normalized frame.
* voken: nearest-codebook ids of the canvas quadrants joined by '#'.
* combined: text | bbox | voken.
"""

from __future__ import annotations

import numpy as np

from ..data import CanvasSpec, GmmSpec, assign_mode, pixel_centers
from ..errors import ContractError, GrammarError
from ..validation import as_float_array
from .codecs import (
    BboxParams,
    COORD_RANGE,
    DEFAULT_POSITION_BINS,
    DEFAULT_THETA_BINS,
    ellipse_fit,
    encode_bbox,
    encode_blob,
    join_combined,
    voken_encode,
)
from .vocab import LatentSequence, count_token, mode_token

MASS_THRESHOLD = 0.02  # canvas value below which a pixel is background


def extract_latent(x: np.ndarray, class_id: str, scheme: str, spec,
                   codebook=None, position_bins: int = DEFAULT_POSITION_BINS,
                   theta_bins: int = DEFAULT_THETA_BINS) -> LatentSequence:
    """Scheme dispatch over the dataset spec; deterministic.

    Raises GrammarError when the scheme has no meaning for the dataset
    (anything but text on the plain mixture) or when voken extraction
    lacks a codebook.
    """
    if isinstance(spec, GmmSpec):
        if scheme != "text":
            raise GrammarError(
                f"scheme {scheme!r} incompatible with a plain mixture dataset")
        mode = assign_mode(as_float_array(x, "x", ndim=1), spec)
        return LatentSequence.from_payload("text", (mode_token(mode),))
    if isinstance(spec, CanvasSpec):
        return _extract_canvas(x, class_id, scheme, spec, codebook,
                               position_bins, theta_bins)
    raise ContractError(f"unsupported dataset spec {type(spec).__name__}")


def _bump_count_of_class(class_id: str, spec: CanvasSpec) -> int:
    if class_id not in spec.class_ids():
        raise ContractError(f"unknown canvas class {class_id!r}")
    return int(class_id.removesuffix("bump"))


def _extract_canvas(x, class_id, scheme, spec, codebook, position_bins, theta_bins,
                    ) -> LatentSequence:
    grid = as_float_array(x, "x").reshape(spec.resolution, spec.resolution)
    if scheme == "text":
        payload = (count_token(_bump_count_of_class(class_id, spec)),)
        return LatentSequence.from_payload("text", payload)
    if scheme == "bbox":
        return LatentSequence.from_payload("bbox", encode_bbox(canvas_threshold_box(grid, spec)))
    if scheme == "blob":
        points, weights = _grid_points(grid, spec)
        blob, _degenerate = ellipse_fit(points, weights)
        return LatentSequence.from_payload("blob", encode_blob(blob, position_bins, theta_bins))
    if scheme == "voken":
        if codebook is None:
            raise GrammarError("voken extraction needs a fitted codebook")
        return LatentSequence.from_payload("voken", voken_encode(canvas_patches(grid), codebook))
    if scheme == "combined":
        if codebook is None:
            raise GrammarError("combined extraction needs a fitted codebook")
        text = (count_token(_bump_count_of_class(class_id, spec)),)
        bbox = encode_bbox(canvas_threshold_box(grid, spec))
        voken = voken_encode(canvas_patches(grid), codebook)
        return LatentSequence.from_payload("combined", join_combined(text, bbox, voken))
    raise GrammarError(f"unknown scheme {scheme!r}")


def canvas_threshold_box(grid: np.ndarray, spec: CanvasSpec,
                         threshold: float = MASS_THRESHOLD) -> BboxParams:
    """Bounding box of above-threshold pixels, padded one pixel outward
    and clipped to the canvas, as integers in [0, 1000].

    The pad compensates the half-open sampling of pixel centers so the
    box keeps covering the true mass contour between pixels.
    """
    grid = as_float_array(grid, "grid", ndim=2)
    res = spec.resolution
    if grid.shape != (res, res):
        raise ContractError(f"grid shape {grid.shape} != ({res}, {res})")
    rows, cols = np.nonzero(grid >= threshold)
    if rows.size == 0:
        # empty canvas: fall back to the single brightest pixel
        flat = int(np.argmax(grid))
        rows = np.array([flat // res])
        cols = np.array([flat % res])
    x_lo = max(0.0, (cols.min() - 1) / res)
    x_hi = min(1.0, (cols.max() + 2) / res)
    y_lo = max(0.0, (rows.min() - 1) / res)
    y_hi = min(1.0, (rows.max() + 2) / res)
    return BboxParams(
        x1=int(np.floor(x_lo * COORD_RANGE)),
        y1=int(np.floor(y_lo * COORD_RANGE)),
        x2=int(np.ceil(x_hi * COORD_RANGE)),
        y2=int(np.ceil(y_hi * COORD_RANGE)),
    )


def _grid_points(grid: np.ndarray, spec: CanvasSpec):
    """Pixel centers in the [0, 1000] normalized frame with grid mass
    weights, for moment fitting."""
    res = spec.resolution
    centers = pixel_centers(res) * COORD_RANGE
    xs, ys = np.meshgrid(centers, centers)
    points = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    weights = grid.reshape(-1)
    if weights.sum() <= 0:
        raise ContractError("canvas holds no mass to fit")
    return points, weights


def canvas_patches(grid: np.ndarray, patches_per_side: int = 2) -> np.ndarray:
    """Split the canvas into patches_per_side^2 equal square patches,
    row-major, each flattened; rows feed the voken codebook."""
    grid = as_float_array(grid, "grid", ndim=2)
    res = grid.shape[0]
    if grid.shape[1] != res or res % patches_per_side:
        raise ContractError(
            f"grid shape {grid.shape} not divisible into {patches_per_side}^2 patches")
    side = res // patches_per_side
    out = []
    for i in range(patches_per_side):
        for j in range(patches_per_side):
            out.append(grid[i * side:(i + 1) * side, j * side:(j + 1) * side].reshape(-1))
    return np.stack(out)
