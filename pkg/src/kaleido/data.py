"""Synthetic datasets with exact ground truth.

Two substrates:

* a labeled Gaussian mixture in 2D (two classes, each with two modes)
  whose known parameters back the analytic denoiser oracle and exact
  mode accounting, and
* a small canvas of anisotropic Gaussian bumps giving meaningful
  bounding-box / blob / visual-token latents.

Both are pure functions of (spec, seed).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .validation import as_float_array, atomic_write_json, atomic_write_text, substream

MODE_SEPARATION_FACTOR = 4.0  # min pairwise mean distance, in units of max stddev


@dataclass(frozen=True)
class GmmComponent:
    weight: float
    mean: np.ndarray
    variance: np.ndarray  # diagonal covariance entries
    class_id: str
    mode_id: str

    def __post_init__(self):
        object.__setattr__(self, "mean", as_float_array(self.mean, "mean", ndim=1))
        object.__setattr__(self, "variance", as_float_array(self.variance, "variance", ndim=1))
        if self.weight <= 0:
            raise ContractError(f"component weight must be positive, got {self.weight}")
        if self.variance.shape != self.mean.shape:
            raise ContractError("variance and mean dimensions differ")
        if np.any(self.variance <= 0):
            raise ContractError("diagonal covariance entries must be positive")


@dataclass(frozen=True)
class GmmSpec:
    """Ground-truth mixture with class and mode labels per component.

    Means are pairwise separated by at least 4x the largest stddev so
    that argmax-responsibility mode assignment is effectively
    unambiguous.
    """

    components: tuple[GmmComponent, ...]

    def __post_init__(self):
        if not self.components:
            raise ContractError("GmmSpec needs at least one component")
        dims = {c.mean.shape[0] for c in self.components}
        if len(dims) != 1:
            raise ContractError(f"inconsistent component dimensions: {sorted(dims)}")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ContractError(f"component weights sum to {total!r}, not 1")
        max_std = max(float(np.sqrt(c.variance.max())) for c in self.components)
        means = self.means()
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                dist = float(np.linalg.norm(means[i] - means[j]))
                if dist < MODE_SEPARATION_FACTOR * max_std:
                    raise ContractError(
                        f"components {i} and {j} separated by {dist:.3f} "
                        f"< {MODE_SEPARATION_FACTOR} * max stddev {max_std:.3f}")

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    def variances(self) -> np.ndarray:
        return np.stack([c.variance for c in self.components])

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def class_ids(self) -> list[str]:
        seen: list[str] = []
        for c in self.components:
            if c.class_id not in seen:
                seen.append(c.class_id)
        return seen

    def mode_ids(self) -> list[str]:
        seen: list[str] = []
        for c in self.components:
            if c.mode_id not in seen:
                seen.append(c.mode_id)
        return seen

    def modes_of(self, class_id: str) -> list[str]:
        out = [c.mode_id for c in self.components if c.class_id == class_id]
        if not out:
            raise ContractError(f"unknown class id {class_id!r}")
        return out

    def components_of_class(self, class_id: str | None) -> list[int]:
        if class_id is None:
            return list(range(len(self.components)))
        idx = [i for i, c in enumerate(self.components) if c.class_id == class_id]
        if not idx:
            raise ContractError(f"unknown class id {class_id!r}")
        return idx

    def component_of_mode(self, mode_id: str) -> int:
        for i, c in enumerate(self.components):
            if c.mode_id == mode_id:
                return i
        raise ContractError(f"unknown mode id {mode_id!r}")

    def log_responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Unnormalized log responsibilities log w_k + log N(x; mu_k, S_k), [n, K]."""
        x = np.atleast_2d(as_float_array(x, "x"))
        means = self.means()
        variances = self.variances()
        diff = x[:, None, :] - means[None, :, :]
        return (
            np.log(self.weights())[None, :]
            - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
            - 0.5 * np.sum(diff**2 / variances[None, :, :], axis=2)
        )

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        log_r = self.log_responsibilities(x)
        log_r -= log_r.max(axis=1, keepdims=True)
        r = np.exp(log_r)
        return r / r.sum(axis=1, keepdims=True)

    def mahalanobis(self, x: np.ndarray, component: int) -> np.ndarray:
        """Per-row Mahalanobis distance to one component."""
        x = np.atleast_2d(as_float_array(x, "x"))
        comp = self.components[component]
        return np.sqrt(np.sum((x - comp.mean) ** 2 / comp.variance, axis=1))

    def to_jsonable(self) -> dict:
        return {
            "components": [
                {
                    "weight": c.weight,
                    "mean": c.mean.tolist(),
                    "variance": c.variance.tolist(),
                    "class_id": c.class_id,
                    "mode_id": c.mode_id,
                }
                for c in self.components
            ]
        }

    @classmethod
    def from_jsonable(cls, blob: dict) -> "GmmSpec":
        comps = tuple(
            GmmComponent(
                weight=c["weight"],
                mean=np.array(c["mean"]),
                variance=np.array(c["variance"]),
                class_id=c["class_id"],
                mode_id=c["mode_id"],
            )
            for c in blob["components"]
        )
        return cls(components=comps)


def toy_gmm_default(unequal: bool = False) -> GmmSpec:
    """Two classes split on the sign of x, two modes each split on the
    sign of y; isotropic stddev 0.3 at (+-3, +-3).

    With unequal=True the within-class mode split is 0.7 (mode A, upper)
    vs 0.3 (mode B, lower), the configuration used for guidance
    sharpening experiments; otherwise all four weights are equal.
    """
    var = np.array([0.09, 0.09])
    wa, wb = (0.35, 0.15) if unequal else (0.25, 0.25)
    comps = (
        GmmComponent(wa, np.array([-3.0, 3.0]), var, "0", "0A"),
        GmmComponent(wb, np.array([-3.0, -3.0]), var, "0", "0B"),
        GmmComponent(wa, np.array([3.0, 3.0]), var, "1", "1A"),
        GmmComponent(wb, np.array([3.0, -3.0]), var, "1", "1B"),
    )
    return GmmSpec(components=comps)


def assign_component(x: np.ndarray, spec: GmmSpec) -> np.ndarray:
    """Argmax-responsibility component per row; ties break to the lowest
    index (argmax takes the first maximum)."""
    return np.argmax(spec.log_responsibilities(x), axis=1)


def assign_mode(x: np.ndarray, spec: GmmSpec):
    """Mode id(s) of the argmax-responsibility component."""
    x = as_float_array(x, "x")
    single = x.ndim == 1
    idx = assign_component(x, spec)
    modes = [spec.components[i].mode_id for i in idx]
    return modes[0] if single else modes


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    class_id: str
    mode_id: str
    params: dict | None = None  # canvas ground truth (bump parameters)


def sample_dataset(spec: GmmSpec, n: int, seed: int) -> list[LabeledSample]:
    """n i.i.d. mixture draws with recorded ground truth.

    Stored labels come from assign_mode on the drawn point, so the
    stored mode always agrees with the assignment rule (the 4-sigma
    separation makes disagreement with the drawn component negligible
    but not impossible).
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    rng = substream(seed, "data")
    comp_idx = rng.choice(len(spec.components), size=n, p=spec.weights())
    means = spec.means()[comp_idx]
    stds = np.sqrt(spec.variances())[comp_idx]
    x = means + stds * rng.standard_normal((n, spec.dim))
    assigned = assign_component(x, spec)
    return [
        LabeledSample(x=x[i], class_id=spec.components[assigned[i]].class_id,
                      mode_id=spec.components[assigned[i]].mode_id)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Canvas substrate

@dataclass(frozen=True)
class Bump:
    """One anisotropic Gaussian bump in canvas units ([0, 1] coordinates).

    Radii are ellipse semi-axes at the 2-sigma contour (sigma = r / 2);
    theta is the major-axis orientation in degrees.
    """

    x_c: float
    y_c: float
    r_major: float
    r_minor: float
    theta_deg: float
    amplitude: float

    def __post_init__(self):
        if not self.r_major >= self.r_minor > 0:
            raise ContractError(
                f"need r_major >= r_minor > 0, got ({self.r_major}, {self.r_minor})")
        if not 0.0 <= self.theta_deg < 180.0:
            raise ContractError(f"theta must lie in [0, 180), got {self.theta_deg}")
        if not 0.0 < self.amplitude <= 1.0:
            raise ContractError(f"amplitude must lie in (0, 1], got {self.amplitude}")

    def to_jsonable(self) -> dict:
        return {"x_c": self.x_c, "y_c": self.y_c, "r_major": self.r_major,
                "r_minor": self.r_minor, "theta_deg": self.theta_deg,
                "amplitude": self.amplitude}

    @classmethod
    def from_jsonable(cls, blob: dict) -> "Bump":
        return cls(**blob)


@dataclass(frozen=True)
class CanvasSpec:
    """Canvas geometry and bump parameter ranges.

    Bumps must sit fully inside the canvas: center +- margin_factor *
    r_major within [edge_pad, 1 - edge_pad] on both axes. The radii
    range keeps the smallest bump's sigma above a pixel so thresholded
    extents remain detectable at the default resolution.
    """

    resolution: int = 16
    min_bumps: int = 1
    max_bumps: int = 2
    r_major_range: tuple[float, float] = (0.14, 0.22)
    axis_ratio_range: tuple[float, float] = (0.5, 1.0)
    amplitude_range: tuple[float, float] = (0.6, 1.0)
    margin_factor: float = 1.5
    edge_pad: float = 0.02

    def __post_init__(self):
        if self.resolution < 4:
            raise ContractError(f"resolution must be >= 4, got {self.resolution}")
        if not 1 <= self.min_bumps <= self.max_bumps:
            raise ContractError("need 1 <= min_bumps <= max_bumps")
        lo = self.edge_pad + self.margin_factor * self.r_major_range[1]
        if lo >= 1.0 - lo:
            raise ContractError("largest allowed bump cannot fit inside the canvas")

    @property
    def data_dim(self) -> int:
        return self.resolution * self.resolution

    def class_ids(self) -> list[str]:
        return [f"{k}bump" for k in range(self.min_bumps, self.max_bumps + 1)]

    def check_inside(self, bump: Bump) -> None:
        lo = self.edge_pad + self.margin_factor * bump.r_major
        hi = 1.0 - lo
        if not (lo <= bump.x_c <= hi and lo <= bump.y_c <= hi):
            raise ContractError(
                f"bump at ({bump.x_c:.3f}, {bump.y_c:.3f}) with r_major "
                f"{bump.r_major:.3f} extends outside the canvas")

    def to_jsonable(self) -> dict:
        return {
            "resolution": self.resolution,
            "min_bumps": self.min_bumps,
            "max_bumps": self.max_bumps,
            "r_major_range": list(self.r_major_range),
            "axis_ratio_range": list(self.axis_ratio_range),
            "amplitude_range": list(self.amplitude_range),
            "margin_factor": self.margin_factor,
            "edge_pad": self.edge_pad,
        }

    @classmethod
    def from_jsonable(cls, blob: dict) -> "CanvasSpec":
        blob = dict(blob)
        for key in ("r_major_range", "axis_ratio_range", "amplitude_range"):
            blob[key] = tuple(blob[key])
        return cls(**blob)


def pixel_centers(resolution: int) -> np.ndarray:
    return (np.arange(resolution) + 0.5) / resolution


def bump_density(bump: Bump, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bump value at coordinate arrays of equal shape (unclipped)."""
    theta = np.deg2rad(bump.theta_deg)
    ct, st = np.cos(theta), np.sin(theta)
    dx = xs - bump.x_c
    dy = ys - bump.y_c
    u = ct * dx + st * dy       # along major axis
    v = -st * dx + ct * dy      # along minor axis
    s_major = bump.r_major / 2.0
    s_minor = bump.r_minor / 2.0
    q = (u / s_major) ** 2 + (v / s_minor) ** 2
    return bump.amplitude * np.exp(-0.5 * q)


def render_canvas(bumps: list[Bump], spec: CanvasSpec) -> np.ndarray:
    """Sum of bump densities at pixel centers, clipped to [0, 1].

    grid[i, j] samples (x, y) = ((j + 0.5)/res, (i + 0.5)/res) so rows
    index y and columns index x.
    """
    for bump in bumps:
        spec.check_inside(bump)
    res = spec.resolution
    centers = pixel_centers(res)
    xs, ys = np.meshgrid(centers, centers)  # xs varies along columns
    grid = np.zeros((res, res))
    for bump in bumps:
        grid += bump_density(bump, xs, ys)
    return np.clip(grid, 0.0, 1.0)


def sample_canvas_dataset(spec: CanvasSpec, n: int, seed: int) -> list[LabeledSample]:
    """n canvases with 1..2 bumps; class id records the bump count.

    Bumps within a sample are sorted by (x_c, y_c) so the stored
    parameter order is canonical.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    rng = substream(seed, "canvas")
    out = []
    for _ in range(n):
        k = int(rng.integers(spec.min_bumps, spec.max_bumps + 1))
        bumps = []
        for _ in range(k):
            r_major = float(rng.uniform(*spec.r_major_range))
            ratio = float(rng.uniform(*spec.axis_ratio_range))
            lo = spec.edge_pad + spec.margin_factor * r_major
            bumps.append(Bump(
                x_c=float(rng.uniform(lo, 1.0 - lo)),
                y_c=float(rng.uniform(lo, 1.0 - lo)),
                r_major=r_major,
                r_minor=r_major * ratio,
                theta_deg=float(rng.uniform(0.0, 180.0)),
                amplitude=float(rng.uniform(*spec.amplitude_range)),
            ))
        bumps.sort(key=lambda b: (b.x_c, b.y_c))
        grid = render_canvas(bumps, spec)
        class_id = f"{k}bump"
        out.append(LabeledSample(
            x=grid.reshape(-1), class_id=class_id, mode_id=class_id,
            params={"bumps": [b.to_jsonable() for b in bumps]},
        ))
    return out


# ---------------------------------------------------------------------------
# Dataset and sample-dump files

def _format_float(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(samples: list[LabeledSample]) -> str:
    """CSV with columns sample_id, class, mode, dim_0..dim_{d-1}.

    Floats are written with repr so the round-trip is value-exact.
    """
    if not samples:
        raise ContractError("empty dataset")
    d = samples[0].x.shape[0]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "class", "mode"] + [f"dim_{i}" for i in range(d)])
    for i, s in enumerate(samples):
        if s.x.shape[0] != d:
            raise ContractError(f"sample {i} has dimension {s.x.shape[0]}, expected {d}")
        writer.writerow([i, s.class_id, s.mode_id] + [_format_float(v) for v in s.x])
    return buf.getvalue()


def dataset_from_csv(text: str, params: list[dict | None] | None = None) -> list[LabeledSample]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:3] != ["sample_id", "class", "mode"]:
        raise ContractError("dataset CSV header mismatch")
    out = []
    for row in reader:
        idx = int(row[0])
        x = np.array([float(v) for v in row[3:]])
        p = params[idx] if params is not None else None
        out.append(LabeledSample(x=x, class_id=row[1], mode_id=row[2], params=p))
    if not out:
        raise ContractError("dataset CSV holds no samples")
    return out


def write_dataset(path, samples: list[LabeledSample], sidecar_path=None) -> None:
    atomic_write_text(path, dataset_to_csv(samples))
    if sidecar_path is not None:
        atomic_write_json(sidecar_path, [s.params for s in samples])


def read_dataset(path, sidecar_path=None) -> list[LabeledSample]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    params = None
    if sidecar_path is not None:
        with open(sidecar_path, encoding="utf-8") as fh:
            params = json.load(fh)
    return dataset_from_csv(text, params)


def samples_to_csv(x: np.ndarray, assigned_modes: list[str],
                   conditioned_latents: list[str]) -> str:
    """Generated-sample dump: chain_id, dim_0.., assigned_mode,
    conditioned_latent (empty string when unconditioned)."""
    x = as_float_array(x, "x", ndim=2)
    n, d = x.shape
    if len(assigned_modes) != n or len(conditioned_latents) != n:
        raise ContractError("column lengths disagree with sample count")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["chain_id"] + [f"dim_{i}" for i in range(d)]
                    + ["assigned_mode", "conditioned_latent"])
    for i in range(n):
        writer.writerow([i] + [_format_float(v) for v in x[i]]
                        + [assigned_modes[i], conditioned_latents[i]])
    return buf.getvalue()


def samples_from_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0] != "chain_id" or header[-1] != "conditioned_latent":
        raise ContractError("sample CSV header mismatch")
    d = len(header) - 3
    xs, modes, latents = [], [], []
    for row in reader:
        xs.append([float(v) for v in row[1:1 + d]])
        modes.append(row[-2])
        latents.append(row[-1])
    if not xs:
        raise ContractError("sample CSV holds no rows")
    return np.array(xs), modes, latents
