"""Forward noising process, denoising loss, guided prediction and DDPM
ancestral sampling.

Two denoisers implement the same ``predict_x0`` interface:

* `CondDenoiser` — a trainable MLP over ``[x_t | time features | class
  embedding | latent embedding]``. The latent channel is always present;
  a chain without a latent (and the unconditional branch) reads a
  dedicated learned null row, never an accidental zero vector. This
  keeps baseline and latent-augmented variants bit-identical at init so
  trained pairs differ only in what flows down the latent channel.
* `GmmDenoiser` — the exact posterior mean E[x0 | x_t] of a known
  Gaussian mixture, used as a verification oracle for the sampler and
  for guidance behavior.

The schedule is variance preserving (alpha^2 + sigma^2 = 1) with
x0-prediction throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nnet
from .data import GmmSpec
from .errors import ContractError, NonFiniteError
from .validation import as_float_array, substream

logger = logging.getLogger(__name__)

EOS_TOKEN = "</s>"

SCHEDULE_EPS = 1e-5  # keeps alpha away from exact 0/1 at the endpoints

DEFAULT_SAMPLE_STEPS = 250


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal/noise pair over t = 0..num_steps.

    alphas[0] ~ 1 and alphas[-1] ~ 0 (clipped by SCHEDULE_EPS);
    alpha_t^2 + sigma_t^2 = 1 everywhere and the signal-to-noise ratio
    is strictly decreasing in t.
    """

    kind: str
    num_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray

    def snr(self) -> np.ndarray:
        return self.alphas**2 / self.sigmas**2

    def transition(self, t: int, s: int) -> tuple[float, float]:
        """(alpha_{t|s}, sigma^2_{t|s}) for jumping s -> t, s <= t.

        The t=0 endpoint is treated as exact (alpha=1, sigma=0): the
        epsilon clipping in the table exists only to keep endpoint SNRs
        finite, not to redefine the process boundaries.
        """
        if not 0 <= s <= t <= self.num_steps:
            raise ContractError(f"need 0 <= s <= t <= {self.num_steps}, got s={s}, t={t}")
        a_s, s2_s = (1.0, 0.0) if s == 0 else (float(self.alphas[s]), float(self.sigmas[s] ** 2))
        a_ts = float(self.alphas[t]) / a_s
        var_ts = float(self.sigmas[t] ** 2) - a_ts**2 * s2_s
        return a_ts, var_ts

    def posterior_coeffs(self, t: int, s: int) -> tuple[float, float, float]:
        """Gaussian posterior q(x_s | x_t, x0) = N(cx * x_t + c0 * x0, var I)."""
        if not 0 <= s < t <= self.num_steps:
            raise ContractError(f"need 0 <= s < t <= {self.num_steps}, got s={s}, t={t}")
        a_s, s2_s = (1.0, 0.0) if s == 0 else (float(self.alphas[s]), float(self.sigmas[s] ** 2))
        s2_t = float(self.sigmas[t] ** 2)
        a_ts, var_ts = self.transition(t, s)
        cx = a_ts * s2_s / s2_t
        c0 = a_s * var_ts / s2_t
        var = var_ts * s2_s / s2_t
        return cx, c0, var


def make_schedule(kind: str, num_steps: int) -> NoiseSchedule:
    """Build a variance-preserving schedule.

    cosine: alpha_t = cos((t/T) * pi/2); linear: alpha_t = 1 - t/T.
    Both are clipped into [eps, 1 - eps] and paired with
    sigma_t = sqrt(1 - alpha_t^2).
    """
    if num_steps < 1:
        raise ContractError(f"num_steps must be >= 1, got {num_steps}")
    t = np.arange(num_steps + 1) / num_steps
    if kind == "cosine":
        alphas = np.cos(t * np.pi / 2.0)
    elif kind == "linear":
        alphas = 1.0 - t
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    alphas = np.clip(alphas, SCHEDULE_EPS, 1.0 - SCHEDULE_EPS)
    sigmas = np.sqrt(1.0 - alphas**2)
    sched = NoiseSchedule(kind=kind, num_steps=num_steps, alphas=alphas, sigmas=sigmas)
    snr = sched.snr()
    if not np.all(np.diff(snr) < 0):
        raise ContractError(f"schedule {kind!r} failed strict SNR monotonicity")
    return sched


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward process draw x_t = alpha_t * x0 + sigma_t * noise."""
    if not 0 <= t <= sched.num_steps:
        raise ContractError(f"t={t} outside [0, {sched.num_steps}]")
    x0 = as_float_array(x0, "x0")
    noise = as_float_array(noise, "noise")
    if noise.shape != x0.shape:
        raise ContractError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    return float(sched.alphas[t]) * x0 + float(sched.sigmas[t]) * noise


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of the ancestral sampler.

    guidance=1 disables guidance; cfg_drops_latent controls whether the
    unconditional branch drops the latent along with the class (it does
    by default: the unconditional score conditions on nothing).
    x0_clip, when set, bounds each coordinate of the predicted clean
    sample — declare it from the known data bounding box.
    """

    guidance: float = 1.0
    steps: int = DEFAULT_SAMPLE_STEPS
    seed: int = 0
    latent_conditioning: bool = False
    cfg_drops_latent: bool = True
    x0_clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.guidance < 0:
            raise ContractError(f"guidance must be >= 0, got {self.guidance}")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.x0_clip is not None and not self.x0_clip[0] < self.x0_clip[1]:
            raise ContractError(f"x0_clip bounds must increase, got {self.x0_clip}")


@dataclass(frozen=True)
class DenoiserCondition:
    """Conditioning for one prediction: class id (None = the learned null
    sentinel), optional latent sequence, timestep."""

    class_id: str | None
    latent: object | None
    t: int


def time_features(t_frac: np.ndarray) -> np.ndarray:
    """Fixed sinusoidal features of normalized time t/T, shape [B, 9]."""
    t_frac = np.atleast_1d(as_float_array(t_frac, "t_frac"))
    cols = [t_frac]
    for f in (1.0, 2.0, 4.0, 8.0):
        cols.append(np.sin(np.pi * f * t_frac))
        cols.append(np.cos(np.pi * f * t_frac))
    return np.stack(cols, axis=1)


TIME_FEATURE_DIM = 9


class CondDenoiser:
    """Trainable x0-predicting MLP with class and latent conditioning
    channels.

    The input row is ``[x_t, time_features, class_row, latent_row]``
    where class_row comes from a table with one extra learned null row,
    and latent_row is the mean of the token embedding rows of the
    conditioning sequence (or the learned null-latent row when no
    latent is supplied).
    """

    def __init__(self, data_dim: int, class_ids: list[str], vocab_tokens: tuple[str, ...],
                 hidden: list[int], rng: np.random.Generator, activation: str = "tanh",
                 class_emb_dim: int = 8, latent_emb_dim: int = 8):
        self.data_dim = int(data_dim)
        self.class_ids = list(class_ids)
        self.class_index = {c: i for i, c in enumerate(self.class_ids)}
        self.vocab_tokens = tuple(vocab_tokens)
        self.token_index = {tok: i for i, tok in enumerate(self.vocab_tokens)}
        self.class_emb_dim = int(class_emb_dim)
        self.latent_emb_dim = int(latent_emb_dim)
        self.activation = activation
        self.hidden = list(hidden)
        in_dim = self.data_dim + TIME_FEATURE_DIM + class_emb_dim + latent_emb_dim
        self.mlp = nnet.Mlp.init([in_dim] + list(hidden) + [self.data_dim], rng, activation)
        # one extra row each for the learned null sentinels
        self.class_emb = nnet.Embedding.init(len(self.class_ids) + 1, class_emb_dim, rng)
        self.latent_emb = nnet.Embedding.init(len(self.vocab_tokens) + 1, latent_emb_dim, rng)

    @property
    def null_class_row(self) -> int:
        return len(self.class_ids)

    @property
    def null_latent_row(self) -> int:
        return len(self.vocab_tokens)

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.mlp.params(prefix + "mlp.")
        out[prefix + "class_emb"] = self.class_emb.table
        out[prefix + "latent_emb"] = self.latent_emb.table
        return out

    def copy(self) -> "CondDenoiser":
        dup = object.__new__(CondDenoiser)
        dup.__dict__.update(self.__dict__)
        dup.mlp = self.mlp.copy()
        dup.class_emb = nnet.Embedding(self.class_emb.table.copy())
        dup.latent_emb = nnet.Embedding(self.latent_emb.table.copy())
        return dup

    # -- conditioning assembly ------------------------------------------

    def class_rows(self, class_ids) -> np.ndarray:
        rows = np.empty(len(class_ids), dtype=np.intp)
        for i, c in enumerate(class_ids):
            if c is None:
                rows[i] = self.null_class_row
            else:
                if c not in self.class_index:
                    raise ContractError(f"unknown class id {c!r}")
                rows[i] = self.class_index[c]
        return rows

    def latent_token_rows(self, latents) -> list[np.ndarray | None]:
        """Token-id rows per chain; None entries mean the null-latent row.

        Payload tokens are pooled; an empty payload maps to the EOS row,
        which is distinct from the null row (absent conditioning).
        """
        out = []
        for seq in latents:
            if seq is None:
                out.append(None)
                continue
            if getattr(seq, "truncated", False):
                raise ContractError("truncated latent sequence may not condition the denoiser")
            tokens = seq.payload if hasattr(seq, "payload") else tuple(seq)
            if len(tokens) == 0:
                tokens = (EOS_TOKEN,)
            try:
                out.append(np.array([self.token_index[t] for t in tokens], dtype=np.intp))
            except KeyError as exc:
                raise ContractError(f"latent token {exc.args[0]!r} not in denoiser vocabulary") from exc
        return out

    def _pooled_latents(self, n: int, token_rows) -> np.ndarray:
        pooled = np.empty((n, self.latent_emb_dim))
        for i in range(n):
            ids = None if token_rows is None else token_rows[i]
            if ids is None:
                pooled[i] = self.latent_emb.table[self.null_latent_row]
            else:
                pooled[i] = self.latent_emb.table[ids].mean(axis=0)
        return pooled

    def _assemble(self, x_t: np.ndarray, ts: np.ndarray, class_rows: np.ndarray,
                  token_rows) -> np.ndarray:
        tf = time_features(ts / self.num_steps_hint)
        return np.concatenate(
            [x_t, tf, self.class_emb.table[class_rows], self._pooled_latents(x_t.shape[0], token_rows)],
            axis=1,
        )

    # The denoiser normalizes t by the schedule length it was trained
    # with; set once by the trainer.
    num_steps_hint: int = DEFAULT_SAMPLE_STEPS

    # -- forward / loss -------------------------------------------------

    def predict_x0(self, x_t: np.ndarray, t, class_ids, latents=None) -> np.ndarray:
        x_t = as_float_array(x_t, "x_t", ndim=2)
        n = x_t.shape[0]
        ts = np.full(n, float(t)) if np.isscalar(t) else as_float_array(t, "t")
        rows = self.class_rows(class_ids)
        token_rows = self.latent_token_rows(latents) if latents is not None else None
        inp = self._assemble(x_t, ts, rows, token_rows)
        y, _ = nnet.forward_batch(self.mlp, inp)
        return y

    def predict(self, x_t: np.ndarray, cond: DenoiserCondition) -> np.ndarray:
        """Single-vector convenience wrapper."""
        latents = [cond.latent] if cond.latent is not None else None
        return self.predict_x0(x_t[None, :], cond.t, [cond.class_id], latents)[0]

    def loss_and_grads(self, x0: np.ndarray, ts: np.ndarray, noises: np.ndarray,
                       class_ids, latents, sched: NoiseSchedule,
                       weighting=None, prefix: str = ""):
        """Denoising loss mean_b w_t ||pred - x0||^2 with exact gradients.

        Gradients cover the MLP and both embedding tables (class + latent
        conditioning), i.e. the whole denoiser stack and nothing else.
        """
        x0 = as_float_array(x0, "x0", ndim=2)
        n = x0.shape[0]
        if n == 0:
            raise ContractError("denoising loss needs a non-empty batch")
        ts = np.asarray(ts)
        w = np.ones(n) if weighting is None else as_float_array([weighting(int(t)) for t in ts], "weighting")
        alphas = sched.alphas[ts][:, None]
        sigmas = sched.sigmas[ts][:, None]
        x_t = alphas * x0 + sigmas * noises
        rows = self.class_rows(class_ids)
        token_rows = self.latent_token_rows(latents) if latents is not None else None
        inp = self._assemble(x_t, ts.astype(np.float64), rows, token_rows)
        pred, cache = nnet.forward_batch(self.mlp, inp)
        resid = pred - x0
        per_sample = np.sum(resid * resid, axis=1)
        loss = float(np.mean(w * per_sample))
        upstream = (2.0 / n) * w[:, None] * resid
        mlp_grads, gin = nnet.backward_batch(self.mlp, cache, upstream)
        grads = {prefix + "mlp." + k: v for k, v in mlp_grads.items()}
        lo = self.data_dim + TIME_FEATURE_DIM
        g_class = gin[:, lo:lo + self.class_emb_dim]
        g_latent = gin[:, lo + self.class_emb_dim:]
        grads[prefix + "class_emb"] = self.class_emb.grad_from(rows, g_class)
        lat_grad = np.zeros_like(self.latent_emb.table)
        for i in range(n):
            ids = None if token_rows is None else token_rows[i]
            if ids is None:
                lat_grad[self.null_latent_row] += g_latent[i]
            else:
                np.add.at(lat_grad, ids, g_latent[i] / len(ids))
        grads[prefix + "latent_emb"] = lat_grad
        return loss, grads

    # -- serialization --------------------------------------------------

    def to_jsonable(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "class_ids": self.class_ids,
            "vocab_tokens": list(self.vocab_tokens),
            "hidden": self.hidden,
            "activation": self.activation,
            "class_emb_dim": self.class_emb_dim,
            "latent_emb_dim": self.latent_emb_dim,
            "num_steps_hint": self.num_steps_hint,
            "params": nnet.params_to_jsonable(self.params()),
        }

    @classmethod
    def from_jsonable(cls, blob: dict) -> "CondDenoiser":
        net = cls(
            data_dim=blob["data_dim"],
            class_ids=list(blob["class_ids"]),
            vocab_tokens=tuple(blob["vocab_tokens"]),
            hidden=list(blob["hidden"]),
            rng=np.random.default_rng(0),
            activation=blob["activation"],
            class_emb_dim=blob["class_emb_dim"],
            latent_emb_dim=blob["latent_emb_dim"],
        )
        net.num_steps_hint = int(blob["num_steps_hint"])
        params = nnet.params_from_jsonable(blob["params"])
        for name, live in net.params().items():
            live[...] = params[name]
        return net


def denoise_loss(denoiser: CondDenoiser, x0: np.ndarray, class_ids, latents,
                 sched: NoiseSchedule, rng: np.random.Generator | None = None,
                 frozen=None, weighting=None):
    """Monte Carlo denoising objective over one batch.

    Per sample, t ~ Uniform{1..T} and noise ~ N(0, I) unless `frozen`
    supplies (ts, noises) — tests freeze them for finite-difference
    checks. Returns (loss, grads over the denoiser stack).
    """
    x0 = as_float_array(x0, "x0", ndim=2)
    if x0.shape[0] == 0:
        raise ContractError("denoising loss needs a non-empty batch")
    if frozen is not None:
        ts, noises = frozen
        ts = np.asarray(ts, dtype=np.intp)
        noises = as_float_array(noises, "noises", ndim=2)
    else:
        if rng is None:
            raise ContractError("denoise_loss needs an rng when stochasticity is not frozen")
        ts = rng.integers(1, sched.num_steps + 1, size=x0.shape[0])
        noises = rng.standard_normal(x0.shape)
    return denoiser.loss_and_grads(x0, ts, noises, class_ids, latents, sched, weighting)


# ---------------------------------------------------------------------------
# Guided prediction and sampling

def cfg_predict(denoiser, x_t: np.ndarray, t: int, class_ids, latents,
                guidance: float, cfg_drops_latent: bool = True) -> np.ndarray:
    """Classifier-free guided prediction.

    guided = uncond + guidance * (cond - uncond), where the conditional
    branch sees (class, latent) and the unconditional branch sees the
    null class — and also the null latent unless cfg_drops_latent is
    False.
    """
    if guidance < 0:
        raise ContractError(f"guidance must be >= 0, got {guidance}")
    cond = denoiser.predict_x0(x_t, t, class_ids, latents)
    null_ids = [None] * x_t.shape[0]
    uncond_latents = None if (cfg_drops_latent or latents is None) else latents
    uncond = denoiser.predict_x0(x_t, t, null_ids, uncond_latents)
    return uncond + guidance * (cond - uncond)


def sample_timegrid(num_steps: int, steps: int) -> np.ndarray:
    """Strictly decreasing timestep grid from T to 0 with `steps` jumps."""
    if not 1 <= steps <= num_steps:
        raise ContractError(f"steps must lie in [1, {num_steps}], got {steps}")
    grid = np.round(np.linspace(num_steps, 0, steps + 1)).astype(int)
    return grid


def ddpm_sample(denoiser, sched: NoiseSchedule, config: SamplerConfig, class_ids,
                latents=None, events: list | None = None,
                chain_offset: int = 0) -> np.ndarray:
    """Ancestral DDPM sampling, vectorized over chains.

    Each chain draws all of its noise from its own stream seeded by
    (config.seed, chain_offset + chain_index), so results are
    independent of batching. At every step the guided x0 prediction is
    clipped to config.x0_clip, then the chain moves through the Gaussian
    posterior q(x_s | x_t, x0_hat); the final transition to t=0 returns
    the posterior mean (exactly the predicted x0). Deterministic given
    the seed.
    """
    n = len(class_ids)
    if n == 0:
        raise ContractError("ddpm_sample needs at least one chain")
    if latents is not None and len(latents) != n:
        raise ContractError(f"got {len(latents)} latents for {n} chains")
    if latents is not None and not config.latent_conditioning:
        raise ContractError("latents supplied but latent_conditioning disabled in SamplerConfig")
    dim = denoiser.data_dim
    grid = sample_timegrid(sched.num_steps, config.steps)
    # per-chain noise: row 0 seeds x_T, later rows drive the posterior draws
    draws = np.empty((n, config.steps + 1, dim))
    for i in range(n):
        rng = substream(config.seed, "chain", chain_offset + i)
        draws[i] = rng.standard_normal((config.steps + 1, dim))
    x = draws[:, 0, :].copy()
    if events is not None:
        events.append(("denoise_begin", chain_offset, n))
    for k in range(config.steps):
        t, s = int(grid[k]), int(grid[k + 1])
        x0_hat = cfg_predict(denoiser, x, t, class_ids, latents, config.guidance,
                             config.cfg_drops_latent)
        if config.x0_clip is not None:
            x0_hat = np.clip(x0_hat, config.x0_clip[0], config.x0_clip[1])
        cx, c0, var = sched.posterior_coeffs(t, s)
        x = cx * x + c0 * x0_hat
        if var > 0:
            x = x + np.sqrt(var) * draws[:, k + 1, :]
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sampler state at step t={t} -> s={s}")
    if events is not None:
        events.append(("denoise_end", chain_offset, n))
    return x


# ---------------------------------------------------------------------------
# Analytic Gaussian-mixture oracle

def analytic_posterior_mean(spec: GmmSpec, x_t: np.ndarray, alpha: float, sigma: float,
                            mask: np.ndarray | None = None) -> np.ndarray:
    """Exact E[x0 | x_t] for diagonal-covariance mixtures.

    Component k contributes responsibility proportional to
    w_k * N(x_t; alpha mu_k, alpha^2 S_k + sigma^2 I) and posterior mean
    mu_k + alpha S_k (alpha^2 S_k + sigma^2 I)^-1 (x_t - alpha mu_k).
    `mask` restricts each row to a component subset (True = allowed).
    """
    x_t = as_float_array(x_t, "x_t", ndim=2)
    n, d = x_t.shape
    means = spec.means()          # [K, d]
    variances = spec.variances()  # [K, d]
    weights = spec.weights()      # [K]
    noisy_var = alpha**2 * variances + sigma**2          # [K, d]
    diff = x_t[:, None, :] - alpha * means[None, :, :]   # [n, K, d]
    log_r = (
        np.log(weights)[None, :]
        - 0.5 * np.sum(np.log(2.0 * np.pi * noisy_var), axis=1)[None, :]
        - 0.5 * np.sum(diff**2 / noisy_var[None, :, :], axis=2)
    )
    if mask is not None:
        if mask.shape != (n, len(weights)):
            raise ContractError(f"mask shape {mask.shape} != {(n, len(weights))}")
        if not mask.any(axis=1).all():
            raise ContractError("empty component subset for at least one row")
        log_r = np.where(mask, log_r, -np.inf)
    log_r -= log_r.max(axis=1, keepdims=True)
    resp = np.exp(log_r)
    resp /= resp.sum(axis=1, keepdims=True)
    post = means[None, :, :] + (alpha * variances[None, :, :] / noisy_var[None, :, :]) * diff
    return np.sum(resp[:, :, None] * post, axis=1)


def analytic_denoiser(spec: GmmSpec, x_t: np.ndarray, t: int, sched: NoiseSchedule,
                      components=None) -> np.ndarray:
    """E[x0 | x_t] at schedule step t, optionally restricted to a
    component index subset shared by all rows."""
    if not 0 <= t <= sched.num_steps:
        raise ContractError(f"t={t} outside [0, {sched.num_steps}]")
    x_t = np.atleast_2d(as_float_array(x_t, "x_t"))
    mask = None
    if components is not None:
        components = list(components)
        if not components:
            raise ContractError("empty component subset")
        mask = np.zeros((x_t.shape[0], len(spec.components)), dtype=bool)
        mask[:, components] = True
    return analytic_posterior_mean(spec, x_t, float(sched.alphas[t]), float(sched.sigmas[t]), mask)


class GmmDenoiser:
    """Denoiser-shaped wrapper around the analytic oracle.

    Conditioning maps to component subsets: a class id selects the
    class's components, a mode-label latent narrows to that single mode,
    and the null condition (None) means all components.
    """

    def __init__(self, spec: GmmSpec, sched: NoiseSchedule):
        self.spec = spec
        self.sched = sched
        self.data_dim = spec.dim

    def _subset_mask(self, n: int, class_ids, latents) -> np.ndarray:
        from .latents.vocab import mode_id_of_token

        k = len(self.spec.components)
        mask = np.zeros((n, k), dtype=bool)
        for i in range(n):
            class_id = class_ids[i]
            mode_id = None
            if latents is not None and latents[i] is not None:
                seq = latents[i]
                tokens = seq.payload if hasattr(seq, "payload") else tuple(seq)
                if len(tokens) != 1:
                    raise ContractError("oracle conditioning expects a single mode-label token")
                mode_id = mode_id_of_token(tokens[0])
            for j, comp in enumerate(self.spec.components):
                if class_id is not None and comp.class_id != class_id:
                    continue
                if mode_id is not None and comp.mode_id != mode_id:
                    continue
                mask[i, j] = True
            if not mask[i].any():
                raise ContractError(
                    f"empty component subset for class={class_id!r}, mode={mode_id!r}")
        return mask

    def predict_x0(self, x_t: np.ndarray, t, class_ids, latents=None) -> np.ndarray:
        if not np.isscalar(t):
            raise ContractError("GmmDenoiser expects one shared timestep per call")
        x_t = as_float_array(x_t, "x_t", ndim=2)
        mask = self._subset_mask(x_t.shape[0], class_ids, latents)
        return analytic_posterior_mean(
            self.spec, x_t, float(self.sched.alphas[int(t)]), float(self.sched.sigmas[int(t)]), mask
        )

    def predict(self, x_t: np.ndarray, cond: DenoiserCondition) -> np.ndarray:
        latents = [cond.latent] if cond.latent is not None else None
        return self.predict_x0(x_t[None, :], cond.t, [cond.class_id], latents)[0]
