"""Joint optimization of the latent-augmented denoiser and the AR prior,
plus the controlled no-latent baseline.

The controlled-pair construction: both variants build the identical
denoiser (same architecture, same init stream, latent channel always
present) and consume identical batch-index, (t, noise) and
condition-dropout streams, so the only difference between a baseline
and a kaleido run from one seed is what flows down the latent channel.

Total loss is L_DM + eta * L_AR with one global gradient clip across
the union of denoiser and (neural) prior parameters.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .data import CanvasSpec, GmmSpec, LabeledSample
from .diffusion import (
    DEFAULT_SAMPLE_STEPS,
    CondDenoiser,
    NoiseSchedule,
    SamplerConfig,
    ddpm_sample,
    make_schedule,
)
from .errors import ContractError, NonFiniteError
from .latents.codebook import KMeansCodebook
from .latents.prior import NeuralArPrior, TabularArPrior, ar_nll, ar_sample
from .latents.vocab import LatentSequence, LatentVocab, vocab_for_scheme
from .validation import atomic_write_json, substream

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "kaleido")
PRIOR_BACKENDS = ("tabular", "neural")

# eta and p_uncond are exposed choices, not reference values
DEFAULT_AR_WEIGHT = 1.0
DEFAULT_P_UNCOND = 0.1


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe; serialized with every field explicit."""

    variant: str
    latent_scheme: str = "text"
    ar_weight: float = DEFAULT_AR_WEIGHT
    p_uncond: float = DEFAULT_P_UNCOND
    batch_size: int = 128
    steps: int = 20_000
    lr: float = 1e-3
    warmup_steps: int = 500
    # decaying lr to zero polishes both branches toward the same near-exact
    # denoiser, leaving guidance little approximation error to act on; the
    # constant default keeps the finite-capacity regime the sweep measures
    lr_schedule: str = "constant"
    # reference decay 0.9999 assumes a 400k-step schedule; at 20k steps it
    # would still hold ~14% of the random init, so the default scales with
    # the shortened schedule
    ema_decay: float = 0.999
    clip_norm: float = nnet.DEFAULT_CLIP_NORM
    seed: int = 0
    sched_kind: str = "cosine"
    sched_steps: int = DEFAULT_SAMPLE_STEPS
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    class_emb_dim: int = 8
    latent_emb_dim: int = 8
    prior_backend: str = "tabular"
    prior_context_window: int = 8
    prior_smoothing: float = 1.0
    prior_emb_dim: int = 8
    prior_class_dim: int = 4
    prior_hidden: tuple[int, ...] = (32,)
    x0_clip: tuple[float, float] = (-4.5, 4.5)
    # "snr" multiplies the x0 loss by clip(alpha^2/sigma^2, floor, cap),
    # shifting effort toward low-noise steps whose predictions dominate
    # the terminal sample under high guidance
    time_weighting: str = "uniform"
    snr_floor: float = 0.1
    snr_cap: float = 5.0
    log_every: int = 200
    checkpoint_every: int = 5000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.prior_backend not in PRIOR_BACKENDS:
            raise ContractError(f"prior_backend must be one of {PRIOR_BACKENDS}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ContractError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.ar_weight < 0:
            raise ContractError(f"ar_weight must be >= 0, got {self.ar_weight}")
        if self.batch_size < 1 or self.steps < 1:
            raise ContractError("batch_size and steps must be >= 1")
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.warmup_steps < 0:
            raise ContractError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ContractError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.time_weighting not in ("uniform", "snr"):
            raise ContractError(f"time_weighting must be 'uniform' or 'snr', got {self.time_weighting!r}")
        if not 0.0 < self.snr_floor <= self.snr_cap:
            raise ContractError("need 0 < snr_floor <= snr_cap")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ContractError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "prior_hidden", tuple(self.prior_hidden))
        object.__setattr__(self, "x0_clip", tuple(self.x0_clip))

    def to_jsonable(self) -> dict:
        blob = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            blob[name] = list(v) if isinstance(v, tuple) else v
        return blob

    @classmethod
    def from_jsonable(cls, blob: dict) -> "TrainConfig":
        missing = set(cls.__dataclass_fields__) - set(blob)
        if missing:
            raise ContractError(f"config file missing fields: {sorted(missing)}")
        extra = set(blob) - set(cls.__dataclass_fields__)
        if extra:
            raise ContractError(f"config file has unknown fields: {sorted(extra)}")
        kwargs = dict(blob)
        for name in ("hidden", "prior_hidden", "x0_clip"):
            kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass
class TrainLog:
    """Per-interval loss records with strictly increasing steps."""

    rows: list[dict] = field(default_factory=list)

    FIELDS = ("step", "loss_dm", "loss_ar", "loss_total", "grad_norm", "wallclock")

    def append(self, **row) -> None:
        if set(row) != set(self.FIELDS):
            raise ContractError(f"log row fields must be {self.FIELDS}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ContractError("log steps must strictly increase")
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def vocab_for_dataset(scheme: str, spec, codebook_size: int = 0) -> LatentVocab:
    """The latent vocabulary implied by (scheme, dataset spec)."""
    if isinstance(spec, GmmSpec):
        return vocab_for_scheme(scheme, mode_ids=spec.mode_ids())
    if isinstance(spec, CanvasSpec):
        counts = list(range(spec.min_bumps, spec.max_bumps + 1))
        return vocab_for_scheme(scheme, bump_counts=counts, codebook_size=codebook_size)
    raise ContractError(f"unsupported dataset spec {type(spec).__name__}")


def fit_tabular_prior(corpus, vocab: LatentVocab, smoothing: float = 1.0,
                      context_window: int = 8) -> TabularArPrior:
    """Closed-form count-table fit over (class_id, LatentSequence) pairs."""
    return TabularArPrior(vocab=vocab, context_window=context_window,
                          smoothing=smoothing).fit(corpus)


@dataclass
class TrainState:
    """Mutable training state owned by one run."""

    config: TrainConfig
    sched: NoiseSchedule
    denoiser: CondDenoiser
    ema_denoiser: CondDenoiser
    prior: TabularArPrior | NeuralArPrior | None
    ema_prior: NeuralArPrior | None
    adam: nnet.AdamState
    step: int = 0

    def loss_weighting(self):
        """Per-timestep loss weight callable, or None for uniform."""
        cfg = self.config
        if cfg.time_weighting == "uniform":
            return None
        snr = self.sched.snr()
        return lambda t: float(np.clip(snr[t], cfg.snr_floor, cfg.snr_cap))

    def trainable_params(self) -> dict[str, np.ndarray]:
        params = self.denoiser.params("den.")
        if self.config.variant == "kaleido" and isinstance(self.prior, NeuralArPrior):
            params.update(self.prior.params("prior."))
        return params

    def lr_at(self, step: int) -> float:
        cfg = self.config
        if cfg.warmup_steps > 0 and step + 1 <= cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        if cfg.lr_schedule == "constant":
            return cfg.lr
        span = max(1, cfg.steps - cfg.warmup_steps)
        frac = min(1.0, (step + 1 - cfg.warmup_steps) / span)
        return max(cfg.lr * 1e-4, cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac)))


def init_state(config: TrainConfig, spec, codebook: KMeansCodebook | None = None,
               prior: TabularArPrior | None = None) -> TrainState:
    """Build denoiser (+ prior) with the shared-init stream discipline.

    The denoiser always draws from substream(seed, 'init') regardless of
    variant; prior initialization uses its own stream, so a baseline and
    a kaleido run from one seed share bit-identical denoiser init.
    """
    codebook_size = 0 if codebook is None else codebook.centroids_.shape[0]
    vocab = vocab_for_dataset(config.latent_scheme, spec, codebook_size)
    init_rng = substream(config.seed, "init")
    denoiser = CondDenoiser(
        data_dim=spec.dim if isinstance(spec, GmmSpec) else spec.data_dim,
        class_ids=spec.class_ids(),
        vocab_tokens=vocab.tokens,
        hidden=list(config.hidden),
        rng=init_rng,
        activation=config.activation,
        class_emb_dim=config.class_emb_dim,
        latent_emb_dim=config.latent_emb_dim,
    )
    denoiser.num_steps_hint = config.sched_steps
    sched = make_schedule(config.sched_kind, config.sched_steps)
    run_prior: TabularArPrior | NeuralArPrior | None = None
    ema_prior = None
    if config.variant == "kaleido":
        if config.prior_backend == "tabular":
            if prior is None:
                raise ContractError("kaleido with tabular backend needs a fitted prior")
            run_prior = prior
        else:
            run_prior = NeuralArPrior(
                vocab=vocab, class_ids=spec.class_ids(),
                context_window=config.prior_context_window,
                emb_dim=config.prior_emb_dim, class_dim=config.prior_class_dim,
                hidden=list(config.prior_hidden), seed=config.seed,
            )
            ema_prior = run_prior.copy()
    state = TrainState(
        config=config, sched=sched, denoiser=denoiser, ema_denoiser=denoiser.copy(),
        prior=run_prior, ema_prior=ema_prior,
        adam=nnet.AdamState.for_params({}),
    )
    state.adam = nnet.AdamState.for_params(state.trainable_params())
    return state


def joint_step(state: TrainState, batch, ts, noises, drop_mask):
    """One optimization step on a batch of (LabeledSample, latent) pairs.

    (t, noise, dropout) come from the caller so the controlled pair and
    finite-difference tests control them exactly. Dropped samples train
    the unconditional branch: class and latent fall to the null sentinel
    together. With a neural prior, L_AR gradients join L_DM gradients
    under one global clip; a tabular prior contributes L_AR as a number
    only.
    """
    cfg = state.config
    if not batch:
        raise ContractError("empty batch")
    x0 = np.stack([sample.x for sample, _ in batch])
    drop_mask = np.asarray(drop_mask, dtype=bool)
    class_ids = []
    latents = []
    for i, (sample, seq) in enumerate(batch):
        dropped = bool(drop_mask[i])
        class_ids.append(None if dropped else sample.class_id)
        if cfg.variant == "kaleido":
            if seq is None:
                raise ContractError("kaleido training needs a latent per sample")
            latents.append(None if dropped else seq)
        else:
            latents.append(None)
    loss_dm, grads = state.denoiser.loss_and_grads(
        x0, ts, noises, class_ids, latents, state.sched,
        weighting=state.loss_weighting(), prefix="den.")
    loss_ar = 0.0
    eta = cfg.ar_weight if cfg.variant == "kaleido" else 0.0
    if cfg.variant == "kaleido":
        pairs = [(sample.class_id, seq) for sample, seq in batch]
        if isinstance(state.prior, NeuralArPrior):
            loss_ar, ar_grads = state.prior.nll_and_grads(pairs, prefix="prior.")
            if eta != 0.0:
                for k, g in ar_grads.items():
                    grads[k] = eta * g
            else:
                for k in state.prior.params("prior."):
                    grads[k] = np.zeros_like(state.prior.params("prior.")[k])
        else:
            loss_ar = float(np.mean([ar_nll(state.prior, seq, c) for c, seq in pairs]))
    loss_total = loss_dm + eta * loss_ar
    if not np.isfinite(loss_total):
        raise NonFiniteError(f"non-finite loss at step {state.step}")
    params = state.trainable_params()
    lr = state.lr_at(state.step)
    grad_norm = nnet.adam_step(params, grads, state.adam, lr=lr, clip_norm=cfg.clip_norm)
    nnet.ema_update(state.ema_denoiser.params(), state.denoiser.params(), cfg.ema_decay)
    if state.ema_prior is not None:
        nnet.ema_update(state.ema_prior.params(), state.prior.params(), cfg.ema_decay)
    state.step += 1
    return {"loss_dm": loss_dm, "loss_ar": loss_ar, "loss_total": loss_total,
            "grad_norm": grad_norm}


def train(config: TrainConfig, dataset: list[LabeledSample], spec,
          latents: list[LatentSequence] | None = None,
          codebook: KMeansCodebook | None = None,
          out_dir=None) -> tuple["Checkpoint", TrainLog]:
    """Full training run; deterministic given (config, dataset).

    kaleido needs precomputed latents aligned with the dataset; with the
    tabular backend the prior is fit in closed form before the loop. A
    non-finite loss aborts with the last periodic checkpoint retained
    on disk.
    """
    if config.variant == "kaleido":
        if latents is None:
            raise ContractError("kaleido training needs precomputed latents")
        if len(latents) != len(dataset):
            raise ContractError("latents misaligned with dataset")
    prior = None
    if config.variant == "kaleido" and config.prior_backend == "tabular":
        codebook_size = 0 if codebook is None else codebook.centroids_.shape[0]
        vocab = vocab_for_dataset(config.latent_scheme, spec, codebook_size)
        corpus = [(s.class_id, z) for s, z in zip(dataset, latents)]
        prior = fit_tabular_prior(corpus, vocab, smoothing=config.prior_smoothing,
                                  context_window=config.prior_context_window)
    state = init_state(config, spec, codebook=codebook, prior=prior)
    batch_rng = substream(config.seed, "batch")
    diff_rng = substream(config.seed, "diff")
    drop_rng = substream(config.seed, "drop")
    log = TrainLog()
    t_start = time.monotonic()
    n = len(dataset)
    d = dataset[0].x.shape[0]
    last_losses = None
    for step in range(config.steps):
        idx = batch_rng.integers(n, size=config.batch_size)
        batch = [(dataset[i], latents[i] if latents is not None else None) for i in idx]
        ts = diff_rng.integers(1, config.sched_steps + 1, size=config.batch_size)
        noises = diff_rng.standard_normal((config.batch_size, d))
        drop = drop_rng.random(config.batch_size) < config.p_uncond
        try:
            last_losses = joint_step(state, batch, ts, noises, drop)
        except NonFiniteError:
            logger.error("aborting at step %d; last periodic checkpoint retained", step)
            raise
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            log.append(step=step + 1, wallclock=time.monotonic() - t_start, **last_losses)
        if out_dir is not None and (
                (step + 1) % config.checkpoint_every == 0 or step + 1 == config.steps):
            make_checkpoint(state, spec, codebook, last_losses).save(
                f"{out_dir}/checkpoint.json")
    ckpt = make_checkpoint(state, spec, codebook, last_losses)
    return ckpt, log


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    """Self-contained training artifact: config, dataset spec, denoiser
    (live + EMA), prior, codebook and optimizer moments."""

    config: TrainConfig
    step: int
    dataset_kind: str
    spec_blob: dict
    denoiser: CondDenoiser
    ema_denoiser: CondDenoiser
    prior: TabularArPrior | NeuralArPrior | None
    ema_prior: NeuralArPrior | None
    codebook: KMeansCodebook | None
    adam_blob: dict
    final_losses: dict | None

    def spec(self):
        if self.dataset_kind == "gmm":
            return GmmSpec.from_jsonable(self.spec_blob)
        if self.dataset_kind == "canvas":
            return CanvasSpec.from_jsonable(self.spec_blob)
        raise ContractError(f"unknown dataset kind {self.dataset_kind!r}")

    def to_jsonable(self) -> dict:
        prior_blob = None
        if isinstance(self.prior, TabularArPrior):
            prior_blob = {
                "backend": "tabular",
                "vocab": self.prior.vocab.to_jsonable(),
                "context_window": self.prior.context_window,
                "smoothing": self.prior.smoothing,
                "classes": self.prior.classes_,
                "counts": [
                    [c, list(ctx), row.tolist()]
                    for (c, ctx), row in sorted(self.prior.counts_.items())
                ],
            }
        elif isinstance(self.prior, NeuralArPrior):
            prior_blob = {"backend": "neural", "model": self.prior.to_jsonable(),
                          "ema_model": self.ema_prior.to_jsonable()}
        return {
            "config": self.config.to_jsonable(),
            "step": self.step,
            "dataset_kind": self.dataset_kind,
            "spec": self.spec_blob,
            "denoiser": self.denoiser.to_jsonable(),
            "ema_denoiser": self.ema_denoiser.to_jsonable(),
            "prior": prior_blob,
            "codebook": None if self.codebook is None else self.codebook.to_jsonable(),
            "adam": self.adam_blob,
            "final_losses": self.final_losses,
        }

    def save(self, path) -> None:
        atomic_write_json(path, self.to_jsonable())

    @classmethod
    def from_jsonable(cls, blob: dict) -> "Checkpoint":
        config = TrainConfig.from_jsonable(blob["config"])
        prior = ema_prior = None
        pb = blob["prior"]
        if pb is not None and pb["backend"] == "tabular":
            prior = TabularArPrior(
                vocab=LatentVocab.from_jsonable(pb["vocab"]),
                context_window=pb["context_window"], smoothing=pb["smoothing"])
            prior.classes_ = list(pb["classes"])
            prior.counts_ = {
                (c, tuple(ctx)): np.array(row) for c, ctx, row in pb["counts"]
            }
        elif pb is not None:
            prior = NeuralArPrior.from_jsonable(pb["model"])
            ema_prior = NeuralArPrior.from_jsonable(pb["ema_model"])
        return cls(
            config=config,
            step=blob["step"],
            dataset_kind=blob["dataset_kind"],
            spec_blob=blob["spec"],
            denoiser=CondDenoiser.from_jsonable(blob["denoiser"]),
            ema_denoiser=CondDenoiser.from_jsonable(blob["ema_denoiser"]),
            prior=prior,
            ema_prior=ema_prior,
            codebook=(None if blob["codebook"] is None
                      else KMeansCodebook.from_jsonable(blob["codebook"])),
            adam_blob=blob["adam"],
            final_losses=blob["final_losses"],
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonable(json.load(fh))


def make_checkpoint(state: TrainState, spec, codebook, final_losses) -> Checkpoint:
    kind = "gmm" if isinstance(spec, GmmSpec) else "canvas"
    adam_blob = {
        "step": state.adam.step,
        "m": nnet.params_to_jsonable(state.adam.m),
        "v": nnet.params_to_jsonable(state.adam.v),
    }
    return Checkpoint(
        config=state.config, step=state.step, dataset_kind=kind,
        spec_blob=spec.to_jsonable(), denoiser=state.denoiser,
        ema_denoiser=state.ema_denoiser, prior=state.prior,
        ema_prior=state.ema_prior, codebook=codebook,
        adam_blob=adam_blob, final_losses=final_losses,
    )


# ---------------------------------------------------------------------------
# Sampling from a checkpoint

def draw_latents(ckpt: Checkpoint, class_ids, n: int | None = None,
                 temperature: float = 1.0, seed: int = 0,
                 use_ema: bool = True) -> list[LatentSequence]:
    """Prior stage of two-stage sampling, exposed for the editing loop.

    Uses the identical per-chain substream as sample_from, so an edit
    file emitted from (ckpt, class_ids, seed) and fed back verbatim
    regenerates with the same z per chain.
    """
    if isinstance(class_ids, str):
        if n is None or n < 1:
            raise ContractError(f"n must be >= 1, got {n}")
        class_ids = [class_ids] * n
    class_ids = list(class_ids)
    if ckpt.config.variant != "kaleido":
        raise ContractError("latent drawing needs a kaleido checkpoint")
    prior = ckpt.ema_prior if (use_ema and ckpt.ema_prior is not None) else ckpt.prior
    zs = []
    for i, c in enumerate(class_ids):
        z = ar_sample(prior, c, temperature=temperature, seed=substream(seed, "z", i))
        if z.truncated:
            raise ContractError(f"prior emitted a truncated latent for chain {i}")
        zs.append(z)
    return zs


def sample_from(ckpt: Checkpoint, class_ids, n: int | None = None,
                guidance: float = 1.0, seed: int = 0, steps: int | None = None,
                latents: list[LatentSequence] | None = None,
                temperature: float = 1.0, use_ema: bool = True,
                events: list | None = None, max_block: int = 4096):
    """Two-stage generation: draw z from the prior per chain (kaleido),
    then run guided ancestral diffusion conditioned on (c, z).

    class_ids may be a single id or a per-chain list. With explicit
    latents the prior stage is skipped and sequences are used verbatim.
    Per-chain substreams make the output independent of blocking.
    Returns (samples, conditioned latents or None).
    """
    if isinstance(class_ids, str) or class_ids is None:
        if n is None or n < 1:
            raise ContractError(f"n must be >= 1, got {n}")
        class_ids = [class_ids] * n
    class_ids = list(class_ids)
    n = len(class_ids)
    if n == 0:
        raise ContractError("need at least one chain")
    config = ckpt.config
    kaleido = config.variant == "kaleido"
    denoiser = ckpt.ema_denoiser if use_ema else ckpt.denoiser
    sched = make_schedule(config.sched_kind, config.sched_steps)
    zs: list[LatentSequence] | None = None
    if kaleido:
        if latents is not None:
            if len(latents) != n:
                raise ContractError(f"got {len(latents)} latents for {n} chains")
            zs = list(latents)
        else:
            zs = draw_latents(ckpt, class_ids, temperature=temperature,
                              seed=seed, use_ema=use_ema)
        for i, z in enumerate(zs):
            logger.info("chain %d latent: %s", i, z.surface())
            if events is not None:
                events.append(("latent", i, z.surface()))
    elif latents is not None:
        raise ContractError("baseline checkpoints cannot condition on latents")
    sampler = SamplerConfig(
        guidance=guidance, steps=steps if steps is not None else config.sched_steps,
        seed=seed, latent_conditioning=kaleido, x0_clip=config.x0_clip)
    out = np.empty((n, denoiser.data_dim))
    for lo in range(0, n, max_block):
        hi = min(n, lo + max_block)
        out[lo:hi] = ddpm_sample(
            denoiser, sched, sampler, class_ids[lo:hi],
            latents=None if zs is None else zs[lo:hi],
            events=events, chain_offset=lo)
    return out, zs
