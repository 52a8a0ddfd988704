"""Training-loop contracts: config validation, schedule arithmetic, the
shared-init controlled pair, loss bookkeeping, checkpoint round trips
and the sampling entry points."""

import dataclasses
import json

import numpy as np
import pytest

from kaleido.data import sample_dataset, toy_gmm_default
from kaleido.errors import ContractError
from kaleido.latents.extract import extract_latent
from kaleido.latents.prior import NeuralArPrior, TabularArPrior
from kaleido.train import (
    Checkpoint,
    TrainConfig,
    TrainLog,
    draw_latents,
    fit_tabular_prior,
    init_state,
    joint_step,
    sample_from,
    train,
    vocab_for_dataset,
)
from kaleido.validation import substream

TINY = dict(steps=30, batch_size=16, hidden=(8,), sched_steps=16,
            warmup_steps=5, log_every=10, seed=3)


def tiny_config(variant="baseline", **kw):
    return TrainConfig(variant=variant, **{**TINY, **kw})


def corpus_of(dataset, spec):
    return [extract_latent(s.x, s.class_id, "text", spec) for s in dataset]


def fitted_prior(dataset, spec, config):
    vocab = vocab_for_dataset("text", spec)
    pairs = [(s.class_id, z) for s, z in zip(dataset, corpus_of(dataset, spec))]
    return fit_tabular_prior(pairs, vocab, smoothing=config.prior_smoothing,
                             context_window=config.prior_context_window)


# ---------------------------------------------------------------------------
# config

def test_config_rejects_bad_fields():
    for kw in (dict(variant="both"), dict(p_uncond=1.0), dict(p_uncond=-0.01),
               dict(lr=0.0), dict(ema_decay=1.5), dict(lr_schedule="step"),
               dict(time_weighting="sqrt"), dict(snr_floor=2.0, snr_cap=1.0),
               dict(batch_size=0), dict(ar_weight=-1.0)):
        with pytest.raises(ContractError):
            tiny_config(**kw)


def test_config_json_round_trip():
    cfg = tiny_config("kaleido", hidden=(12, 7), x0_clip=(-2.0, 2.0))
    blob = json.loads(json.dumps(cfg.to_jsonable()))
    assert TrainConfig.from_jsonable(blob) == cfg


def test_config_json_strictness():
    blob = tiny_config().to_jsonable()
    partial = dict(blob)
    del partial["lr"]
    with pytest.raises(ContractError, match="lr"):
        TrainConfig.from_jsonable(partial)
    extra = dict(blob, mystery=1)
    with pytest.raises(ContractError, match="mystery"):
        TrainConfig.from_jsonable(extra)


# ---------------------------------------------------------------------------
# learning-rate schedule

def test_lr_warmup_is_linear(gmm_spec):
    cfg = tiny_config(lr=1.0, warmup_steps=10, lr_schedule="constant")
    state = init_state(cfg, gmm_spec)
    assert state.lr_at(0) == pytest.approx(0.1)
    assert state.lr_at(4) == pytest.approx(0.5)
    assert state.lr_at(9) == pytest.approx(1.0)
    assert state.lr_at(20) == pytest.approx(1.0)


def test_lr_cosine_midpoint_and_floor(gmm_spec):
    cfg = tiny_config(lr=1.0, warmup_steps=0, steps=100, lr_schedule="cosine")
    state = init_state(cfg, gmm_spec)
    assert state.lr_at(49) == pytest.approx(0.5, abs=0.02)
    # tail never reaches zero so the optimizer stays well defined
    assert state.lr_at(99) >= 1e-4
    assert min(state.lr_at(s) for s in range(100)) >= 1e-4


# ---------------------------------------------------------------------------
# log

def test_trainlog_monotone_steps():
    log = TrainLog()
    log.append(step=10, loss_dm=1.0, loss_ar=0.0, loss_total=1.0,
               grad_norm=0.5, wallclock=0.1)
    with pytest.raises(ContractError):
        log.append(step=10, loss_dm=1.0, loss_ar=0.0, loss_total=1.0,
                   grad_norm=0.5, wallclock=0.2)
    with pytest.raises(ContractError):
        log.append(step=20, loss=1.0)
    log.append(step=20, loss_dm=0.9, loss_ar=0.0, loss_total=0.9,
               grad_norm=0.4, wallclock=0.2)
    lines = log.to_csv().strip().split("\n")
    assert lines[0] == "step,loss_dm,loss_ar,loss_total,grad_norm,wallclock"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# vocab plumbing

def test_vocab_for_dataset_variants(gmm_spec):
    from kaleido.data import CanvasSpec

    v = vocab_for_dataset("text", gmm_spec)
    assert "mode_0A" in v.tokens and "mode_1B" in v.tokens
    cv = vocab_for_dataset("text", CanvasSpec())
    assert "count_1" in cv.tokens and "count_2" in cv.tokens
    vk = vocab_for_dataset("voken", CanvasSpec(), codebook_size=3)
    assert "v2" in vk.tokens and "v3" not in vk.tokens
    with pytest.raises(ContractError):
        vocab_for_dataset("text", object())


# ---------------------------------------------------------------------------
# controlled pair init

def test_shared_denoiser_init_across_variants(gmm_spec, small_dataset):
    cfg_b = tiny_config("baseline")
    cfg_k = tiny_config("kaleido")
    prior = fitted_prior(small_dataset, gmm_spec, cfg_k)
    sb = init_state(cfg_b, gmm_spec)
    sk = init_state(cfg_k, gmm_spec, prior=prior)
    for name, p in sb.denoiser.params().items():
        assert np.array_equal(p, sk.denoiser.params()[name]), name


def test_ema_starts_as_copy(gmm_spec):
    state = init_state(tiny_config(), gmm_spec)
    for name, p in state.denoiser.params().items():
        ema = state.ema_denoiser.params()[name]
        assert np.array_equal(p, ema)
        assert p is not ema


def test_kaleido_tabular_needs_prior(gmm_spec):
    with pytest.raises(ContractError):
        init_state(tiny_config("kaleido"), gmm_spec)


# ---------------------------------------------------------------------------
# joint step

def frozen_batch(dataset, spec, n=8, with_latents=True):
    zs = corpus_of(dataset[:n], spec) if with_latents else [None] * n
    batch = list(zip(dataset[:n], zs))
    rng = substream(5, "frozen")
    ts = rng.integers(1, TINY["sched_steps"] + 1, size=n)
    noises = rng.standard_normal((n, 2))
    drop = np.zeros(n, dtype=bool)
    drop[-2:] = True
    return batch, ts, noises, drop


def test_joint_step_loss_additivity(gmm_spec, small_dataset):
    cfg = tiny_config("kaleido", ar_weight=0.7)
    state = init_state(cfg, gmm_spec, prior=fitted_prior(small_dataset, gmm_spec, cfg))
    batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec)
    out = joint_step(state, batch, ts, noises, drop)
    assert out["loss_total"] == pytest.approx(out["loss_dm"] + 0.7 * out["loss_ar"], abs=1e-15)
    assert out["loss_ar"] > 0.0
    assert state.step == 1


def test_joint_step_baseline_reports_zero_ar(gmm_spec, small_dataset):
    state = init_state(tiny_config("baseline"), gmm_spec)
    batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec, with_latents=False)
    out = joint_step(state, batch, ts, noises, drop)
    assert out["loss_ar"] == 0.0
    assert out["loss_total"] == out["loss_dm"]


def test_joint_step_kaleido_requires_latents(gmm_spec, small_dataset):
    cfg = tiny_config("kaleido")
    state = init_state(cfg, gmm_spec, prior=fitted_prior(small_dataset, gmm_spec, cfg))
    batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec, with_latents=False)
    with pytest.raises(ContractError):
        joint_step(state, batch, ts, noises, drop)


def test_joint_step_all_dropped_is_unconditional(gmm_spec, small_dataset):
    state = init_state(tiny_config("baseline"), gmm_spec)
    batch, ts, noises, _ = frozen_batch(small_dataset, gmm_spec, with_latents=False)
    out = joint_step(state, batch, ts, noises, np.ones(len(batch), dtype=bool))
    assert np.isfinite(out["loss_total"])


def test_joint_step_empty_batch_rejected(gmm_spec):
    state = init_state(tiny_config("baseline"), gmm_spec)
    with pytest.raises(ContractError):
        joint_step(state, [], np.array([]), np.zeros((0, 2)), np.array([]))


def test_joint_step_zero_ar_weight_freezes_prior(gmm_spec, small_dataset):
    cfg = tiny_config("kaleido", prior_backend="neural", ar_weight=0.0)
    state = init_state(cfg, gmm_spec)
    before = {k: v.copy() for k, v in state.prior.params().items()}
    batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec)
    joint_step(state, batch, ts, noises, drop)
    for k, v in state.prior.params().items():
        assert np.array_equal(v, before[k]), k


def test_joint_step_moves_denoiser(gmm_spec, small_dataset):
    state = init_state(tiny_config("baseline"), gmm_spec)
    before = {k: v.copy() for k, v in state.denoiser.params().items()}
    batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec, with_latents=False)
    joint_step(state, batch, ts, noises, drop)
    assert any(not np.array_equal(v, before[k])
               for k, v in state.denoiser.params().items())


def test_joint_step_deterministic(gmm_spec, small_dataset):
    cfg = tiny_config("kaleido", ar_weight=1.0)
    prior = fitted_prior(small_dataset, gmm_spec, cfg)
    outs = []
    nets = []
    for _ in range(2):
        state = init_state(cfg, gmm_spec, prior=prior)
        batch, ts, noises, drop = frozen_batch(small_dataset, gmm_spec)
        outs.append(joint_step(state, batch, ts, noises, drop))
        nets.append(state.denoiser.params())
    assert outs[0] == outs[1]
    for k in nets[0]:
        assert np.array_equal(nets[0][k], nets[1][k])


# ---------------------------------------------------------------------------
# full runs

def test_train_deterministic_end_to_end(gmm_spec, small_dataset, small_latents):
    cfg = tiny_config("kaleido")
    a, log_a = train(cfg, small_dataset, gmm_spec, latents=small_latents)
    b, log_b = train(cfg, small_dataset, gmm_spec, latents=small_latents)
    for k, v in a.denoiser.params().items():
        assert np.array_equal(v, b.denoiser.params()[k])
    # wallclock is the one log column allowed to differ between runs
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wallclock"} for r in rows]
    assert strip(log_a.rows) == strip(log_b.rows)
    assert a.step == cfg.steps


def test_train_kaleido_latent_contracts(gmm_spec, small_dataset, small_latents):
    with pytest.raises(ContractError):
        train(tiny_config("kaleido"), small_dataset, gmm_spec)
    with pytest.raises(ContractError):
        train(tiny_config("kaleido"), small_dataset, gmm_spec,
              latents=small_latents[:-1])


def test_train_ema_decay_zero_tracks_online(gmm_spec, small_dataset):
    ckpt, _ = train(tiny_config("baseline", ema_decay=0.0, steps=10),
                    small_dataset, gmm_spec)
    for k, v in ckpt.denoiser.params().items():
        assert np.array_equal(v, ckpt.ema_denoiser.params()[k])


def test_train_ema_decay_one_freezes_init(gmm_spec, small_dataset):
    cfg = tiny_config("baseline", ema_decay=1.0, steps=10)
    init = init_state(cfg, gmm_spec).denoiser
    ckpt, _ = train(cfg, small_dataset, gmm_spec)
    for k, v in init.params().items():
        assert np.array_equal(v, ckpt.ema_denoiser.params()[k])
        assert not np.array_equal(v, ckpt.denoiser.params()[k])


def test_train_writes_periodic_checkpoint(tmp_path, gmm_spec, small_dataset):
    cfg = tiny_config("baseline", steps=12, checkpoint_every=5)
    ckpt, _ = train(cfg, small_dataset, gmm_spec, out_dir=tmp_path)
    on_disk = Checkpoint.load(tmp_path / "checkpoint.json")
    assert on_disk.step == 12
    for k, v in ckpt.denoiser.params().items():
        assert np.array_equal(v, on_disk.denoiser.params()[k])


def test_train_loss_decreases_on_average(gmm_spec, small_dataset):
    cfg = tiny_config("baseline", steps=400, log_every=50, lr=3e-3, seed=0)
    _, log = train(cfg, small_dataset, gmm_spec)
    first, last = log.rows[0]["loss_dm"], log.rows[-1]["loss_dm"]
    assert last < first


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_tabular(tmp_path, gmm_spec, small_dataset, small_latents):
    cfg = tiny_config("kaleido", steps=8)
    ckpt, _ = train(cfg, small_dataset, gmm_spec, latents=small_latents)
    path = tmp_path / "ck.json"
    ckpt.save(path)
    again = Checkpoint.load(path)
    assert again.config == cfg
    assert again.dataset_kind == "gmm"
    assert again.spec().to_jsonable() == gmm_spec.to_jsonable()
    for k, v in ckpt.denoiser.params().items():
        assert np.array_equal(v, again.denoiser.params()[k])
    assert isinstance(again.prior, TabularArPrior)
    assert set(again.prior.counts_) == set(ckpt.prior.counts_)
    for k in ckpt.prior.counts_:
        assert np.array_equal(again.prior.counts_[k], ckpt.prior.counts_[k])
    probs_a = ckpt.prior.next_log_probs("0", ())
    probs_b = again.prior.next_log_probs("0", ())
    assert np.array_equal(probs_a, probs_b)


def test_checkpoint_round_trip_neural(tmp_path, gmm_spec, small_dataset, small_latents):
    cfg = tiny_config("kaleido", steps=8, prior_backend="neural")
    ckpt, _ = train(cfg, small_dataset, gmm_spec, latents=small_latents)
    path = tmp_path / "ck.json"
    ckpt.save(path)
    again = Checkpoint.load(path)
    assert isinstance(again.prior, NeuralArPrior)
    for k, v in ckpt.prior.params().items():
        assert np.array_equal(v, again.prior.params()[k])
    for k, v in ckpt.ema_prior.params().items():
        assert np.array_equal(v, again.ema_prior.params()[k])


# ---------------------------------------------------------------------------
# sampling entry points

@pytest.fixture(scope="module")
def trained_pair(gmm_spec_module, dataset_module):
    dataset, latents = dataset_module
    cfg_b = tiny_config("baseline", steps=60)
    cfg_k = tiny_config("kaleido", steps=60)
    ckpt_b, _ = train(cfg_b, dataset, gmm_spec_module)
    ckpt_k, _ = train(cfg_k, dataset, gmm_spec_module, latents=latents)
    return ckpt_b, ckpt_k


@pytest.fixture(scope="module")
def gmm_spec_module():
    return toy_gmm_default(unequal=True)


@pytest.fixture(scope="module")
def dataset_module(gmm_spec_module):
    ds = sample_dataset(gmm_spec_module, 256, seed=11)
    zs = [extract_latent(s.x, s.class_id, "text", gmm_spec_module) for s in ds]
    return ds, zs


def test_draw_latents_contracts(trained_pair):
    ckpt_b, ckpt_k = trained_pair
    with pytest.raises(ContractError):
        draw_latents(ckpt_b, "0", n=4, seed=0)
    zs = draw_latents(ckpt_k, "0", n=6, seed=0)
    assert len(zs) == 6
    assert all(z.scheme == "text" and len(z.payload) == 1 for z in zs)
    assert zs == draw_latents(ckpt_k, "0", n=6, seed=0)
    assert zs != draw_latents(ckpt_k, "0", n=6, seed=1)


def test_draw_latents_matches_prior_frequencies(trained_pair):
    _, ckpt_k = trained_pair
    zs = draw_latents(ckpt_k, "0", n=2000, seed=5)
    # smoothing leaves a little EOS-first mass, so payloads can be empty
    frac_a = np.mean([z.payload[:1] == ("mode_0A",) for z in zs])
    p = float(np.exp(ckpt_k.prior.next_log_probs(
        "0", ()))[ckpt_k.prior.vocab.id_of("mode_0A")])
    assert abs(frac_a - p) < 3 * np.sqrt(p * (1 - p) / 2000)


def test_draw_latents_greedy_temperature(trained_pair):
    _, ckpt_k = trained_pair
    zs = draw_latents(ckpt_k, "0", n=20, seed=2, temperature=1e-6)
    assert len({z.payload for z in zs}) == 1


def test_sample_from_shapes_and_determinism(trained_pair):
    ckpt_b, ckpt_k = trained_pair
    xb, zb = sample_from(ckpt_b, "0", n=5, guidance=2.0, seed=9)
    assert xb.shape == (5, 2) and zb is None
    xk, zk = sample_from(ckpt_k, "1", n=5, guidance=2.0, seed=9)
    assert xk.shape == (5, 2) and len(zk) == 5
    xk2, zk2 = sample_from(ckpt_k, "1", n=5, guidance=2.0, seed=9)
    assert np.array_equal(xk, xk2) and zk == zk2


def test_sample_from_echoes_given_latents(trained_pair):
    _, ckpt_k = trained_pair
    given = draw_latents(ckpt_k, "0", n=4, seed=3)
    x, zs = sample_from(ckpt_k, "0", n=4, guidance=1.0, seed=3, latents=given)
    assert zs == given
    x2, _ = sample_from(ckpt_k, "0", n=4, guidance=1.0, seed=3, latents=given)
    assert np.array_equal(x, x2)


def test_sample_from_contracts(trained_pair):
    ckpt_b, ckpt_k = trained_pair
    with pytest.raises(ContractError):
        sample_from(ckpt_b, "0", n=3, guidance=1.0, seed=0,
                    latents=draw_latents(ckpt_k, "0", n=3, seed=0))
    with pytest.raises(ContractError):
        sample_from(ckpt_k, "0", n=3, guidance=1.0, seed=0,
                    latents=draw_latents(ckpt_k, "0", n=2, seed=0))
    with pytest.raises(ContractError):
        sample_from(ckpt_k, [], guidance=1.0, seed=0)


def test_sample_from_class_broadcast(trained_pair):
    ckpt_b, _ = trained_pair
    xa, _ = sample_from(ckpt_b, "0", n=4, guidance=1.0, seed=12)
    xb, _ = sample_from(ckpt_b, ["0", "0", "0", "0"], guidance=1.0, seed=12)
    assert np.array_equal(xa, xb)
