"""Autoregressive priors over latent token sequences.

Both backends model p(z_n | z_{0:n-1}, c) with the context truncated to
the last `context_window` tokens (the implicit BOS marker stands in for
everything earlier). The tabular backend stores conditional count
tables and is exact; the neural backend embeds the context and class
and scores continuations with an MLP. BOS itself is never a
continuation: probabilities are normalized over the rest of the
vocabulary.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .. import nnet
from ..errors import ContractError, GrammarError
from ..validation import substream
from .vocab import BOS, EOS, LatentSequence, LatentVocab

DEFAULT_CONTEXT_WINDOW = 8
DEFAULT_MAX_LEN = 48


def _context_key(prefix: tuple[str, ...], window: int) -> tuple[str, ...]:
    return ((BOS,) + tuple(prefix))[-window:]


def _padded_context(prefix: tuple[str, ...], window: int) -> tuple[str, ...]:
    ctx = (BOS,) * window + tuple(prefix)
    return ctx[-window:]


class TabularArPrior(BaseEstimator):
    """Conditional count tables with additive smoothing.

    After fit, next-token probabilities are exactly
    (count + smoothing) / (total + smoothing * (V - 1)) over the
    non-BOS vocabulary; unseen contexts fall back to the uniform
    smoothed distribution.
    """

    def __init__(self, vocab: LatentVocab | None = None,
                 context_window: int = DEFAULT_CONTEXT_WINDOW, smoothing: float = 1.0):
        self.vocab = vocab
        self.context_window = context_window
        self.smoothing = smoothing

    @property
    def backend(self) -> str:
        return "tabular"

    def _check_ready(self):
        if self.vocab is None:
            raise ContractError("prior has no vocabulary")
        if self.context_window < 1:
            raise ContractError(f"context_window must be >= 1, got {self.context_window}")
        if self.smoothing < 0:
            raise ContractError(f"smoothing must be >= 0, got {self.smoothing}")

    def fit(self, corpus, y=None):
        """corpus: iterable of (class_id, LatentSequence)."""
        self._check_ready()
        counts: dict[tuple[str, tuple[str, ...]], np.ndarray] = {}
        classes: list[str] = []
        n_seq = 0
        for class_id, seq in corpus:
            if seq.truncated:
                raise ContractError("cannot fit on truncated sequences")
            if class_id not in classes:
                classes.append(class_id)
            if seq.scheme != self.vocab.scheme:
                raise ContractError(
                    f"sequence scheme {seq.scheme!r} != vocabulary scheme {self.vocab.scheme!r}")
            self.vocab.ids(seq.tokens)  # membership check
            prefix: tuple[str, ...] = ()
            for token in seq.tokens:
                key = (class_id, _context_key(prefix, self.context_window))
                if key not in counts:
                    counts[key] = np.zeros(self.vocab.size)
                counts[key][self.vocab.id_of(token)] += 1.0
                prefix = prefix + (token,)
            n_seq += 1
        if n_seq == 0:
            raise ContractError("empty corpus")
        self.counts_ = counts
        self.classes_ = classes
        return self

    def _counts_for(self, class_id: str, prefix: tuple[str, ...]) -> np.ndarray:
        key = (class_id, _context_key(tuple(prefix), self.context_window))
        table = getattr(self, "counts_", {})
        return table.get(key, np.zeros(self.vocab.size))

    def next_logits(self, class_id: str, prefix) -> np.ndarray:
        """log(count + smoothing) over non-BOS tokens, -inf at BOS."""
        self._check_ready()
        counts = self._counts_for(class_id, tuple(prefix))
        with np.errstate(divide="ignore"):
            logits = np.log(counts + self.smoothing)
        logits[self.vocab.id_of(BOS)] = -np.inf
        return logits

    def next_log_probs(self, class_id: str, prefix) -> np.ndarray:
        self._check_ready()
        counts = self._counts_for(class_id, tuple(prefix))
        bos = self.vocab.id_of(BOS)
        smoothed = counts + self.smoothing
        smoothed[bos] = 0.0
        total = smoothed.sum()
        if total <= 0:
            raise ContractError(
                "no counts and no smoothing for context; distribution undefined")
        with np.errstate(divide="ignore"):
            out = np.log(smoothed) - np.log(total)
        return out


class NeuralArPrior(BaseEstimator):
    """Embedding table + MLP over the last-w token embeddings and the
    class embedding, producing next-token logits."""

    def __init__(self, vocab: LatentVocab | None = None, class_ids=(),
                 context_window: int = DEFAULT_CONTEXT_WINDOW, emb_dim: int = 8,
                 class_dim: int = 4, hidden=(32,), seed: int = 0):
        self.vocab = vocab
        self.class_ids = list(class_ids)
        self.context_window = context_window
        self.emb_dim = emb_dim
        self.class_dim = class_dim
        self.hidden = list(hidden)
        self.seed = seed
        if vocab is not None:
            self._build()

    @property
    def backend(self) -> str:
        return "neural"

    def _build(self):
        if not self.class_ids:
            raise ContractError("neural prior needs class_ids")
        rng = substream(self.seed, "prior")
        self.class_index_ = {c: i for i, c in enumerate(self.class_ids)}
        self.tok_emb_ = nnet.Embedding.init(self.vocab.size, self.emb_dim, rng)
        self.class_emb_ = nnet.Embedding.init(len(self.class_ids), self.class_dim, rng)
        in_dim = self.context_window * self.emb_dim + self.class_dim
        self.mlp_ = nnet.Mlp.init([in_dim] + list(self.hidden) + [self.vocab.size], rng, "tanh")

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.mlp_.params(prefix + "mlp.")
        out[prefix + "tok_emb"] = self.tok_emb_.table
        out[prefix + "class_emb"] = self.class_emb_.table
        return out

    def copy(self) -> "NeuralArPrior":
        dup = object.__new__(NeuralArPrior)
        dup.__dict__.update(self.__dict__)
        dup.mlp_ = self.mlp_.copy()
        dup.tok_emb_ = nnet.Embedding(self.tok_emb_.table.copy())
        dup.class_emb_ = nnet.Embedding(self.class_emb_.table.copy())
        return dup

    def _context_ids(self, prefix) -> np.ndarray:
        ctx = _padded_context(tuple(prefix), self.context_window)
        return np.array(self.vocab.ids(ctx), dtype=np.intp)

    def _class_row(self, class_id: str) -> int:
        if class_id not in self.class_index_:
            raise ContractError(f"unknown class id {class_id!r}")
        return self.class_index_[class_id]

    def _assemble(self, ctx_ids: np.ndarray, class_rows: np.ndarray) -> np.ndarray:
        n = ctx_ids.shape[0]
        ctx_vecs = self.tok_emb_.table[ctx_ids].reshape(n, -1)
        return np.concatenate([ctx_vecs, self.class_emb_.table[class_rows]], axis=1)

    def next_logits(self, class_id: str, prefix) -> np.ndarray:
        ctx_ids = self._context_ids(prefix)[None, :]
        rows = np.array([self._class_row(class_id)], dtype=np.intp)
        y, _ = nnet.forward_batch(self.mlp_, self._assemble(ctx_ids, rows))
        logits = y[0].copy()
        logits[self.vocab.id_of(BOS)] = -np.inf
        return logits

    def next_log_probs(self, class_id: str, prefix) -> np.ndarray:
        logits = self.next_logits(class_id, prefix)
        return logits - _logsumexp(logits)

    def nll_and_grads(self, pairs, prefix: str = ""):
        """Mean sequence NLL over (class_id, LatentSequence) pairs, with
        exact gradients for the MLP and both embedding tables."""
        pairs = list(pairs)
        if not pairs:
            raise ContractError("empty batch")
        ctx_rows, class_rows, targets = [], [], []
        for class_id, seq in pairs:
            if seq.truncated:
                raise ContractError("cannot train on truncated sequences")
            pfx: tuple[str, ...] = ()
            for token in seq.tokens:
                ctx_rows.append(self._context_ids(pfx))
                class_rows.append(self._class_row(class_id))
                targets.append(self.vocab.id_of(token))
                pfx = pfx + (token,)
        ctx_ids = np.stack(ctx_rows)                       # [P, w]
        class_rows = np.array(class_rows, dtype=np.intp)   # [P]
        targets = np.array(targets, dtype=np.intp)         # [P]
        n_pos = ctx_ids.shape[0]
        n_seq = len(pairs)
        inp = self._assemble(ctx_ids, class_rows)
        logits, cache = nnet.forward_batch(self.mlp_, inp)
        bos = self.vocab.id_of(BOS)
        logits = logits.copy()
        logits[:, bos] = -np.inf
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1))
        log_probs = shifted - log_z[:, None]
        nll = -float(np.sum(log_probs[np.arange(n_pos), targets])) / n_seq
        dlogits = np.exp(log_probs)
        dlogits[np.arange(n_pos), targets] -= 1.0
        dlogits[:, bos] = 0.0
        dlogits /= n_seq
        mlp_grads, gin = nnet.backward_batch(self.mlp_, cache, dlogits)
        grads = {prefix + "mlp." + k: v for k, v in mlp_grads.items()}
        tok_grad = np.zeros_like(self.tok_emb_.table)
        w = self.context_window
        for j in range(w):
            np.add.at(tok_grad, ctx_ids[:, j], gin[:, j * self.emb_dim:(j + 1) * self.emb_dim])
        grads[prefix + "tok_emb"] = tok_grad
        grads[prefix + "class_emb"] = self.class_emb_.grad_from(class_rows, gin[:, w * self.emb_dim:])
        return nll, grads

    def to_jsonable(self) -> dict:
        return {
            "vocab": self.vocab.to_jsonable(),
            "class_ids": self.class_ids,
            "context_window": self.context_window,
            "emb_dim": self.emb_dim,
            "class_dim": self.class_dim,
            "hidden": self.hidden,
            "seed": self.seed,
            "params": nnet.params_to_jsonable(self.params()),
        }

    @classmethod
    def from_jsonable(cls, blob: dict) -> "NeuralArPrior":
        prior = cls(
            vocab=LatentVocab.from_jsonable(blob["vocab"]),
            class_ids=list(blob["class_ids"]),
            context_window=blob["context_window"],
            emb_dim=blob["emb_dim"],
            class_dim=blob["class_dim"],
            hidden=list(blob["hidden"]),
            seed=blob["seed"],
        )
        params = nnet.params_from_jsonable(blob["params"])
        for name, live in prior.params().items():
            live[...] = params[name]
        return prior


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v[np.isfinite(v)]) if np.any(np.isfinite(v)) else 0.0
    return float(m + np.log(np.sum(np.exp(v - m))))


def ar_nll(prior, seq: LatentSequence, class_id: str) -> float:
    """Negative log-likelihood of a complete sequence, EOS term included."""
    if seq.truncated:
        raise ContractError("NLL of a truncated sequence is undefined (no EOS term)")
    total = 0.0
    prefix: tuple[str, ...] = ()
    for token in seq.tokens:
        log_probs = prior.next_log_probs(class_id, prefix)
        total -= float(log_probs[prior.vocab.id_of(token)])
        prefix = prefix + (token,)
    return total


def ar_sample(prior, class_id: str, temperature: float = 1.0, seed=0,
              max_len: int = DEFAULT_MAX_LEN) -> LatentSequence:
    """Ancestral sampling until EOS or max_len payload tokens.

    temperature scales logits (tabular: log-counts) before the softmax;
    the zero-temperature limit is argmax. Hitting max_len without EOS
    returns a sequence flagged truncated.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    rng = seed if isinstance(seed, np.random.Generator) else substream(int(seed), "ar")
    eos_id = prior.vocab.id_of(EOS)
    payload: list[str] = []
    for _ in range(max_len + 1):  # +1: the EOS slot does not count against max_len
        logits = prior.next_logits(class_id, tuple(payload))
        probs = _temperature_softmax(logits, temperature)
        token_id = int(rng.choice(prior.vocab.size, p=probs))
        if token_id == eos_id:
            return LatentSequence.from_payload(prior.vocab.scheme, payload)
        payload.append(prior.vocab.tokens[token_id])
        if len(payload) >= max_len:
            break
    return LatentSequence(scheme=prior.vocab.scheme, tokens=tuple(payload), truncated=True)


def _temperature_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    finite = np.isfinite(logits)
    if not np.any(finite):
        raise ContractError("no admissible continuation token")
    out = np.zeros_like(logits)
    shifted = (logits[finite] - logits[finite].max()) / temperature
    e = np.exp(shifted)
    out[finite] = e / e.sum()
    return out


def embed_latents(seq: LatentSequence, prior: NeuralArPrior) -> np.ndarray:
    """Mean-pooled token embeddings of the payload from the neural
    prior's table; an empty payload maps to the EOS embedding.

    Pooling is order-insensitive: permuting tokens with distinct
    embeddings changes nothing, a documented limitation.
    """
    if not isinstance(prior, NeuralArPrior):
        raise ContractError("embed_latents needs the neural backend's embedding table")
    if seq.truncated:
        raise GrammarError("cannot embed a truncated sequence")
    tokens = seq.payload if seq.payload else (EOS,)
    ids = np.array(prior.vocab.ids(tokens), dtype=np.intp)
    return prior.tok_emb_.table[ids].mean(axis=0)


def train_neural_prior(prior: NeuralArPrior, corpus, steps: int = 2000,
                       batch_size: int = 64, lr: float = 1e-2, seed: int = 0,
                       clip_norm: float = nnet.DEFAULT_CLIP_NORM) -> list[float]:
    """Standalone maximum-likelihood training of the neural backend.

    Returns the per-step NLL trace. Joint training with the denoiser
    lives in the train module; this path serves prior-only experiments
    and tests.
    """
    corpus = list(corpus)
    if not corpus:
        raise ContractError("empty corpus")
    rng = substream(seed, "prior-fit")
    params = prior.params()
    state = nnet.AdamState.for_params(params)
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(corpus), size=min(batch_size, len(corpus)))
        batch = [corpus[i] for i in idx]
        nll, grads = prior.nll_and_grads(batch)
        nnet.adam_step(params, grads, state, lr=lr, clip_norm=clip_norm)
        losses.append(nll)
    return losses
