"""Minimal float64 MLP stack with hand-written reverse-mode gradients.

Every trainable object in this package (denoiser, neural sequence prior,
embedding tables) is assembled from the pieces here. Parameters live in
flat ``{name: ndarray}`` dicts so a single Adam step can update the
denoiser, the conditioning embeddings and the prior jointly with one
global gradient-norm clip.

Staying in float64 with exact gradients is deliberate: it lets the test
suite pin analytic-vs-finite-difference agreement at 1e-6 relative
error, which would be hopeless in float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteError
from .validation import as_float_array

ACTIVATIONS = ("tanh", "silu", "identity")

# Adam defaults shared by every trainer in the package.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8
DEFAULT_LR = 1e-4
DEFAULT_CLIP_NORM = 2.0
DEFAULT_EMA_DECAY = 0.9999


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "silu":
        return z / (1.0 + np.exp(-z))
    if kind == "identity":
        return z
    raise ContractError(f"unknown activation {kind!r}")


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation, reusing the forward value where cheap."""
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    if kind == "identity":
        return np.ones_like(z)
    raise ContractError(f"unknown activation {kind!r}")


class Mlp:
    """Fully-connected net: hidden layers share one activation, final layer
    is affine (identity).

    Weight matrices are stored as [out, in]; a layer computes
    ``a @ W.T + b`` on batched rows.
    """

    def __init__(self, weights, biases, activation: str = "tanh"):
        if activation not in ("tanh", "silu"):
            raise ContractError(f"hidden activation must be tanh or silu, got {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ContractError("weights and biases must be equal-length, non-empty lists")
        self.weights = [as_float_array(w, "weight", ndim=2) for w in weights]
        self.biases = [as_float_array(b, "bias", ndim=1) for b in biases]
        self.activation = activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ContractError(f"layer {i}: weight rows {w.shape[0]} != bias length {b.shape[0]}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractError(
                    f"layer {i}: in-dim {w.shape[1]} does not chain with previous out-dim "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "tanh") -> "Mlp":
        """Gaussian init with 1/sqrt(fan_in) scaling, zero biases."""
        if len(sizes) < 2:
            raise ContractError("need at least an input and an output size")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Live views of all parameters, keyed ``{prefix}w{i}`` / ``{prefix}b{i}``."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def forward_batch(net: Mlp, x: np.ndarray):
    """Evaluate the net on a batch of rows.

    Returns (output [B, out], cache) where the cache carries the
    pre-activations and activations needed by `backward_batch`.
    """
    x = as_float_array(x, "input", ndim=2)
    if x.shape[1] != net.in_dim:
        raise ContractError(f"input dim {x.shape[1]} != first layer in-dim {net.in_dim}")
    acts = [x]
    pre = []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else _act(z, net.activation)
        acts.append(a)
    return a, (pre, acts)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass. Deterministic; shape-checked."""
    x = as_float_array(x, "input", ndim=1)
    y, _ = forward_batch(net, x[None, :])
    return y[0]


def backward_batch(net: Mlp, cache, upstream: np.ndarray):
    """Exact gradients of sum_b(output_b . upstream_b) for a cached forward pass.

    Returns (grads dict matching net.params(), gradient wrt the input batch).
    """
    pre, acts = cache
    upstream = as_float_array(upstream, "upstream", ndim=2)
    if upstream.shape != (acts[0].shape[0], net.out_dim):
        raise ContractError(
            f"upstream shape {upstream.shape} != (batch, out_dim) {(acts[0].shape[0], net.out_dim)}"
        )
    grads: dict[str, np.ndarray] = {}
    g = upstream
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * _act_grad(pre[i], acts[i + 1], net.activation)
        grads[f"w{i}"] = g.T @ acts[i]
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.weights[i]
    return grads, g


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Single-vector gradients of (output . upstream) wrt parameters and input."""
    x = as_float_array(x, "input", ndim=1)
    upstream = as_float_array(upstream, "upstream", ndim=1)
    if upstream.shape[0] != net.out_dim:
        raise ContractError(f"upstream length {upstream.shape[0]} != out-dim {net.out_dim}")
    _, cache = forward_batch(net, x[None, :])
    grads, gin = backward_batch(net, cache, upstream[None, :])
    return grads, gin[0]


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Fresh all-zero gradient buffers mirroring a parameter dict."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def accumulate(grads: dict[str, np.ndarray], extra: dict[str, np.ndarray], scale: float = 1.0) -> None:
    for k, g in extra.items():
        if k not in grads:
            raise ContractError(f"gradient for unknown parameter {k!r}")
        grads[k] += scale * g


@dataclass
class AdamState:
    """Adam moment buffers, one pair per named parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def _param_dict(net) -> dict[str, np.ndarray]:
    if isinstance(net, Mlp):
        return net.params()
    if isinstance(net, dict):
        return net
    if hasattr(net, "params"):
        return net.params()
    raise ContractError(f"cannot extract parameters from {type(net).__name__}")


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grads_(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale grads in place so the global norm is <= clip_norm. Returns the
    pre-clip norm."""
    norm = global_grad_norm(grads)
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(net, grads: dict[str, np.ndarray], state: AdamState, lr: float = DEFAULT_LR,
              clip_norm: float | None = DEFAULT_CLIP_NORM) -> float:
    """One clipped, bias-corrected Adam update, in place.

    `net` may be an Mlp or a raw parameter dict. Gradients are clipped to
    a global norm of `clip_norm` before the moment updates. Returns the
    pre-clip gradient norm. Raises NonFiniteError naming the offending
    tensor if any gradient is not finite.
    """
    if not lr > 0:
        raise ContractError(f"lr must be > 0, got {lr}")
    params = _param_dict(net)
    if set(params) != set(grads):
        raise ContractError(
            f"parameter/gradient name mismatch: {sorted(set(params) ^ set(grads))}"
        )
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape "
                                f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in tensor {name!r}")
    grads = {k: g.copy() for k, g in grads.items()}
    norm = clip_grads_(grads, clip_norm)
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        m = state.m[name]
        v = state.v[name]
        g = grads[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"non-finite parameter after update in tensor {name!r}")
    return norm


def ema_update(target, source, decay: float) -> None:
    """target <- decay * target + (1 - decay) * source, elementwise in place."""
    if not 0.0 <= decay <= 1.0:
        raise ContractError(f"decay must lie in [0, 1], got {decay}")
    tp = _param_dict(target)
    sp = _param_dict(source)
    if set(tp) != set(sp):
        raise ContractError("EMA target/source parameter names differ")
    for name, t in tp.items():
        s = sp[name]
        if t.shape != s.shape:
            raise ContractError(f"EMA shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        t *= decay
        t += (1.0 - decay) * s


# ---------------------------------------------------------------------------
# Embedding tables

@dataclass
class Embedding:
    """A learned lookup table. Rows are embeddings; gradients are scattered
    back with np.add.at so repeated ids accumulate."""

    table: np.ndarray

    @classmethod
    def init(cls, rows: int, dim: int, rng: np.random.Generator, scale: float = 0.3) -> "Embedding":
        return cls(table=scale * rng.standard_normal((rows, dim)))

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise ContractError(f"embedding id out of range [0, {self.table.shape[0]})")
        return self.table[ids]

    def grad_from(self, ids: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        g = np.zeros_like(self.table)
        np.add.at(g, np.asarray(ids, dtype=np.intp), upstream)
        return g


# ---------------------------------------------------------------------------
# Checkpoint serialization

def params_to_jsonable(params: dict[str, np.ndarray]) -> dict:
    """Full-precision, value-exact JSON form: shapes + flat float lists.

    Python's json writes floats with repr, which round-trips float64
    exactly, so save->load is bit-identical.
    """
    return {
        name: {"shape": list(p.shape), "data": p.ravel().tolist()}
        for name, p in sorted(params.items())
    }


def params_from_jsonable(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in blob.items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[name] = arr
    return out


@dataclass
class MlpCheckpoint:
    """Self-contained snapshot of one Mlp plus its optimizer and EMA state."""

    sizes: list[int]
    activation: str
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    ema_params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def capture(cls, net: Mlp, state: AdamState, ema: Mlp | None = None) -> "MlpCheckpoint":
        return cls(
            sizes=net.sizes,
            activation=net.activation,
            params={k: v.copy() for k, v in net.params().items()},
            adam_m={k: v.copy() for k, v in state.m.items()},
            adam_v={k: v.copy() for k, v in state.v.items()},
            step=state.step,
            ema_params={k: v.copy() for k, v in ema.params().items()} if ema is not None else {},
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer_shapes": self.sizes,
                "activation": self.activation,
                "params": params_to_jsonable(self.params),
                "adam_m": params_to_jsonable(self.adam_m),
                "adam_v": params_to_jsonable(self.adam_v),
                "step": self.step,
                "ema_params": params_to_jsonable(self.ema_params),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MlpCheckpoint":
        blob = json.loads(text)
        return cls(
            sizes=list(blob["layer_shapes"]),
            activation=blob["activation"],
            params=params_from_jsonable(blob["params"]),
            adam_m=params_from_jsonable(blob["adam_m"]),
            adam_v=params_from_jsonable(blob["adam_v"]),
            step=int(blob["step"]),
            ema_params=params_from_jsonable(blob["ema_params"]),
        )

    def restore(self) -> tuple[Mlp, AdamState, Mlp | None]:
        """Rebuild (net, adam state, ema net or None) with fresh arrays."""
        n_layers = len(self.sizes) - 1
        weights = [self.params[f"w{i}"].copy() for i in range(n_layers)]
        biases = [self.params[f"b{i}"].copy() for i in range(n_layers)]
        net = Mlp(weights, biases, self.activation)
        state = AdamState(
            m={k: v.copy() for k, v in self.adam_m.items()},
            v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )
        ema = None
        if self.ema_params:
            ew = [self.ema_params[f"w{i}"].copy() for i in range(n_layers)]
            eb = [self.ema_params[f"b{i}"].copy() for i in range(n_layers)]
            ema = Mlp(ew, eb, self.activation)
        return net, state, ema
