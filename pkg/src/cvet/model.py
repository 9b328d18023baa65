"""Transformer encoder classifier with a hand-written backward pass.

Everything runs batched over arrays shaped (batch, seq_len, d_model). The
single-sequence helpers (``embed``, ``multi_head_attention``,
``transformer_block``, ``forward``) wrap the batched kernels.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from cvet.numerics import make_rng, seeded_init, softmax
from cvet.text_pipeline import (
    DEFAULT_MAX_LEN,
    N_CLASSES,
    Tactic,
    TokenSequence,
    Vocabulary,
    encode,
    preprocess,
    stack_sequences,
)

LN_EPS = 1e-12

LAYER_PARAMS = ("wq", "wk", "wv", "wo", "ln1_gamma", "ln1_beta",
                "ff_w1", "ff_b1", "ff_w2", "ff_b2", "ln2_gamma", "ln2_beta")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int = DEFAULT_MAX_LEN
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    dropout_rate: float = 0.1
    n_classes: int = N_CLASSES

    def __post_init__(self):
        dims = (self.vocab_size, self.max_len, self.d_model, self.n_heads, self.n_layers, self.d_ff)
        if min(dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes is fixed at {N_CLASSES}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable parameters in their declared (checkpoint) order."""
    D, F, C = config.d_model, config.d_ff, config.n_classes
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, D)}
    per_layer = {
        "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
        "ln1_gamma": (D,), "ln1_beta": (D,),
        "ff_w1": (D, F), "ff_b1": (F,), "ff_w2": (F, D), "ff_b2": (D,),
        "ln2_gamma": (D,), "ln2_beta": (D,),
    }
    for layer in range(config.n_layers):
        for name in LAYER_PARAMS:
            shapes[f"layer{layer}.{name}"] = per_layer[name]
    shapes["classifier.w"] = (D, C)
    shapes["classifier.b"] = (C,)
    return shapes


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    positional: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positional is None:
            self.positional = sinusoidal_positions(self.config.max_len, self.config.d_model)
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.positional)

    def layer(self, index: int) -> dict[str, np.ndarray]:
        prefix = f"layer{index}."
        return {name: self.params[prefix + name] for name in LAYER_PARAMS}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, value in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, seed: int) -> ModelState:
    params = {}
    for name, shape in param_shapes(config).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_gamma"):
            params[name] = np.ones(shape)
        elif short.endswith("_beta") or short in ("b", "ff_b1", "ff_b2"):
            params[name] = seeded_init(shape, "zeros", seed)
        else:
            params[name] = seeded_init(shape, "uniform-fan-scaled", seed, name)
    return ModelState(config, params)


# --- layer kernels -------------------------------------------------------------


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, L, D = x.shape
    return x.reshape(B, L, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dk)


def attention_forward(X: np.ndarray, p: dict, mask: np.ndarray, n_heads: int):
    """Masked scaled dot-product attention over all heads; X is (B, L, D)."""
    B, L, D = X.shape
    if p["wq"].shape != (D, D) or mask.shape != (B, L):
        raise ValueError(f"attention: X{X.shape} wq{p['wq'].shape} mask{mask.shape}")
    scale = 1.0 / np.sqrt(D // n_heads)
    Q = _split_heads(X @ p["wq"], n_heads)
    K = _split_heads(X @ p["wk"], n_heads)
    V = _split_heads(X @ p["wv"], n_heads)
    keys = mask[:, None, None, :]
    scores = np.where(keys, (Q @ K.transpose(0, 1, 3, 2)) * scale, -np.inf)
    top = scores.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    weights = np.exp(scores - top)
    total = weights.sum(axis=-1, keepdims=True)
    # queries with no real key get an all-zero attention row
    A = weights / np.where(total > 0, total, 1.0)
    C = _merge_heads(A @ V)
    return C @ p["wo"], (X, Q, K, V, A, C, scale)


def attention_backward(dout: np.ndarray, p: dict, cache, n_heads: int):
    X, Q, K, V, A, C, scale = cache
    g = {"wo": C.reshape(-1, C.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])}
    dCh = _split_heads(dout @ p["wo"].T, n_heads)
    dA = dCh @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dCh
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQ = _merge_heads(dS @ K)
    dK = _merge_heads(dS.transpose(0, 1, 3, 2) @ Q)
    dV = _merge_heads(dV)
    X2 = X.reshape(-1, X.shape[-1])
    g["wq"] = X2.T @ dQ.reshape(X2.shape[0], -1)
    g["wk"] = X2.T @ dK.reshape(X2.shape[0], -1)
    g["wv"] = X2.T @ dV.reshape(X2.shape[0], -1)
    dX = dQ @ p["wq"].T + dK @ p["wk"].T + dV @ p["wv"].T
    return dX, g


def _dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def block_forward(X: np.ndarray, p: dict, mask: np.ndarray, n_heads: int,
                  dropout_rate: float = 0.0, rng: np.random.Generator | None = None):
    attn, attn_cache = attention_forward(X, p, mask, n_heads)
    attn, keep1 = _dropout(attn, dropout_rate, rng)
    Y1, ln1 = layer_norm(X + attn, p["ln1_gamma"], p["ln1_beta"])
    H = Y1 @ p["ff_w1"] + p["ff_b1"]
    R = np.maximum(H, 0.0)
    ff = R @ p["ff_w2"] + p["ff_b2"]
    ff, keep2 = _dropout(ff, dropout_rate, rng)
    Y, ln2 = layer_norm(Y1 + ff, p["ln2_gamma"], p["ln2_beta"])
    return Y, (attn_cache, keep1, ln1, Y1, H, R, keep2, ln2)


def block_backward(dY: np.ndarray, p: dict, cache, n_heads: int):
    attn_cache, keep1, ln1, Y1, H, R, keep2, ln2 = cache
    g = {}
    dZ2, g["ln2_gamma"], g["ln2_beta"] = layer_norm_backward(dY, ln2)
    dff = dZ2 if keep2 is None else dZ2 * keep2
    flat_dff = dff.reshape(-1, dff.shape[-1])
    g["ff_w2"] = R.reshape(-1, R.shape[-1]).T @ flat_dff
    g["ff_b2"] = flat_dff.sum(axis=0)
    dH = (dff @ p["ff_w2"].T) * (H > 0)
    flat_dH = dH.reshape(-1, dH.shape[-1])
    g["ff_w1"] = Y1.reshape(-1, Y1.shape[-1]).T @ flat_dH
    g["ff_b1"] = flat_dH.sum(axis=0)
    dY1 = dZ2 + dH @ p["ff_w1"].T
    dZ1, g["ln1_gamma"], g["ln1_beta"] = layer_norm_backward(dY1, ln1)
    dattn = dZ1 if keep1 is None else dZ1 * keep1
    dX_attn, g_attn = attention_backward(dattn, p, attn_cache, n_heads)
    g.update(g_attn)
    return dZ1 + dX_attn, g


# --- whole model ---------------------------------------------------------------


@dataclass
class ForwardTrace:
    state: ModelState
    ids: np.ndarray
    mask: np.ndarray
    pooled: np.ndarray
    pool_weights: np.ndarray
    block_caches: list


@dataclass
class ForwardOutput:
    logits: np.ndarray
    degenerate: np.ndarray
    trace: ForwardTrace | None = None


def _check_ids(ids: np.ndarray, state: ModelState):
    if ids.size and (ids.min() < 0 or ids.max() >= state.config.vocab_size):
        raise IndexError(f"token id out of range [0, {state.config.vocab_size})")
    if ids.shape[-1] > state.config.max_len:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {state.config.max_len}")


def embed_batch(ids: np.ndarray, state: ModelState) -> np.ndarray:
    _check_ids(ids, state)
    return state.params["embedding"][ids] + state.positional[: ids.shape[-1]]


def forward_batch(ids: np.ndarray, mask: np.ndarray, state: ModelState,
                  training: bool = False, seed: int = 0) -> ForwardOutput:
    cfg = state.config
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    X = embed_batch(ids, state)
    rng = make_rng(seed, "dropout") if training and cfg.dropout_rate > 0 else None
    caches = []
    for layer in range(cfg.n_layers):
        X, cache = block_forward(X, state.layer(layer), mask, cfg.n_heads, cfg.dropout_rate, rng)
        caches.append(cache)
    counts = mask.sum(axis=1)
    pool_weights = mask / np.maximum(counts, 1)[:, None]
    pooled = np.einsum("bl,bld->bd", pool_weights, X)
    logits = pooled @ state.params["classifier.w"] + state.params["classifier.b"]
    trace = ForwardTrace(state, ids, mask, pooled, pool_weights, caches) if training else None
    return ForwardOutput(logits, counts == 0, trace)


def backward(trace: ForwardTrace, dlogits: np.ndarray, state: ModelState | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every trainable parameter."""
    if trace is None:
        raise ValueError("backward needs a trace from a training-mode forward pass")
    if state is not None and state is not trace.state:
        raise ValueError("trace was produced by a different model state")
    state = trace.state
    cfg = state.config
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (trace.ids.shape[0], cfg.n_classes):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match the trace")
    grads: dict[str, np.ndarray] = {}
    layer_grads = {}
    dX = np.einsum("bd,bl->bld", dlogits @ state.params["classifier.w"].T, trace.pool_weights)
    for layer in reversed(range(cfg.n_layers)):
        dX, g = block_backward(dX, state.layer(layer), trace.block_caches[layer], cfg.n_heads)
        layer_grads[layer] = g
    demb = np.zeros_like(state.params["embedding"])
    np.add.at(demb, trace.ids.ravel(), dX.reshape(-1, cfg.d_model))
    grads["embedding"] = demb
    for layer in range(cfg.n_layers):
        for name in LAYER_PARAMS:
            grads[f"layer{layer}.{name}"] = layer_grads[layer][name]
    grads["classifier.w"] = trace.pooled.T @ dlogits
    grads["classifier.b"] = dlogits.sum(axis=0)
    return grads


def embed(seq: TokenSequence, state: ModelState) -> np.ndarray:
    return embed_batch(np.asarray(seq.ids, dtype=np.int64)[None], state)[0]


def multi_head_attention(X: np.ndarray, layer_params: dict, mask: Sequence[bool], n_heads: int) -> np.ndarray:
    out, _ = attention_forward(X[None], layer_params, np.asarray(mask, dtype=bool)[None], n_heads)
    return out[0]


def transformer_block(X: np.ndarray, layer_params: dict, mask: Sequence[bool], n_heads: int,
                      dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    out, _ = block_forward(X[None], layer_params, np.asarray(mask, dtype=bool)[None], n_heads, dropout_rate, rng)
    return out[0]


def forward(seq: TokenSequence, state: ModelState, training: bool = False, seed: int = 0) -> ForwardOutput:
    ids, mask = stack_sequences([seq])
    out = forward_batch(ids, mask, state, training, seed)
    return ForwardOutput(out.logits[0], out.degenerate[0], out.trace)


@dataclass(frozen=True)
class Prediction:
    tactic: Tactic
    probabilities: np.ndarray
    degenerate: bool


def predict_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; exact ties go to the lowest class code."""
    return np.argmax(logits, axis=-1)


def predict_batch(ids: np.ndarray, mask: np.ndarray, state: ModelState, batch_size: int = 256) -> np.ndarray:
    out = [forward_batch(ids[i:i + batch_size], mask[i:i + batch_size], state).logits
           for i in range(0, len(ids), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, state.config.n_classes))


def predict(description: str, state: ModelState, vocab: Vocabulary) -> Prediction:
    seq = encode(preprocess(description), vocab, state.config.max_len)
    out = forward(seq, state)
    return Prediction(Tactic(int(predict_logits(out.logits))), softmax(out.logits), bool(out.degenerate))

