"""Multimodal transformer encoder-decoder forecaster and the 1-D CNN baseline.

All model math runs through :mod:`gale.tensor`.  Inputs are numpy arrays of
shape ``(B, L, d)`` (a missing batch axis is added).  A decoder (or CNN) output
at position ``t`` is the prediction for step ``t + 1``.

Layout choices: post-norm residual blocks, ReLU feed-forward, embeddings scaled
by ``sqrt(d_model)`` before the sinusoidal positional encoding is added.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("multimodal", "acc_only", "cnn_baseline")
CONTEXTS = ("growing", "fixed")


@dataclass
class ModelConfig:
    mode: str = "multimodal"
    d_model: int = 256
    n_heads: int = 8
    d_ff: int = 384
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_w: int = 8
    d_a: int = 6
    L_enc: int = 100
    L_pred: int = 20
    dropout: float = 0.2865
    wind_delay: int = 0
    context: str = "growing"
    cnn_channels: int = 320
    cnn_kernel: int = 3
    cnn_enc_layers: int = 4
    cnn_dec_layers: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.context not in CONTEXTS:
            raise ValueError(f"context must be one of {CONTEXTS}")
        if self.mode != "cnn_baseline":
            if self.d_model % self.n_heads:
                raise ValueError("d_model must be divisible by n_heads")
            if self.d_model % 2:
                raise ValueError("d_model must be even for sinusoidal positional encoding")
        if self.mode == "acc_only" and self.n_enc_layers != 0:
            self.n_enc_layers = 0
        if self.wind_delay < 0:
            raise ValueError("wind_delay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Desk-scale and per-mode defaults
def tiny_config(mode="multimodal", **kw):
    base = dict(mode=mode, d_model=64, n_heads=4, d_ff=128, n_enc_layers=2, n_dec_layers=2,
                cnn_channels=64)
    if mode == "acc_only":
        base["n_enc_layers"] = 0
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _attn_shapes(prefix, D):
    out = {}
    for n in ("q", "k", "v", "o"):
        out[f"{prefix}.w{n}"] = (D, D)
        out[f"{prefix}.b{n}"] = (D,)
    return out


def weight_shapes(cfg):
    """Ordered ``name -> shape`` map; a pure function of the config."""
    s = {}
    if cfg.mode == "cnn_baseline":
        C, K = cfg.cnn_channels, cfg.cnn_kernel
        s["wind_in.w"], s["wind_in.b"] = (cfg.d_w, C), (C,)
        for i in range(cfg.cnn_enc_layers):
            s[f"wind_conv.{i}.w"], s[f"wind_conv.{i}.b"] = (K, C, C), (C,)
        s["cond.w"], s["cond.b"] = (C, C), (C,)
        s["acc_in.w"], s["acc_in.b"] = (cfg.d_a, C), (C,)
        for i in range(cfg.cnn_dec_layers):
            s[f"acc_conv.{i}.w"], s[f"acc_conv.{i}.b"] = (K, C, C), (C,)
        s["head.w"], s["head.b"] = (C, cfg.d_a), (cfg.d_a,)
        return s
    D, F = cfg.d_model, cfg.d_ff
    if cfg.mode == "multimodal":
        s["wind_embed.w"], s["wind_embed.b"] = (cfg.d_w, D), (D,)
        for i in range(cfg.n_enc_layers):
            p = f"enc.{i}"
            s.update(_attn_shapes(f"{p}.attn", D))
            s.update({f"{p}.ff.w1": (D, F), f"{p}.ff.b1": (F,), f"{p}.ff.w2": (F, D), f"{p}.ff.b2": (D,)})
            for j in (1, 2):
                s[f"{p}.ln{j}.g"], s[f"{p}.ln{j}.b"] = (D,), (D,)
    s["acc_embed.w"], s["acc_embed.b"] = (cfg.d_a, D), (D,)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        s.update(_attn_shapes(f"{p}.self", D))
        s.update(_attn_shapes(f"{p}.cross", D))
        s.update({f"{p}.ff.w1": (D, F), f"{p}.ff.b1": (F,), f"{p}.ff.w2": (F, D), f"{p}.ff.b2": (D,)})
        for j in (1, 2, 3):
            s[f"{p}.ln{j}.g"], s[f"{p}.ln{j}.b"] = (D,), (D,)
    s["head.w"], s["head.b"] = (D, cfg.d_a), (cfg.d_a,)
    return s


def parameter_count(cfg):
    return int(sum(np.prod(shape) for shape in weight_shapes(cfg).values()))


def init_weights(cfg, rng):
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if ".ln" in name:
            val = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif len(shape) == 1:
            val = np.zeros(shape)
        elif len(shape) == 3:
            K, cin, cout = shape
            val = _glorot(rng, K * cin, K * cout, shape)
        else:
            val = _glorot(rng, shape[0], shape[1], shape)
        weights[name] = T.parameter(val, name=name)
    return weights


def weights_from_arrays(arrays):
    return {k: T.parameter(v, name=k) for k, v in arrays.items()}


def weights_to_arrays(weights):
    return {k: v.data.copy() for k, v in weights.items()}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def positional_encoding(length, d_model):
    if d_model % 2:
        raise ValueError("d_model must be even")
    pos = np.arange(length)[:, None]
    rate = 1.0 / 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return pe


def causal_mask(length):
    """``True`` above the diagonal (keys in the future of the query)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def _batch(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 2 else x


def _split_heads(x, H):
    B, L, D = x.shape
    return x.reshape(B, L, H, D // H).transpose(0, 2, 1, 3)


def multi_head_attention(q_in, kv_in, weights, prefix, n_heads, causal=False, maps=None):
    """Scaled dot-product attention over ``n_heads`` projections.

    ``q_in`` is ``(B, Lq, D)``, ``kv_in`` is ``(B, Lk, D)``.  With ``causal``
    the strictly-upper-triangle logits are excluded.  Row-stochastic
    attention maps ``(B, H, Lq, Lk)`` are appended to ``maps`` when given.
    """
    w = lambda n: weights[f"{prefix}.{n}"]
    B, Lq, D = q_in.shape
    Lk = kv_in.shape[1]
    if kv_in.shape[2] != D or kv_in.shape[0] != B:
        raise ValueError(f"attention shape mismatch: query {q_in.shape}, key/value {kv_in.shape}")
    dk = D // n_heads
    q = _split_heads(T.linear(q_in, w("wq"), w("bq")), n_heads)
    k = _split_heads(T.linear(kv_in, w("wk"), w("bk")), n_heads)
    v = _split_heads(T.linear(kv_in, w("wv"), w("bv")), n_heads)
    logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    mask = None
    if causal:
        if Lq != Lk:
            raise ValueError("causal attention needs equal query and key lengths")
        mask = causal_mask(Lq)
    att = T.softmax_rows(logits, mask)
    if maps is not None:
        maps.append(att.data.copy())
    ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
    return T.linear(ctx, w("wo"), w("bo"))


def _ffn(x, weights, p):
    h = T.relu(T.linear(x, weights[f"{p}.ff.w1"], weights[f"{p}.ff.b1"]))
    return T.linear(h, weights[f"{p}.ff.w2"], weights[f"{p}.ff.b2"])


def _norm(x, weights, name, eps):
    return T.layer_norm(x, weights[f"{name}.g"], weights[f"{name}.b"], eps)


class _Drop:
    def __init__(self, p, rng):
        self.p, self.rng = p, rng
        self.training = rng is not None and p > 0

    def __call__(self, x):
        return T.dropout(x, self.p, self.training, self.rng)


def shift_window(X_wind, delay):
    """Zero-pad-and-shift the wind window by ``delay`` samples along time."""
    X = _batch(X_wind)
    if delay == 0:
        return X
    out = np.zeros_like(X)
    if delay < X.shape[1]:
        out[:, delay:] = X[:, :-delay]
    return out


@dataclass
class EncoderMemory:
    values: Tensor
    valid: bool = True


def _embed(x, weights, name, D, drop):
    L = x.shape[1]
    e = T.linear(Tensor(x), weights[f"{name}.w"], weights[f"{name}.b"]) * math.sqrt(D)
    return drop(e + positional_encoding(L, D))


def encode_wind(X_wind, weights, cfg, rng=None, maps=None):
    """Wind encoder stack producing the memory ``(B, L_enc, d_model)``."""
    if cfg.mode != "multimodal":
        raise ValueError(f"encode_wind needs mode 'multimodal', got {cfg.mode!r}")
    X = shift_window(X_wind, cfg.wind_delay)
    if X.shape[2] != cfg.d_w:
        raise ValueError(f"wind feature width {X.shape[2]} != d_w={cfg.d_w}")
    drop = _Drop(cfg.dropout, rng)
    x = _embed(X, weights, "wind_embed", cfg.d_model, drop)
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        x = _norm(x + drop(multi_head_attention(x, x, weights, f"{p}.attn", cfg.n_heads, maps=maps)),
                  weights, f"{p}.ln1", cfg.ln_eps)
        x = _norm(x + drop(_ffn(x, weights, p)), weights, f"{p}.ln2", cfg.ln_eps)
    return EncoderMemory(x, True)


def zero_memory(cfg, batch=1):
    return EncoderMemory(Tensor(np.zeros((batch, cfg.L_enc, cfg.d_model))), False)


def memory_for(X_wind, weights, cfg, batch, rng=None, maps=None):
    if cfg.mode == "multimodal":
        return encode_wind(X_wind, weights, cfg, rng, maps)
    return zero_memory(cfg, batch)


def decode(X_acc, memory, weights, cfg, rng=None, maps=None):
    """Decoder stack over an acceleration history ``(B, L, d_a)``; returns ``(B, L, d_a)``."""
    X = _batch(X_acc)
    if X.shape[2] != cfg.d_a:
        raise ValueError(f"acceleration width {X.shape[2]} != d_a={cfg.d_a}")
    if X.shape[1] < 1:
        raise ValueError("decoder needs at least one time step")
    mem = memory.values
    if mem.shape[0] != X.shape[0]:
        raise ValueError("memory batch does not match the acceleration batch")
    drop = _Drop(cfg.dropout, rng)
    x = _embed(X, weights, "acc_embed", cfg.d_model, drop)
    self_maps = None if maps is None else maps.setdefault("self", [])
    cross_maps = None if maps is None else maps.setdefault("cross", [])
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        x = _norm(x + drop(multi_head_attention(x, x, weights, f"{p}.self", cfg.n_heads, causal=True,
                                                maps=self_maps)), weights, f"{p}.ln1", cfg.ln_eps)
        x = _norm(x + drop(multi_head_attention(x, mem, weights, f"{p}.cross", cfg.n_heads,
                                                maps=cross_maps)), weights, f"{p}.ln2", cfg.ln_eps)
        x = _norm(x + drop(_ffn(x, weights, p)), weights, f"{p}.ln3", cfg.ln_eps)
    return T.linear(x, weights["head.w"], weights["head.b"])


# ---------------------------------------------------------------------------
# CNN baseline
# ---------------------------------------------------------------------------

def _conv_stack(x, weights, name, n_layers, drop):
    for i in range(n_layers):
        y = T.causal_conv1d(x, weights[f"{name}.{i}.w"], weights[f"{name}.{i}.b"], dilation=2 ** i)
        x = x + drop(T.relu(y))
    return x


def cnn_forward(X_wind, X_acc, weights, cfg, rng=None):
    """Causal temporal-convolution encoder/decoder; returns ``(B, L, d_a)``.

    Wind blocks are mean-pooled over time into one conditioning vector that is
    added to every acceleration position before the output head.  Block ``i``
    uses dilation ``2**i``.
    """
    if cfg.mode != "cnn_baseline":
        raise ValueError(f"cnn_forward needs mode 'cnn_baseline', got {cfg.mode!r}")
    Xw, Xa = shift_window(X_wind, cfg.wind_delay), _batch(X_acc)
    if Xw.shape[2] != cfg.d_w or Xa.shape[2] != cfg.d_a:
        raise ValueError("CNN input widths do not match d_w/d_a")
    drop = _Drop(cfg.dropout, rng)
    w = _conv_stack(T.linear(Tensor(Xw), weights["wind_in.w"], weights["wind_in.b"]), weights,
                    "wind_conv", cfg.cnn_enc_layers, drop)
    cond = T.linear(w.mean(axis=1, keepdims=True), weights["cond.w"], weights["cond.b"])
    a = _conv_stack(T.linear(Tensor(Xa), weights["acc_in.w"], weights["acc_in.b"]), weights,
                    "acc_conv", cfg.cnn_dec_layers, drop)
    return T.linear(a + cond, weights["head.w"], weights["head.b"])


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------

def _step_model(X_wind, weights, cfg, batch, rng=None):
    """Return ``f(history) -> (B, L, d_a)`` with the wind side computed once."""
    if cfg.mode == "cnn_baseline":
        return lambda hist: cnn_forward(X_wind, hist, weights, cfg, rng)
    mem = memory_for(X_wind, weights, cfg, batch, rng)
    return lambda hist: decode(hist, mem, weights, cfg, rng)


def rollout(X_wind, X_acc, weights, cfg, horizon=None):
    """Autoregressive forecast ``(B, horizon, d_a)`` (dropout off, no graph)."""
    Xa = _batch(X_acc)
    Xw = _batch(X_wind) if X_wind is not None else np.zeros((Xa.shape[0], Xa.shape[1], cfg.d_w))
    horizon = cfg.L_pred if horizon is None else horizon
    with T.no_grad():
        step = _step_model(Xw, weights, cfg, Xa.shape[0])
        hist = Xa
        preds = []
        for _ in range(horizon):
            nxt = step(hist).data[:, -1:, :]
            preds.append(nxt)
            hist = np.concatenate([hist if cfg.context == "growing" else hist[:, 1:], nxt], axis=1)
    return np.concatenate(preds, axis=1)


def teacher_forced_forward(X_wind, X_acc, Y, weights, cfg, rng=None):
    """One pass over ``[X_acc ; Y shifted right]``; predictions for every target step."""
    Xa, Yb = _batch(X_acc), _batch(Y)
    if Xa.shape[0] != Yb.shape[0] or Xa.shape[2] != Yb.shape[2]:
        raise ValueError(f"history {Xa.shape} and target {Yb.shape} are incompatible")
    Xw = _batch(X_wind) if X_wind is not None else np.zeros((Xa.shape[0], Xa.shape[1], cfg.d_w))
    L, H = Xa.shape[1], Yb.shape[1]
    dec_in = np.concatenate([Xa, Yb[:, :-1]], axis=1)
    out = _step_model(Xw, weights, cfg, Xa.shape[0], rng)(dec_in)
    return out[:, L - 1:L - 1 + H, :]


def attention_maps(X_wind, X_acc, weights, cfg):
    """Encoder self, decoder self and cross attention maps of one forward pass."""
    Xa = _batch(X_acc)
    maps = {"encoder": []}
    with T.no_grad():
        if cfg.mode == "multimodal":
            mem = encode_wind(X_wind, weights, cfg, maps=maps["encoder"])
        else:
            mem = zero_memory(cfg, Xa.shape[0])
        decode(Xa, mem, weights, cfg, maps=maps)
    return maps
