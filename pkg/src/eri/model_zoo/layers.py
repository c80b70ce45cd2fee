"""Differentiable building blocks.

Every layer is a function of a parameter mapping ``P`` (name -> Var) and a
name prefix, so the same code serves the full models and isolated layer
gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DomainError
from . import autograd as ag
from .autograd import Var

LN_EPS = 1e-5


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(t / 10000^(2i/d)), odd columns cos."""
    if T < 1:
        raise DomainError("T must be positive")
    if d < 2 or d % 2:
        raise DomainError(f"positional encoding needs an even width, got {d}")
    t = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, two_i / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def dense(P, prefix: str, x: Var) -> Var:
    return x @ P[f"{prefix}.kernel"] + P[f"{prefix}.bias"]


def dropout(x: Var, rate: float, rng: np.random.Generator | None) -> Var:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def layer_norm(P, prefix: str, x: Var) -> Var:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + LN_EPS) ** -0.5) * P[f"{prefix}.gamma"] + P[f"{prefix}.beta"]


def multi_head_attention(P, prefix: str, x: Var, num_heads: int, dropout_rate=0.0, rng=None,
                         return_weights=False):
    """Self-attention over [B, T, d]; returns the output and optionally the weights [B, h, T, T]."""
    B, T, d = x.shape
    if d % num_heads:
        raise ContractError(f"d_model={d} is not divisible by num_heads={num_heads}")
    dh = d // num_heads

    def heads(v: Var) -> Var:
        return v.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(dense(P, f"{prefix}.query", x))
    k = heads(dense(P, f"{prefix}.key", x))
    v = heads(dense(P, f"{prefix}.value", x))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(dh)))
    weights = ag.softmax(scores, axis=-1)
    ctx = dropout(weights, dropout_rate, rng) @ v
    out = dense(P, f"{prefix}.output", ctx.transpose(0, 2, 1, 3).reshape(B, T, d))
    if return_weights:
        return out, weights.data
    return out


def transformer_block(P, prefix: str, x: Var, num_heads: int, dropout_rate=0.0, rng=None) -> Var:
    """Post-norm encoder block: attention and feed-forward, each with residual + layer norm."""
    a = multi_head_attention(P, f"{prefix}.attn", x, num_heads, dropout_rate, rng)
    x = layer_norm(P, f"{prefix}.norm1", x + a)
    f = dense(P, f"{prefix}.ff2", ag.relu(dense(P, f"{prefix}.ff1", x)))
    f = dropout(f, dropout_rate, rng)
    return layer_norm(P, f"{prefix}.norm2", x + f)


def transformer_encoder(P, prefix: str, x: Var, num_layers: int, num_heads: int, dropout_rate=0.0,
                        rng=None) -> Var:
    for i in range(num_layers):
        x = transformer_block(P, f"{prefix}.layer{i}", x, num_heads, dropout_rate, rng)
    return x


def lstm(P, prefix: str, x: Var) -> Var:
    """Single-layer LSTM over [B, T, d]; returns the final hidden state [B, H].

    Gate layout along the 4H axis is input, forget, cell, output.
    """
    B, T, _ = x.shape
    w_x, w_h, bias = P[f"{prefix}.w_x"], P[f"{prefix}.w_h"], P[f"{prefix}.bias"]
    H = w_h.shape[0]
    # input projections for all steps at once
    xp = x @ w_x + bias
    h = Var(np.zeros((B, H), dtype=x.data.dtype))
    c = Var(np.zeros((B, H), dtype=x.data.dtype))
    for t in range(T):
        z = xp[:, t, :] + h @ w_h
        i = ag.sigmoid(z[:, :H])
        f = ag.sigmoid(z[:, H : 2 * H])
        g = ag.tanh(z[:, 2 * H : 3 * H])
        o = ag.sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * ag.tanh(c)
    return h


def temporal_conv(P, prefix: str, x: Var, activation: bool = True) -> Var:
    """1-D convolution over time with zero 'same' padding, followed by ReLU.

    Kernel shape is [k, d_in, d_out]; output keeps the T axis.
    """
    B, T, _ = x.shape
    if T < 1:
        raise DomainError("temporal_conv needs at least one time step")
    kernel = P[f"{prefix}.kernel"]
    k = kernel.shape[0]
    lo = k // 2
    xp = ag.pad(x, ((0, 0), (lo, k - 1 - lo), (0, 0)))
    acc = None
    for j in range(k):
        term = xp[:, j : j + T, :] @ kernel[j]
        acc = term if acc is None else acc + term
    acc = acc + P[f"{prefix}.bias"]
    return ag.relu(acc) if activation else acc


def conv_block(P, prefix: str, x: Var) -> Var:
    return ag.maxpool2x2(ag.relu(ag.conv2d(x, P[f"{prefix}.kernel"], P[f"{prefix}.bias"])))


def spatial_embed(P, prefix: str, feats: Var) -> Var:
    """1x1 convolution d -> d_model over [N, h, w, d]."""
    return feats @ P[f"{prefix}.kernel"] + P[f"{prefix}.bias"]


def spatial_pool(x: Var) -> Var:
    """Global average pool over the two spatial axes preceding channels."""
    return x.mean(axis=(-3, -2))
