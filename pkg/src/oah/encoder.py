"""Latency-controlled streaming transformer encoder.

Pipeline: causal conv down-sampling (x4) -> projection + sinusoidal positions
-> pre-norm blocks whose self-attention sees only ``[t - tau, t]`` -> final
layer norm -> future-context convolution over ``[t, t + epsilon]``.

Down-sampling convs are left-padded by one frame with stride 2 and kernel 3,
so layer output j reads input frames ``2j-1 .. 2j+1``.  Down-sampled frame u
therefore depends on raw frames up to ``4u + 3`` and ``U = T // 4``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .kernel import Tensor
from .layers import ffn, linear, mha, norm, sinusoid
from .model import ModelParams

FRAME_SHIFT_MS = 10
SUBSAMPLING = 4


class StreamStateError(RuntimeError):
    pass


@dataclass
class EncodedStates:
    states: np.ndarray  # (U, d_model)
    num_raw_frames: int

    def __len__(self):
        return self.states.shape[0]


def latency_ms(epsilon: int) -> int:
    """Ideal algorithmic latency of the context layer: 40 ms per down-sampled frame."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return FRAME_SHIFT_MS * SUBSAMPLING * (epsilon + 1)


def num_encoded_frames(num_raw_frames: int) -> int:
    return num_raw_frames // SUBSAMPLING


def last_raw_frame(u: int, epsilon: int) -> int:
    """Index of the last raw frame that can influence hhat_u.

    Each causal stride-2 conv output j reads inputs up to 2j + 1, so the
    down-sampled frame t sees raw frames up to 4t + 3; the context layer
    adds ``epsilon`` down-sampled frames on top.
    """
    return SUBSAMPLING * (u + epsilon) + 3


def attention_band(n_q: int, q_start: int, n_k: int, k_start: int, tau: int) -> np.ndarray:
    """Boolean (n_q, n_k) mask: key position in ``[q - tau, q]``."""
    q = q_start + np.arange(n_q)[:, None]
    k = k_start + np.arange(n_k)[None, :]
    return (k <= q) & (k >= q - tau)


# ---------------------------------------------------------------------------
# layer pieces
# ---------------------------------------------------------------------------


def _conv_layer(x, p, name):
    return K.relu(K.conv1d(K.pad_time(x, 1, 0), p[f"{name}.w"], p[f"{name}.b"], stride=2))


def downsample(p: ModelParams, features) -> Tensor:
    """Two causal stride-2 conv + ReLU layers over (B, T, D) features."""
    x = K.as_tensor(features)
    if x.ndim == 2:
        x = K.reshape(x, (1,) + x.shape)
    return _conv_layer(_conv_layer(x, p, "enc.conv1"), p, "enc.conv2")


def _embed(p, x, start):
    y = linear(x, p, "enc.proj")
    return y + sinusoid(start, y.shape[1], y.shape[2])


def encoder_block(p: ModelParams, i: int, x_q: Tensor, x_kv: Tensor | None, mask) -> Tensor:
    """Pre-norm block.  ``x_kv`` holds the block inputs visible as keys
    (``None`` means the queries themselves)."""
    heads = p.config.encoder.heads
    a = norm(x_q, p, f"enc.{i}.ln1")
    kv = a if x_kv is None else norm(x_kv, p, f"enc.{i}.ln1")
    x = x_q + mha(a, kv, p, f"enc.{i}.att", heads, mask)
    return x + ffn(norm(x, p, f"enc.{i}.ln2"), p, f"enc.{i}.ffn")


def streaming_self_attention(p: ModelParams, block: int, x: np.ndarray, t: int) -> np.ndarray:
    """Attention output of ``block`` at position t of a (U, d) block input,
    computed from the clipped window ``[max(0, t - tau), t]`` alone."""
    tau = p.config.encoder.tau
    lo = max(0, t - tau)
    window = K.as_tensor(x[None, lo:t + 1])
    query = K.as_tensor(x[None, t:t + 1])
    heads = p.config.encoder.heads
    q = norm(query, p, f"enc.{block}.ln1")
    kv = norm(window, p, f"enc.{block}.ln1")
    out = mha(q, kv, p, f"enc.{block}.att", heads, np.ones((1, t + 1 - lo), dtype=bool))
    return out.data[0, 0]


def context_layer(p: ModelParams, h: Tensor) -> Tensor:
    """hhat_t = sum_{i=0..eps} h_{t+i} @ W_i + b with zero rows past the end."""
    eps = p.config.encoder.epsilon
    h = K.as_tensor(h)
    return K.conv1d(K.pad_time(h, 0, eps), p["enc.ctx.w"], p["enc.ctx.b"], stride=1)


# ---------------------------------------------------------------------------
# offline encoding
# ---------------------------------------------------------------------------


def encoder_forward(p: ModelParams, feats, lengths=None):
    """Encode a zero-padded (B, T, D) batch.

    Returns ``(hhat, enc_lengths)`` with hhat a (B, U, d) Tensor.  Rows past
    an utterance's own length are not meaningful.
    """
    feats = K.as_tensor(feats)
    B, T, _ = feats.shape
    if lengths is None:
        lengths = np.full(B, T)
    enc_lengths = np.asarray(lengths) // SUBSAMPLING
    x = _embed(p, downsample(p, feats), 0)
    U = x.shape[1]
    mask = attention_band(U, 0, U, 0, p.config.encoder.tau)
    for i in range(p.config.encoder.num_blocks):
        x = encoder_block(p, i, x, None, mask)
    h = norm(x, p, "enc.ln_f")
    if np.any(enc_lengths < U):
        valid = (np.arange(U)[None, :] < enc_lengths[:, None]).astype(np.float64)[:, :, None]
        h = h * valid
    return context_layer(p, h), enc_lengths


def encode(p: ModelParams, features) -> EncodedStates:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != p.config.feat_dim:
        raise ValueError(f"expected (T, {p.config.feat_dim}) features, got {features.shape}")
    T = features.shape[0]
    if T < SUBSAMPLING:
        return EncodedStates(np.zeros((0, p.config.d_model)), T)
    hhat, _ = encoder_forward(p, features[None])
    return EncodedStates(hhat.data[0], T)


# ---------------------------------------------------------------------------
# streaming encoding
# ---------------------------------------------------------------------------


@dataclass
class StreamState:
    """Incremental encoder state for one utterance."""

    raw: np.ndarray            # raw frames from index 2*n1 - 1 (or 0) onward
    raw_base: int = 0          # global index of raw[0]
    n_raw: int = 0
    c1: np.ndarray = None      # conv1 outputs from index 2*n_ds - 1 (or 0) onward
    c1_base: int = 0
    n1: int = 0
    n_ds: int = 0              # down-sampled frames produced
    caches: list = field(default_factory=list)  # per-block last tau block inputs
    h: np.ndarray = None       # final-norm rows from index n_out onward
    n_out: int = 0             # hhat rows emitted
    finished: bool = False


def stream_init(p: ModelParams) -> StreamState:
    d, D, C = p.config.d_model, p.config.feat_dim, p.config.encoder.conv_channels
    return StreamState(
        raw=np.zeros((0, D)), c1=np.zeros((0, C)), h=np.zeros((0, d)),
        caches=[np.zeros((0, d)) for _ in range(p.config.encoder.num_blocks)],
    )


def _stream_conv(p, name, buf, base, n_in, n_done):
    """New stride-2 conv outputs j >= n_done with 2j + 1 < n_in."""
    j_end = n_in // 2
    if j_end <= n_done:
        return None, buf, base
    lo = 2 * n_done - 1
    seg = buf[max(lo, base) - base: 2 * j_end - base]
    if lo < 0:
        seg = np.concatenate([np.zeros((1, buf.shape[1])), seg])
    x = K.conv1d(seg[None], p[f"{name}.w"], p[f"{name}.b"], stride=2)
    out = np.maximum(x.data[0], 0.0)
    keep_from = max(0, 2 * j_end - 1)
    return out, buf[keep_from - base:], keep_from


def encode_push(p: ModelParams, state: StreamState, frames) -> np.ndarray:
    """Feed raw frames; returns the newly available hhat rows (n, d)."""
    if state.finished:
        raise StreamStateError("push after end-of-stream flush")
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, p.config.feat_dim)
    d = p.config.d_model
    if frames.shape[0] == 0:
        return np.zeros((0, d))
    state.raw = np.concatenate([state.raw, frames])
    state.n_raw += frames.shape[0]

    c1_new, state.raw, state.raw_base = _stream_conv(p, "enc.conv1", state.raw, state.raw_base,
                                                     state.n_raw, state.n1)
    if c1_new is None:
        return np.zeros((0, d))
    state.c1 = np.concatenate([state.c1, c1_new])
    state.n1 += c1_new.shape[0]
    ds_new, state.c1, state.c1_base = _stream_conv(p, "enc.conv2", state.c1, state.c1_base,
                                                   state.n1, state.n_ds)
    if ds_new is None:
        return np.zeros((0, d))

    tau = p.config.encoder.tau
    start = state.n_ds
    m = ds_new.shape[0]
    x = _embed(p, K.as_tensor(ds_new[None]), start)
    for i in range(p.config.encoder.num_blocks):
        cache = state.caches[i]
        kv = np.concatenate([cache, x.data[0]])
        mask = attention_band(m, start, kv.shape[0], start - cache.shape[0], tau)
        state.caches[i] = kv[max(0, kv.shape[0] - tau):] if tau else kv[:0]
        x = encoder_block(p, i, x, K.as_tensor(kv[None]), mask)
    state.n_ds += m
    state.h = np.concatenate([state.h, norm(x, p, "enc.ln_f").data[0]])
    return _emit_context(p, state, final=False)


def _emit_context(p, state, final):
    eps = p.config.encoder.epsilon
    total = state.n_ds
    ready = total if final else max(state.n_out, total - eps)
    count = ready - state.n_out
    if count <= 0:
        return np.zeros((0, p.config.d_model))
    seg = state.h[: count + eps]
    pad = count + eps - seg.shape[0]
    out = K.conv1d(K.pad_time(seg[None], 0, pad), p["enc.ctx.w"], p["enc.ctx.b"], stride=1)
    state.h = state.h[count:]
    state.n_out = ready
    return out.data[0]


def encode_flush(p: ModelParams, state: StreamState) -> np.ndarray:
    """End of stream: emit the remaining rows with zero future padding."""
    if state.finished:
        raise StreamStateError("stream already flushed")
    rows = _emit_context(p, state, final=True)
    state.finished = True
    return rows
