"""Transformer building blocks shared by the encoder and the decoder."""

from __future__ import annotations

import functools

import numpy as np

from . import kernel as K
from .kernel import Tensor


def linear(x, p, name) -> Tensor:
    return K.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def norm(x, p, name) -> Tensor:
    return K.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def ffn(x, p, name) -> Tensor:
    return linear(K.relu(linear(x, p, f"{name}.1")), p, f"{name}.2")


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return K.transpose(K.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, dk = x.shape
    return K.reshape(K.transpose(x, (0, 2, 1, 3)), (B, L, H * dk))


def attend(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention over head-split (B, H, L, dk) tensors."""
    dk = q.shape[-1]
    scores = K.matmul(q, K.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    return K.matmul(K.masked_softmax(scores, mask), v)


def project_kv(x_kv, p, name, heads):
    return (split_heads(linear(x_kv, p, f"{name}.k"), heads),
            split_heads(linear(x_kv, p, f"{name}.v"), heads))


def mha(x_q, x_kv, p, name, heads, mask, kv=None) -> Tensor:
    """Multi-head attention; ``kv`` may carry pre-projected keys/values."""
    q = split_heads(linear(x_q, p, f"{name}.q"), heads)
    k, v = kv if kv is not None else project_kv(x_kv, p, name, heads)
    return linear(merge_heads(attend(q, k, v, mask)), p, f"{name}.o")


@functools.lru_cache(maxsize=32)
def _sinusoid_table(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    table.setflags(write=False)
    return table


def sinusoid(start: int, count: int, d: int) -> np.ndarray:
    """Absolute sinusoidal position codes for positions ``start .. start+count-1``."""
    n = 1 << max(6, int(np.ceil(np.log2(max(start + count, 1)))))
    return _sinusoid_table(n, d)[start:start + count]
