"""Scaled dot-product, multi-head, multi-encoder and path attention.

Heads of one group are stored stacked: ``W_Q`` has shape ``[h, d_m, d_k]``,
so slice ``j`` is the j-th head's projection.  Activations carry arbitrary
leading batch axes; the last two axes are (sequence, width).  Attention
projections have no bias terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, matmul, mul, reshape, softmax_masked, swapaxes

KEYS_AND_QUERIES = "keys-and-queries"
KEYS_ONLY = "keys-only"
UNIFORM = "uniform"
PER_NODE = "per-node"


@dataclass
class HeadParams:
    """Projections of a group of ``h`` heads: W_Q, W_K [h, d_m, d_k]; W_V [h, d_m, d_v]."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor

    @property
    def n_heads(self) -> int:
        return self.W_Q.shape[0]

    def __post_init__(self):
        h, d_m, d_k = self.W_Q.shape
        if self.W_K.shape != (h, d_m, d_k) or self.W_V.shape[:2] != (h, d_m):
            raise ValueError(
                f"inconsistent head shapes Q{self.W_Q.shape} K{self.W_K.shape} V{self.W_V.shape}"
            )


@dataclass
class SelfAttnParams:
    heads: HeadParams
    W_O: Tensor  # [h * d_v, d_m]


@dataclass
class MultiEncoderParams:
    """Head groups attached to encoder 1 and encoder 2 plus the shared output projection."""

    heads_enc1: HeadParams | None
    heads_enc2: HeadParams | None
    W_O: Tensor  # [(h1 + h2) * d_v, d_m]

    @property
    def h1(self) -> int:
        return 0 if self.heads_enc1 is None else self.heads_enc1.n_heads

    @property
    def h2(self) -> int:
        return 0 if self.heads_enc2 is None else self.heads_enc2.n_heads


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, key_mask=None) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V with optional boolean mask [.., m_q, m_k]."""
    d_k = Q.shape[-1]
    scores = matmul(Q, swapaxes(K, -1, -2)) / math.sqrt(d_k)
    return matmul(softmax_masked(scores, key_mask), V)


def _split_heads(X: Tensor, W: Tensor) -> Tensor:
    # [..., m, d_m] -> [..., h, m, d]
    lead = X.shape[:-2]
    Xh = reshape(X, lead + (1,) + X.shape[-2:])
    return matmul(Xh, W)


def _merge_heads(A: Tensor) -> Tensor:
    # [..., h, m, d_v] -> [..., m, h * d_v]
    h, m, d_v = A.shape[-3:]
    A = swapaxes(A, -3, -2)
    return reshape(A, A.shape[:-3] + (m, h * d_v))


def _head_mask(mask):
    # [..., m_q, m_k] -> [..., 1, m_q, m_k] so it broadcasts over heads
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:])


def _attend_group(O: Tensor, H: Tensor, heads: HeadParams, mask) -> Tensor:
    Q = _split_heads(O, heads.W_Q)
    K = _split_heads(H, heads.W_K)
    V = _split_heads(H, heads.W_V)
    return scaled_dot_attention(Q, K, V, _head_mask(mask))


def multi_head_attention(O: Tensor, H: Tensor, params: SelfAttnParams, key_mask=None) -> Tensor:
    """Standard multi-head attention of queries from ``O`` over ``H``."""
    A = _attend_group(O, H, params.heads, key_mask)
    return matmul(_merge_heads(A), params.W_O)


def causal_mask(m: int) -> np.ndarray:
    return np.tril(np.ones((m, m), dtype=bool))


def multi_head_self_attention(X: Tensor, params: SelfAttnParams, causal: bool = False, key_mask=None) -> Tensor:
    mask = key_mask
    if causal:
        c = causal_mask(X.shape[-2])
        mask = c if mask is None else np.logical_and(mask, c)
    return multi_head_attention(X, X, params, mask)


def multi_encoder_attention(
    O: Tensor,
    H1: Tensor | None,
    H2: Tensor | None,
    params: MultiEncoderParams,
    mask1=None,
    mask2=None,
) -> Tensor:
    """Cross-attention whose head groups read different encoders.

    Group one attends over ``H1`` and group two over ``H2``; the two may
    have different lengths.  Head outputs are concatenated (group one
    first) and projected by ``W_O``.  A group with zero heads ignores its
    encoder, which may then be ``None``.
    """
    groups = []
    if params.heads_enc1 is not None:
        if H1 is None:
            raise ValueError("encoder 1 output required: h1 > 0")
        groups.append(_attend_group(O, H1, params.heads_enc1, mask1))
    if params.heads_enc2 is not None:
        if H2 is None:
            raise ValueError("encoder 2 output required: h2 > 0")
        groups.append(_attend_group(O, H2, params.heads_enc2, mask2))
    if not groups:
        raise ValueError("multi-encoder attention needs at least one head")
    A = groups[0] if len(groups) == 1 else concat(groups, axis=-3)
    return matmul(_merge_heads(A), params.W_O)


def path_weights(masks: np.ndarray, path_valid=None, average: str = UNIFORM) -> np.ndarray:
    """Averaging coefficient per (path, node), shape [..., P, N].

    ``uniform`` gives every valid path weight 1/n_p; ``per-node`` divides
    each node's contribution by the number of paths through it.
    """
    masks = np.asarray(masks, dtype=bool)
    valid = np.ones(masks.shape[:-1], dtype=bool) if path_valid is None else np.asarray(path_valid, dtype=bool)
    m = masks & valid[..., None]
    if average == UNIFORM:
        n_p = np.maximum(valid.sum(axis=-1, keepdims=True), 1)  # [..., 1]
        return np.broadcast_to((valid / n_p)[..., None], masks.shape).astype(np.float64)
    if average == PER_NODE:
        count = m.sum(axis=-2, keepdims=True)  # [..., 1, N]
        return np.where(valid[..., None], 1.0 / np.maximum(count, 1), 0.0)
    raise ValueError(f"unknown path averaging {average!r}")


def path_attention(
    O: Tensor,
    masks,
    params: SelfAttnParams,
    path_valid=None,
    mode: str = KEYS_AND_QUERIES,
    average: str = UNIFORM,
) -> Tensor:
    """Self-attention run once per root-to-leaf path and averaged.

    ``masks`` is boolean [..., P, N] (row i marks the nodes of path i).
    For path i, keys outside the path get zero weight; in
    ``keys-and-queries`` mode queries outside the path also produce a zero
    row.  The per-path outputs C_i share all weights, so the average
    (1/n_p) sum_i C_i is formed on the attention matrices before the value
    and output projections, which is exactly equivalent.  Rows of
    ``path_valid`` set to False are padding paths and carry no weight.
    """
    masks = np.asarray(masks, dtype=bool)
    valid = np.ones(masks.shape[:-1], dtype=bool) if path_valid is None else np.asarray(path_valid, dtype=bool)
    empty = ~masks.any(axis=-1)
    if (empty & valid).any():
        raise ValueError("path_attention: a path mask row is empty")
    if mode not in (KEYS_AND_QUERIES, KEYS_ONLY):
        raise ValueError(f"unknown path mask mode {mode!r}")
    # padding paths get a harmless mask; their weight is zero below
    key_masks = np.where(empty[..., None], True, masks)

    heads = params.heads
    Q = _split_heads(O, heads.W_Q)  # [..., h, N, d_k]
    K = _split_heads(O, heads.W_K)
    V = _split_heads(O, heads.W_V)
    d_k = Q.shape[-1]
    scores = matmul(Q, swapaxes(K, -1, -2)) / math.sqrt(d_k)  # [..., h, N, N]
    lead = scores.shape[:-3]
    scores = reshape(scores, lead + (1,) + scores.shape[-3:])  # [..., 1, h, N, N]
    kmask = key_masks[..., :, None, None, :]  # [..., P, 1, 1, N]
    probs = softmax_masked(scores, kmask)  # [..., P, h, N, N]

    if mode == KEYS_AND_QUERIES:
        coef = path_weights(masks, valid, average) * masks  # [..., P, N]
    else:
        # every path reaches every query, so per-node counts equal n_p
        coef = path_weights(masks, valid, UNIFORM)
    weighted = mul(probs, coef[..., :, None, :, None])
    A = weighted.sum(axis=-4)  # [..., h, N, N]
    out = matmul(A, V)
    return matmul(_merge_heads(out), params.W_O)
