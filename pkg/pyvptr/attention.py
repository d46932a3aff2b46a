"""
Multi-head attention and its factorized applications.

`mha` is the primitive: per head a softmax over scaled dot products
(scale `1/sqrt(D/h)`), heads concatenated, then the output projection.
The spatial and temporal layers only decide which positions share a
softmax by regrouping axes before calling it.

Positional encodings are added to queries and keys, never to values.
The relative variant is a per-head bias on the logits instead.
"""

from enum import Enum
import functools
import math

from einops import rearrange
import torch
from torch import nn

from pyvptr.core import (
    MaskError,
    ShapeError,
    ConfigError,
    window_partition,
    window_merge,
    fold_temporal,
    unfold_temporal,
)

# Added to disallowed logits; exp() of it underflows to an exact zero.
MASK_FILL = -1e9


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    @property
    def head_dim(self):
        return self.d_model // self.heads

    def forward(self, q_in, k_in, v_in, mask=None, rpe_bias=None):
        return mha(q_in, k_in, v_in, self, mask=mask, rpe_bias=rpe_bias)


def causal_mask(length, device=None):
    """`allowed[t, t']` iff `t' <= t`."""
    if length < 1:
        raise MaskError(f"causal_mask needs length >= 1, got {length}")
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def check_mask(mask, queries, keys):
    if mask.dtype != torch.bool:
        raise MaskError(f"Attention masks must be boolean, got {mask.dtype}")
    if tuple(mask.shape) != (queries, keys):
        raise MaskError(f"Mask shape {tuple(mask.shape)} does not match attention ({queries}, {keys})")
    if not mask.any(dim=-1).all():
        rows = (~mask.any(dim=-1)).nonzero().flatten().tolist()
        raise MaskError(f"Mask rows {rows} allow no keys")


def attention_weights(q_in, k_in, params, mask=None, rpe_bias=None):
    """Softmax rows `[B, h, Tq, Tk]` of the attention in `mha`."""
    if q_in.ndim != 3 or k_in.ndim != 3:
        raise ShapeError(f"Attention inputs must be [B, T, D], got {tuple(q_in.shape)} and {tuple(k_in.shape)}")
    if q_in.shape[0] != k_in.shape[0] or q_in.shape[-1] != params.d_model or k_in.shape[-1] != params.d_model:
        raise ShapeError(
            f"Attention inputs {tuple(q_in.shape)} and {tuple(k_in.shape)} do not match d_model={params.d_model}"
        )
    q = rearrange(params.w_q(q_in), "b t (h e) -> b h t e", h=params.heads)
    k = rearrange(params.w_k(k_in), "b t (h e) -> b h t e", h=params.heads)
    logits = q @ k.transpose(-2, -1) / math.sqrt(params.head_dim)
    if rpe_bias is not None:
        if tuple(rpe_bias.shape) != (params.heads, q_in.shape[1], k_in.shape[1]):
            raise ShapeError(
                f"RPE bias {tuple(rpe_bias.shape)} does not match ({params.heads}, {q_in.shape[1]}, {k_in.shape[1]})"
            )
        logits = logits + rpe_bias
    if mask is not None:
        check_mask(mask, q_in.shape[1], k_in.shape[1])
        logits = logits.masked_fill(~mask, MASK_FILL)
    return logits.softmax(dim=-1)


def mha(q_in, k_in, v_in, params, mask=None, rpe_bias=None):
    if v_in.shape[:2] != k_in.shape[:2]:
        raise ShapeError(f"Keys {tuple(k_in.shape)} and values {tuple(v_in.shape)} disagree")
    weights = attention_weights(q_in, k_in, params, mask=mask, rpe_bias=rpe_bias)
    v = rearrange(params.w_v(v_in), "b t (h e) -> b h t e", h=params.heads)
    out = rearrange(weights @ v, "b h t e -> b t (h e)")
    return params.w_o(out)


class PosEnc(Enum):
    abs2d = "abs2d"
    rpe2d = "rpe2d"
    abs1d = "abs1d"
    none = "none"


@functools.lru_cache(maxsize=64)
def _sine_table(length, dim, temperature=10000.0):
    """`[length, dim]` with sin on even channels and cos on odd ones."""
    position = torch.arange(length, dtype=torch.float64)[:, None]
    freqs = torch.arange(0, dim, 2, dtype=torch.float64)
    angles = position / temperature ** (freqs / dim)
    table = torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(1)
    return table[:, :dim].to(torch.float32)


def sine_1d(length, d_model):
    return _sine_table(length, d_model).clone()


def sine_2d(height, width, d_model):
    rows = _sine_table(height, d_model // 2)
    cols = _sine_table(width, d_model - d_model // 2)
    return torch.cat(
        [rows[:, None, :].expand(height, width, -1), cols[None, :, :].expand(height, width, -1)],
        dim=-1,
    ).contiguous()


def relative_position_index(window):
    """`[K*K, K*K]` index of `(drow, dcol)` into a `(2K-1)^2` table."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    delta = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return delta[0] * (2 * window - 1) + delta[1]


class PositionalEncoding(nn.Module):
    """Fixed sine tables (`abs1d`, `abs2d`) or a learned relative bias (`rpe2d`).

    `shape` is `(T_max,)` for abs1d, `(Hf, Wf)` for abs2d and `(K, K)` for
    rpe2d. Fixed tables are non-persistent buffers, so checkpoints only
    ever carry the learned table.
    """

    def __init__(self, variant, shape, d_model, heads=1):
        super().__init__()
        self.variant = PosEnc(variant)
        self.shape = tuple(shape)
        self.d_model = d_model
        if self.variant in (PosEnc.abs1d, PosEnc.abs2d) and d_model % 2:
            raise ConfigError(f"Sine positional encodings need an even d_model, got {d_model}")
        if self.variant is PosEnc.abs1d:
            self.register_buffer("table", sine_1d(self.shape[0], d_model), persistent=False)
        elif self.variant is PosEnc.abs2d:
            self.register_buffer("table", sine_2d(*self.shape, d_model), persistent=False)
        elif self.variant is PosEnc.rpe2d:
            window = self.shape[0]
            # zero init: starts out identical to attention without positions
            self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
            self.register_buffer("index", relative_position_index(window), persistent=False)

    @property
    def trainable(self):
        return self.variant is PosEnc.rpe2d

    def query_key_term(self, length=None, start=0):
        """Additive term for queries and keys, or None.

        For abs1d, rows `start .. start+length` of the table.
        """
        if self.variant is PosEnc.abs1d:
            stop = None if length is None else start + length
            if stop is not None and stop > self.shape[0]:
                raise ShapeError(f"Positions {start}..{stop - 1} exceed positional table of {self.shape[0]}")
            return self.table[start:stop]
        if self.variant is PosEnc.abs2d:
            return self.table
        return None

    def logit_bias(self):
        """Per-head `[h, K*K, K*K]` bias for rpe2d, else None."""
        if self.variant is not PosEnc.rpe2d:
            return None
        window = self.shape[0] ** 2
        return rearrange(self.table[self.index.flatten()], "(q k) h -> h q k", q=window)


def make_posenc(variant, shape, d_model, heads=1):
    return PositionalEncoding(variant, shape, d_model, heads=heads)


def local_spatial_mhsa(z, params, posenc, window):
    if z.ndim != 4:
        raise ShapeError(f"local_spatial_mhsa expects [NT, Hf, Wf, D], got {tuple(z.shape)}")
    _, height, width, _ = z.shape
    qk = z
    bias = None
    if posenc is not None:
        term = posenc.query_key_term()
        if term is not None:
            if tuple(term.shape[:2]) != (height, width):
                raise ShapeError(f"Positional table {tuple(term.shape)} does not cover {height}x{width}")
            qk = z + term
        bias = posenc.logit_bias()
    qk_windows = window_partition(qk, window)
    v_windows = window_partition(z, window)
    out = mha(qk_windows, qk_windows, v_windows, params, rpe_bias=bias)
    return window_merge(out, window, height, width)


def temporal_mhsa(z, params, posenc, mask=None, query_pos=None):
    """Self-attention across time at every spatial location of `[N, T, Hf, Wf, D]`.

    `query_pos` (`[T, Hf, Wf, D]`) is added to queries and keys only.
    """
    if z.ndim != 5:
        raise ShapeError(f"temporal_mhsa expects [N, T, Hf, Wf, D], got {tuple(z.shape)}")
    batch, length, height, width, _ = z.shape
    seq = fold_temporal(z)
    qk = seq if query_pos is None else fold_temporal(z + query_pos)
    if posenc is not None:
        qk = qk + posenc.query_key_term(length)
    out = mha(qk, qk, seq, params, mask=mask)
    return unfold_temporal(out, batch, height, width)


def temporal_cross_mha(z, memory, params, posenc, query_pos=None, memory_posenc=True, mask=None, query_start=0):
    """Cross-time attention: the stream `z` queries `memory` location by location.

    `query_pos` is an optional `[T, Hf, Wf, D]` term added to the queries
    (the learned future-frame queries of the non-autoregressive decoder).
    Queries take time positions from `query_start` on, memories from 0.
    """
    if z.ndim != 5 or memory.ndim != 5 or z.shape[2:] != memory.shape[2:] or z.shape[0] != memory.shape[0]:
        raise ShapeError(f"Cannot attend from {tuple(z.shape)} to memory {tuple(memory.shape)}")
    batch, length, height, width, _ = z.shape
    q = z
    if query_pos is not None:
        q = q + query_pos
    q = fold_temporal(q)
    mem = fold_temporal(memory)
    k = mem
    if posenc is not None:
        q = q + posenc.query_key_term(length, query_start)
        if memory_posenc:
            k = mem + posenc.query_key_term(memory.shape[1])
    out = mha(q, k, mem, params, mask=mask)
    return unfold_temporal(out, batch, height, width)
