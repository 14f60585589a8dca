"""Feed-forward and attention sub-layers: dense, skill-routed, and top-2 MoE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    linear,
    matmul,
    mean_stack,
    relu,
    reshape,
    scale,
    scale_rows,
    scatter_rows,
    softmax_lastdim,
    take,
    transpose,
)


@dataclass
class FfnParams:
    w1: Tensor  # d x h
    b1: Tensor  # h
    w2: Tensor  # h x d
    b2: Tensor  # d

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def dims(self) -> tuple:
        return self.w1.shape


@dataclass
class SkillFfnBank:
    """Parallel FFNs, ordered like the routing-matrix columns they serve."""

    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty FFN bank")
        dims = self.members[0].dims
        for p in self.members:
            if p.dims != dims or p.w2.shape != dims[::-1]:
                raise ShapeError(f"bank members disagree on shape: {p.dims} vs {dims}")

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, k: int) -> FfnParams:
        return self.members[k]


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class SkillMhaParams:
    """One Q/K/V triple per language skill; the output projection is shared."""

    triples: list  # [(wq, wk, wv)] indexed by 0-based language skill
    wo: Tensor
    heads: int

    def select(self, language: int) -> MhaParams:
        if not 0 <= language < len(self.triples):
            raise KeyError(f"no attention triple registered for language index {language}")
        wq, wk, wv = self.triples[language]
        return MhaParams(wq, wk, wv, self.wo, self.heads)


def dense_ffn(x: Tensor, p: FfnParams) -> Tensor:
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def _check_mask(mask, n: int) -> list[int]:
    bits = [int(b) for b in (mask.bits if hasattr(mask, "bits") else mask)]
    if len(bits) != n:
        raise ContractError(f"mask of length {len(bits)} for a bank of {n} skills")
    active = [k for k, b in enumerate(bits) if b]
    if not active:
        raise ContractError("skill mask activates no skill")
    return active


def skill_ffn(x: Tensor, bank: SkillFfnBank, mask) -> Tensor:
    """Mean of the active skills' FFN outputs; inactive members are never evaluated."""
    active = _check_mask(mask, len(bank))
    return mean_stack([dense_ffn(x, bank[k]) for k in active])


def _split_heads(t: Tensor, b: int, n: int, heads: int, axes: tuple) -> Tensor:
    return transpose(reshape(t, (b, n, heads, t.shape[-1] // heads)), axes)


def attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    attn_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product self-attention; ``attn_mask[b, t]`` is 1 for real tokens."""
    if x.ndim != 3:
        raise ShapeError(f"attention expects [b, t, d], got {x.shape}")
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads
    q = _split_heads(linear(x, wq), b, n, heads, (0, 2, 1, 3))
    kt = _split_heads(linear(x, wk), b, n, heads, (0, 2, 3, 1))
    v = _split_heads(linear(x, wv), b, n, heads, (0, 2, 1, 3))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(dh))
    keep = None
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask)
        if attn_mask.shape != (b, n):
            raise ShapeError(f"attention mask {attn_mask.shape} vs input {x.shape}")
        keep = attn_mask[:, None, None, :].astype(bool)
    weights = softmax_lastdim(scores, keep)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return linear(ctx, wo)


def dense_mha(x: Tensor, p: MhaParams, attn_mask: Optional[np.ndarray] = None) -> Tensor:
    return attention(x, p.wq, p.wk, p.wv, p.wo, p.heads, attn_mask)


def skill_mha(x: Tensor, p: SkillMhaParams, language: int, attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """Attention with the Q/K/V projections of one language skill (0-based index)."""
    return dense_mha(x, p.select(language), attn_mask)


def top2_routing(logits: np.ndarray) -> np.ndarray:
    """Indices ``[..., 2]`` of the two largest logits; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :2]


def moe_ffn(x: Tensor, experts: SkillFfnBank, gate: Tensor) -> Tensor:
    """Per-token top-2 mixture: each token runs only its two selected experts.

    The two experts' outputs are combined with a softmax over the two selected
    gate logits.
    """
    n = len(experts)
    if n < 2:
        raise ContractError("top-2 MoE needs at least two experts")
    if gate.shape != (x.shape[-1], n):
        raise ShapeError(f"gate {gate.shape} vs input {x.shape} and {n} experts")
    shape = x.shape
    tokens = shape[0] * shape[1]
    flat = reshape(x, (tokens, shape[-1]))
    logits = linear(flat, gate)
    chosen = top2_routing(logits.data)
    selected = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(selected, chosen, True, axis=-1)
    weights = softmax_lastdim(logits, selected)
    out = None
    for e in range(n):
        rows = np.flatnonzero(selected[:, e])
        if rows.size == 0:
            continue
        ye = dense_ffn(take(flat, rows), experts[e])
        part = scatter_rows(scale_rows(ye, take(weights, (rows, e))), rows, tokens)
        out = part if out is None else out + part
    return reshape(out, shape)

