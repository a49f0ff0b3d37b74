"""Masked joint attention over concatenated text and latent tokens.

The sequence order is fixed: N step-text blocks, then N latent-region
blocks. The pairing mask allows block i to attend to block j iff i == j or
|i - j| == N, i.e. every block sees itself and its partner across the
text/latent divide — step n's text talks only to region n's latents and
vice versa. Cross-region exchange happens in a second, unmasked pass over
the whole-recipe text, and the two latent predictions are blended with a
scalar knob.

Masked entries are excluded from the softmax entirely (not down-weighted),
so forbidden attention weights are exact zeros and the no-leakage property
holds bit-for-bit and in gradients, at any stack depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .layout import LatentSequence, RegionLayout
from .tensor import (
    ParameterError,
    ShapeError,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    linear,
    masked_softmax_rows,
    matmul,
    scale,
    slice_cols,
    slice_rows,
    transpose,
)
from .text import TokenBlock

__all__ = [
    "StepMask",
    "JointSequence",
    "AttentionParams",
    "build_step_mask",
    "build_full_mask",
    "joint_attention",
    "attention_probabilities",
    "regional_pass",
    "base_pass",
    "fuse_latents",
    "mask_to_pbm",
    "init_attention_params",
]

Extent = tuple[int, int]
BlockFn = Callable[["JointSequence", "StepMask"], "JointSequence"]


@dataclass(frozen=True)
class StepMask:
    """Pairing mask at block granularity plus its token-level expansion."""

    block_matrix: np.ndarray
    token_matrix: np.ndarray
    block_extents: tuple[Extent, ...]

    @property
    def n_steps(self) -> int:
        return self.block_matrix.shape[0] // 2

    @property
    def n_tokens(self) -> int:
        return self.token_matrix.shape[0]

    @property
    def text_extents(self) -> tuple[Extent, ...]:
        return self.block_extents[:self.n_steps]

    @property
    def latent_extents(self) -> tuple[Extent, ...]:
        return self.block_extents[self.n_steps:]


def build_step_mask(step_token_lengths: Sequence[int],
                    region_token_counts: Sequence[int]) -> StepMask:
    """Pairing mask for N text blocks followed by N latent blocks.

    Block i may attend block j iff i == j or |i - j| == N. Token matrix is
    the per-token expansion of that block matrix.
    """
    n = len(step_token_lengths)
    if n < 1 or len(region_token_counts) != n:
        raise ShapeError(
            f"invalid layout: {len(step_token_lengths)} step blocks vs "
            f"{len(region_token_counts)} region blocks")
    lengths = [int(x) for x in step_token_lengths] + [int(x) for x in region_token_counts]
    for k, length in enumerate(lengths):
        if length < 1:
            kind = "step" if k < n else "region"
            raise ShapeError(f"invalid layout: empty {kind} block {k % n}")
    idx = np.arange(2 * n)
    block = (idx[:, None] == idx[None, :]) | (np.abs(idx[:, None] - idx[None, :]) == n)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    extents = tuple((int(offsets[k]), lengths[k]) for k in range(2 * n))
    block_of = np.repeat(idx, lengths)
    token = block[block_of[:, None], block_of[None, :]]
    return StepMask(block_matrix=block, token_matrix=token, block_extents=extents)


def build_full_mask(step_token_lengths: Sequence[int],
                    region_token_counts: Sequence[int]) -> StepMask:
    """All-allowed mask over the same block structure — the pairing
    restriction switched off, for ablation runs and the global pass."""
    paired = build_step_mask(step_token_lengths, region_token_counts)
    return StepMask(block_matrix=np.ones_like(paired.block_matrix),
                    token_matrix=np.ones_like(paired.token_matrix),
                    block_extents=paired.block_extents)


def mask_to_pbm(mask: StepMask, which: str = "token") -> str:
    """Serialize one of the mask matrices as plain PBM (P1) text."""
    if which == "token":
        m = mask.token_matrix
    elif which == "block":
        m = mask.block_matrix
    else:
        raise ParameterError(f"unknown mask matrix {which!r}")
    rows, cols = m.shape
    lines = ["P1", f"{cols} {rows}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in m]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class JointSequence:
    """Concatenated text-then-latent token matrix with block extents.

    layout/t are carried along when the latent half came from a
    LatentSequence, so passes can hand back a proper LatentSequence.
    """

    tokens: Tensor
    text_extents: tuple[Extent, ...]
    latent_extents: tuple[Extent, ...]
    layout: RegionLayout | None = None
    t: float | None = None

    def __post_init__(self):
        if not self.text_extents or not self.latent_extents:
            raise ShapeError("joint sequence needs text and latent blocks")
        pos = 0
        for off, length in (*self.text_extents, *self.latent_extents):
            if off != pos or length < 1:
                raise ShapeError(
                    f"block extents must tile the sequence: got offset {off} "
                    f"where {pos} was expected")
            pos = off + length
        if pos != self.tokens.shape[0]:
            raise ShapeError(
                f"extents cover {pos} tokens but sequence has {self.tokens.shape[0]}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def latent_offset(self) -> int:
        return self.latent_extents[0][0]

    @classmethod
    def from_parts(cls, text_blocks: Sequence[TokenBlock],
                   latents: LatentSequence) -> "JointSequence":
        if not text_blocks:
            raise ShapeError("joint sequence needs at least one text block")
        widths = {b.width for b in text_blocks} | {latents.width}
        if len(widths) != 1:
            raise ShapeError(f"mixed token widths in joint sequence: {sorted(widths)}")
        text_extents, pos = [], 0
        for b in text_blocks:
            if b.n_tokens < 1:
                raise ShapeError(f"text block for step {b.source_step} is empty")
            text_extents.append((pos, b.n_tokens))
            pos += b.n_tokens
        if len(text_blocks) == 1:
            latent_extents = [(pos, latents.layout.total_tokens)]
        else:
            if len(text_blocks) != latents.layout.n_regions:
                raise ShapeError(
                    f"{len(text_blocks)} text blocks vs "
                    f"{latents.layout.n_regions} latent regions")
            latent_extents = [(pos + lo, hi - lo)
                              for lo, hi in (latents.layout.region_span(r)
                                             for r in range(latents.layout.n_regions))]
        tokens = concat_rows([b.tokens for b in text_blocks] + [latents.tokens])
        return cls(tokens=tokens, text_extents=tuple(text_extents),
                   latent_extents=tuple(latent_extents),
                   layout=latents.layout, t=latents.t)

    def with_tokens(self, tokens: Tensor) -> "JointSequence":
        if tokens.shape != self.tokens.shape:
            raise ShapeError(
                f"replacement tokens {tokens.shape} != {self.tokens.shape}")
        return JointSequence(tokens, self.text_extents, self.latent_extents,
                             self.layout, self.t)

    def latent_part(self) -> LatentSequence:
        if self.layout is None:
            raise ShapeError("joint sequence carries no region layout")
        toks = slice_rows(self.tokens, self.latent_offset, self.n_tokens)
        return LatentSequence(toks, self.layout, self.t)


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights for multi-head attention over a joint sequence."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got "
                                 f"{getattr(self, name).shape}")
        for name in ("bq", "bk", "bv", "bo"):
            if getattr(self, name).data.reshape(-1).shape[0] != d:
                raise ShapeError(f"{name} must have length {d}")
        if d % self.heads:
            raise ShapeError(f"width {d} not divisible into {self.heads} heads")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def init_attention_params(d: int, heads: int, rng: np.random.Generator
                          ) -> AttentionParams:
    s = 1.0 / np.sqrt(d)
    ws = [Tensor(rng.normal(scale=s, size=(d, d))) for _ in range(4)]
    bs = [Tensor(np.zeros(d)) for _ in range(4)]
    return AttentionParams(*ws, *bs, heads=heads)


def _head_contexts(x: JointSequence, mask: StepMask, params: AttentionParams):
    if mask.n_tokens != x.n_tokens:
        raise ShapeError(
            f"mask over {mask.n_tokens} tokens applied to {x.n_tokens}-token sequence")
    q = linear(x.tokens, params.wq, params.bq)
    k = linear(x.tokens, params.wk, params.bk)
    v = linear(x.tokens, params.wv, params.bv)
    hd = params.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)
    for h in range(params.heads):
        lo, hi = h * hd, (h + 1) * hd
        qh, kh, vh = (slice_cols(m, lo, hi) for m in (q, k, v))
        logits = scale(matmul(qh, transpose(kh)), inv_sqrt)
        probs = masked_softmax_rows(logits, mask.token_matrix)
        yield probs, vh


def joint_attention(x: JointSequence, mask: StepMask,
                    params: AttentionParams) -> JointSequence:
    """Multi-head attention restricted by the mask; output projection, no
    residual (residual wiring belongs to the enclosing block)."""
    heads = [matmul(p, v) for p, v in _head_contexts(x, mask, params)]
    out = linear(concat_cols(heads), params.wo, params.bo)
    return x.with_tokens(out)


def attention_probabilities(x: JointSequence, mask: StepMask,
                            params: AttentionParams) -> np.ndarray:
    """Per-head attention weight matrices [heads, T, T]; diagnostic only."""
    return np.stack([p.data for p, _ in _head_contexts(x, mask, params)])


def regional_pass(x: JointSequence, mask: StepMask, block: BlockFn) -> LatentSequence:
    """Run the block under the pairing mask; return the latent half."""
    if mask.block_extents != (*x.text_extents, *x.latent_extents):
        raise ShapeError("mask extents do not match the joint sequence")
    return block(x, mask).latent_part()


def base_pass(recipe_tokens: TokenBlock, latents: LatentSequence,
              block: BlockFn) -> LatentSequence:
    """Run the block over [whole-recipe text; all latents] with everything
    allowed to attend to everything."""
    x = JointSequence.from_parts([recipe_tokens], latents)
    mask = build_step_mask([recipe_tokens.n_tokens], [latents.layout.total_tokens])
    return block(x, mask).latent_part()


def fuse_latents(z_base: LatentSequence, z_region: LatentSequence,
                 alpha: float) -> LatentSequence:
    """Blend the two latent streams: alpha of base, (1 - alpha) of regional."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"fusion weight must lie in [0, 1], got {alpha}")
    if z_base.tokens.shape != z_region.tokens.shape:
        raise ShapeError(
            f"latent shapes differ: {z_base.tokens.shape} vs {z_region.tokens.shape}")
    if z_base.layout != z_region.layout:
        raise ShapeError("latent streams describe different region layouts")
    fused = add(scale(z_base.tokens, alpha), scale(z_region.tokens, 1.0 - alpha))
    return z_region.with_tokens(fused)
