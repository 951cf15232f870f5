"""Hybrid transformer encoder layer: biased self-attention, feed-forward, parallel LWTA aggregation.

Token slot 0 is the special token; slots 1..s hold the feature embeddings.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, uniform_init
from .stochastic import GumbelSampler, KlAccumulator, LwtaLayer, lwta_forward
from .tensor import Tensor


def _dropout(x: Tensor, p: float, sampler: GumbelSampler | None, active: bool) -> Tensor:
    if not active or p <= 0.0:
        return x
    if sampler is None:
        raise ContractError("dropout is active but no sampler was supplied")
    return T.dropout_mask_apply(x, sampler.dropout_mask(x.shape, p))


class AttentionBlock(Module):
    def __init__(
        self,
        d: int,
        heads: int,
        n_tokens: int,
        rng: np.random.Generator,
        use_bias: bool = True,
        dropout: float = 0.0,
    ):
        super().__init__()
        if d % heads:
            raise ContractError(f"embedding width {d} not divisible by {heads} heads")
        self.d, self.heads, self.n_tokens, self.dropout = d, heads, n_tokens, dropout
        self.q = self.child("q", Linear(d, d, rng))
        # a key bias only shifts each query's logits by a constant, so it would never train
        self.k = self.child("k", Linear(d, d, rng, bias=False))
        self.v = self.child("v", Linear(d, d, rng))
        self.out = self.child("out", Linear(d, d, rng))
        self.attn_bias = self.param("attn_bias", np.zeros((heads, n_tokens, n_tokens))) if use_bias else None


def biased_attention(
    H: Tensor,
    block: AttentionBlock,
    sampler: GumbelSampler | None = None,
    dropout_active: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with a learned additive logit bias per head."""
    if H.ndim != 3 or H.shape[-1] != block.d:
        raise DimensionError(f"biased_attention: expected (batch, tokens, {block.d}), got {H.shape}")
    if H.shape[1] != block.n_tokens:
        raise DimensionError(
            f"biased_attention: {H.shape[1]} tokens but attention bias is sized for {block.n_tokens}"
        )
    dh = block.d // block.heads
    Q, K, V = block.q(H), block.k(H), block.v(H)
    outs, weights = [], []
    for h in range(block.heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        logits = T.scalar_mul(T.matmul(Q[cols], T.transpose_last2(K[cols])), 1.0 / math.sqrt(dh))
        if block.attn_bias is not None:
            logits = logits + block.attn_bias[h]
        w = T.softmax_lastdim(logits)
        weights.append(w)
        w = _dropout(w, block.dropout, sampler, dropout_active)
        outs.append(T.matmul(w, V[cols]))
    merged = outs[0] if len(outs) == 1 else T.concat_lastdim(outs)
    out = block.out(merged)
    return (out, weights) if return_weights else out


class ParallelAggregator(Module):
    """Projects each feature token to a scalar, then LWTA (or ReLU) and a linear map back to width d."""

    def __init__(
        self,
        n_features: int,
        d: int,
        width: int,
        rng: np.random.Generator,
        use_lwta: bool = True,
        block_size: int = 2,
    ):
        super().__init__()
        self.n_features, self.d, self.width, self.use_lwta = n_features, d, width, use_lwta
        self.proj_weight = self.param("proj_weight", uniform_init(rng, (n_features, d), d))
        self.proj_bias = self.param("proj_bias", np.zeros(n_features))
        if use_lwta:
            if width % block_size:
                raise ContractError(f"parallel width {width} not divisible by block size {block_size}")
            self.act = self.child("act", LwtaLayer(n_features, width // block_size, block_size, rng))
        else:
            self.act = self.child("act", Linear(n_features, width, rng))
        self.final = self.child("final", Linear(width, d, rng))

    def extra_parameters(self) -> int:
        s, d, w = self.n_features, self.d, self.width
        return s * (d + 1) + s * w + w + w * d + d


def phi_aggregate(H_features: Tensor, agg: ParallelAggregator) -> Tensor:
    """Per-feature dot product with its own projection vector plus bias: (batch, s, d) -> (batch, s)."""
    if H_features.ndim != 3 or H_features.shape[1:] != (agg.n_features, agg.d):
        raise DimensionError(
            f"phi_aggregate: expected (batch, {agg.n_features}, {agg.d}), got {H_features.shape}"
        )
    return T.sum_(H_features * agg.proj_weight, axis=-1) + agg.proj_bias


def parallel_module(
    H_features: Tensor,
    agg: ParallelAggregator,
    temperature: float,
    sampler: GumbelSampler | None,
    kl: KlAccumulator | None,
    stochastic: bool,
) -> Tensor:
    y = phi_aggregate(H_features, agg)
    if agg.use_lwta:
        y = lwta_forward(y, agg.act, temperature, sampler, kl, stochastic)
    else:
        y = T.relu(agg.act(y))
    return agg.final(y)


def add_to_special(H: Tensor, z: Tensor) -> Tensor:
    """Add ``z`` (batch, d) to token slot 0; other rows pass through untouched."""
    b, n, d = H.shape
    flat = T.reshape(H, (b, n * d))
    head = flat[:, :d] + z
    return T.reshape(T.concat_lastdim([head, flat[:, d:]]), (b, n, d))


class HybridLayer(Module):
    def __init__(
        self,
        d: int,
        heads: int,
        n_features: int,
        rng: np.random.Generator,
        d_ff: int | None = None,
        dropout: float = 0.0,
        use_lwta: bool = True,
        block_size: int = 2,
        attn_bias: bool = True,
        parallel_width: int | None = None,
    ):
        """``parallel_width=None`` gives a plain pre-norm encoder layer (no parallel branch)."""
        super().__init__()
        d_ff = 2 * d if d_ff is None else d_ff
        self.d, self.d_ff, self.dropout, self.use_lwta = d, d_ff, dropout, use_lwta
        self.norm1 = self.child("norm1", LayerNorm(d))
        self.attn = self.child(
            "attn", AttentionBlock(d, heads, n_features + 1, rng, use_bias=attn_bias, dropout=dropout)
        )
        self.norm2 = self.child("norm2", LayerNorm(d))
        if use_lwta:
            if d_ff % block_size:
                raise ContractError(f"d_ff {d_ff} not divisible by block size {block_size}")
            self.ffn_in = self.child("ffn_in", LwtaLayer(d, d_ff // block_size, block_size, rng))
        else:
            self.ffn_in = self.child("ffn_in", Linear(d, d_ff, rng))
        self.ffn_out = self.child("ffn_out", Linear(d_ff, d, rng))
        self.parallel = None
        if parallel_width is not None:
            self.parallel = self.child(
                "parallel",
                ParallelAggregator(n_features, d, parallel_width, rng, use_lwta=use_lwta, block_size=block_size),
            )


def hybrid_layer_forward(
    H: Tensor,
    layer: HybridLayer,
    temperature: float,
    sampler: GumbelSampler | None,
    kl: KlAccumulator | None,
    stochastic: bool,
    training: bool,
) -> Tensor:
    """``training`` switches dropout on; ``stochastic`` switches Gumbel noise on."""
    H1 = H + biased_attention(layer.norm1(H), layer.attn, sampler, training)
    Z = layer.norm2(H1)
    if layer.use_lwta:
        hidden = lwta_forward(Z, layer.ffn_in, temperature, sampler, kl, stochastic)
    else:
        hidden = T.relu(layer.ffn_in(Z))
    hidden = _dropout(hidden, layer.dropout, sampler, training)
    H2 = H1 + layer.ffn_out(hidden)
    if layer.parallel is not None:
        z = parallel_module(H[:, 1:, :], layer.parallel, temperature, sampler, kl, stochastic)
        H2 = add_to_special(H2, z)
    return H2
