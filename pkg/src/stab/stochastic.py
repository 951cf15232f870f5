"""Stochastic competition: Gumbel noise, LWTA blocks, mixture embeddings, KL to a uniform prior."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Module, uniform_init
from .tensor import Tensor

Z_CLAMP = 1e-12


class GumbelSampler:
    """Seeded random stream; all model randomness (Gumbel noise, dropout masks) is drawn here.

    ``(seed, stream_id)`` pairs map to independent streams through numpy's
    ``SeedSequence`` spawn keys.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)))

    def uniform(self, shape) -> np.ndarray:
        return self.rng.random(shape)

    def gumbel(self, shape) -> np.ndarray:
        return gumbel_from_uniform(self.uniform(shape))

    def dropout_mask(self, shape, p: float) -> np.ndarray:
        keep = self.rng.random(shape) >= p
        return keep / (1.0 - p)


def gumbel_from_uniform(z) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), Z_CLAMP, 1.0 - Z_CLAMP)
    return -np.log(-np.log(z))


def gumbel_noise(shape, sampler: GumbelSampler) -> Tensor:
    shape = tuple(shape)
    if not shape:
        raise ContractError("gumbel_noise: shape must be non-empty")
    return Tensor(sampler.gumbel(shape))


def kl_to_uniform(q) -> float:
    """KL(q || uniform) for one probability vector, with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ContractError(f"kl_to_uniform: expected a 1-d probability vector, got shape {q.shape}")
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ContractError(f"kl_to_uniform: not a probability vector (sum={q.sum()!r})")
    nz = q > 0
    kl = float(np.sum(q[nz] * (np.log(q[nz]) + math.log(q.size))))
    return max(kl, 0.0)


def kl_uniform_logits(logits: Tensor) -> Tensor:
    """Differentiable sum over all groups of KL(softmax(logits) || uniform), groups on the last axis."""
    q = T.softmax_lastdim(logits)
    logq = T.log_softmax_lastdim(logits)
    return T.sum_(q * (logq + math.log(logits.shape[-1])))


class KlAccumulator:
    """Collects the KL terms of one forward pass."""

    def __init__(self):
        self.terms: list[Tensor] = []
        self.term_count = 0

    def add(self, term: Tensor, count: int) -> None:
        self.terms.append(term)
        self.term_count += int(count)

    def reset(self) -> None:
        self.terms = []
        self.term_count = 0

    def total(self) -> Tensor:
        if not self.terms:
            return Tensor(0.0)
        out = self.terms[0]
        for t in self.terms[1:]:
            out = out + t
        return out

    @property
    def value(self) -> float:
        return float(sum(t.item() for t in self.terms))


class LwtaLayer(Module):
    """Linear layer whose K*U outputs compete in K blocks of U units."""

    def __init__(self, in_dim: int, blocks: int, block_size: int, rng: np.random.Generator):
        super().__init__()
        if block_size < 2:
            raise ContractError(f"LWTA block size must be >= 2, got {block_size}")
        self.in_dim, self.blocks, self.block_size = in_dim, blocks, block_size
        self.out_dim = blocks * block_size
        self.weight = self.param("weight", uniform_init(rng, (in_dim, self.out_dim), in_dim))
        self.bias = self.param("bias", uniform_init(rng, (self.out_dim,), in_dim))

    def __call__(self, x, temperature, sampler=None, kl=None, stochastic=True):
        return lwta_forward(x, self, temperature, sampler, kl, stochastic)


def lwta_forward(
    x: Tensor,
    layer: LwtaLayer,
    temperature: float,
    sampler: GumbelSampler | None,
    kl: KlAccumulator | None,
    stochastic: bool,
) -> Tensor:
    """Relaxed winner-takes-all: each block's linear response masked by its Gumbel-softmax sample.

    With ``stochastic`` off the noise is zero, leaving a deterministic
    tempered softmax mask.
    """
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"lwta_forward: input width {x.shape[-1]} != {layer.in_dim}")
    if temperature <= 0:
        raise ContractError(f"lwta_forward: temperature must be positive, got {temperature}")
    lead = x.shape[:-1]
    eta = T.matmul(x, layer.weight) + layer.bias
    eta = T.reshape(eta, lead + (layer.blocks, layer.block_size))
    logits = eta + gumbel_noise(eta.shape, sampler) if stochastic else eta
    xi = T.softmax_lastdim(T.scalar_mul(logits, 1.0 / temperature))
    if kl is not None:
        kl.add(kl_uniform_logits(eta), int(np.prod(lead, dtype=np.int64)) * layer.blocks)
    return T.reshape(xi * eta, lead + (layer.out_dim,))


class EmbeddingMixture(Module):
    """J alternative linear embeddings of one scalar feature, chosen by a value-driven softmax."""

    def __init__(self, components: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if components < 1:
            raise ContractError(f"mixture needs >= 1 component, got {components}")
        self.components, self.dim = components, dim
        self.weight = self.param("weight", uniform_init(rng, (components, dim), dim))
        self.bias = self.param("bias", uniform_init(rng, (components, dim), dim))
        if components > 1:
            self.sel_weight = self.param("sel_weight", rng.standard_normal(components))
            self.sel_bias = self.param("sel_bias", rng.standard_normal(components))

    def __call__(self, x, temperature, sampler=None, kl=None, stochastic=True):
        return mixture_embed(x, self, temperature, sampler, kl, stochastic)

    def selection_probs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        if self.components == 1:
            return np.ones((x.shape[0], 1))
        return T._softmax(x * self.sel_weight.data + self.sel_bias.data)


def mixture_embed(
    x: Tensor,
    layer: EmbeddingMixture,
    temperature: float,
    sampler: GumbelSampler | None,
    kl: KlAccumulator | None,
    stochastic: bool,
) -> Tensor:
    """Embed a column of scalars ``x`` (shape (B,) or (B, 1)) into (B, d)."""
    x = T.as_tensor(x)
    if x.ndim == 1:
        x = T.reshape(x, (x.shape[0], 1))
    if x.ndim != 2 or x.shape[1] != 1:
        raise DimensionError(f"mixture_embed: expected a column of scalars, got shape {x.shape}")
    d = layer.dim
    if layer.components == 1:
        return T.matmul(x, layer.weight) + T.reshape(layer.bias, (d,))
    if temperature <= 0:
        raise ContractError(f"mixture_embed: temperature must be positive, got {temperature}")
    J = layer.components
    t = T.matmul(x, T.reshape(layer.sel_weight, (1, J))) + layer.sel_bias
    logits = t + gumbel_noise(t.shape, sampler) if stochastic else t
    s = T.softmax_lastdim(T.scalar_mul(logits, 1.0 / temperature))
    if kl is not None:
        kl.add(kl_uniform_logits(t), x.shape[0])
    scaled = s * T.matmul(x, Tensor(np.ones((1, J))))
    return T.matmul(scaled, layer.weight) + T.matmul(s, layer.bias)
