"""STab model: feature tokenizer, stack of hybrid layers, task head, Bayesian-averaged prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import HybridLayer, hybrid_layer_forward
from .errors import ConfigError, ContractError, SchemaError
from .nn import LayerNorm, Linear, Module, uniform_init
from .stochastic import EmbeddingMixture, GumbelSampler, KlAccumulator, mixture_embed
from .tensor import Tensor

MODES = ("train", "infer", "test")


@dataclass
class ModelConfig:
    d: int = 32
    depth: int = 2
    heads: int = 8
    dropout: float = 0.1
    U: int = 2
    J: int = 16
    T_train: float = 0.69
    T_infer: float = 0.01
    N_train: int = 1
    N_infer: int = 64
    task: str = "classification"
    n_classes: int = 2
    # variant switches
    stochastic: bool = True
    parallel: bool = True
    attn_bias: bool = True
    mc_dropout: bool = True
    # None means 2 * d
    d_ff: int | None = None
    parallel_width: int | None = None
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        problems = []
        if self.d < 1 or self.depth < 0 or self.heads < 1:
            problems.append("d, heads must be >= 1 and depth >= 0")
        elif self.d % self.heads:
            problems.append(f"d={self.d} not divisible by heads={self.heads}")
        if self.U < 2:
            problems.append(f"U must be >= 2, got {self.U}")
        if self.J < 1:
            problems.append(f"J must be >= 1, got {self.J}")
        if self.T_train <= 0 or self.T_infer <= 0:
            problems.append("temperatures must be positive")
        if self.N_train < 1 or self.N_infer < 1:
            problems.append("sample counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.task not in ("classification", "regression"):
            problems.append(f"task must be classification or regression, got {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            problems.append(f"classification needs n_classes >= 2, got {self.n_classes}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def ffn_width(self) -> int:
        return 2 * self.d if self.d_ff is None else self.d_ff

    @property
    def aggregator_width(self) -> int:
        return 2 * self.d if self.parallel_width is None else self.parallel_width

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task == "classification" else 1


# Table-3 ablation variants. J=1 turns the mixture into a plain linear embedding.
VARIANTS: dict[str, dict] = {
    "vanilla": dict(stochastic=False, parallel=False, attn_bias=False, J=1, mc_dropout=False),
    "stochastic": dict(stochastic=True, parallel=False, attn_bias=False, mc_dropout=True),
    "hybrid": dict(stochastic=False, parallel=True, attn_bias=True, J=1, mc_dropout=False),
    "full": dict(stochastic=True, parallel=True, attn_bias=True, mc_dropout=True),
}


def variant_config(variant: str, base: ModelConfig) -> ModelConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; allowed: {', '.join(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


class FeatureTokenizer(Module):
    def __init__(self, n_numeric: int, cardinalities: Sequence[int], d: int, J: int, rng: np.random.Generator):
        super().__init__()
        self.n_numeric = n_numeric
        self.cardinalities = [int(c) for c in cardinalities]
        self.d = d
        self.special = self.param("special", uniform_init(rng, (d,), d))
        self.numeric = [
            self.child(f"num{i}", EmbeddingMixture(J, d, rng)) for i in range(n_numeric)
        ]
        # one extra row per table for values unseen at fit time
        self.tables = [
            self.param(f"cat{i}", uniform_init(rng, (card + 1, d), d))
            for i, card in enumerate(self.cardinalities)
        ]

    @property
    def n_features(self) -> int:
        return self.n_numeric + len(self.cardinalities)


def _as_batch(x_num, x_cat, n_numeric: int, n_cat: int) -> tuple[np.ndarray, np.ndarray]:
    x_num = np.asarray(x_num if x_num is not None else np.zeros((0, 0)), dtype=np.float64)
    x_cat = np.asarray(x_cat if x_cat is not None else np.zeros((0, 0)), dtype=np.int64)
    if x_num.ndim == 1:
        x_num = x_num[None, :]
    if x_cat.ndim == 1:
        x_cat = x_cat[None, :]
    rows = max(x_num.shape[0], x_cat.shape[0])
    if n_numeric == 0:
        x_num = np.zeros((rows, 0))
    if n_cat == 0:
        x_cat = np.zeros((rows, 0), dtype=np.int64)
    if x_num.shape != (rows, n_numeric) or x_cat.shape != (rows, n_cat):
        raise SchemaError(
            f"expected {n_numeric} numeric and {n_cat} categorical columns, "
            f"got arrays of shape {x_num.shape} and {x_cat.shape}"
        )
    return x_num, x_cat


def tokenize(
    x_num,
    x_cat,
    tok: FeatureTokenizer,
    temperature: float,
    sampler: GumbelSampler | None,
    kl: KlAccumulator | None,
    stochastic: bool,
) -> Tensor:
    """Rows of (numeric values, category indices) -> token tensor (batch, s + 1, d); slot 0 is special."""
    x_num, x_cat = _as_batch(x_num, x_cat, tok.n_numeric, len(tok.cardinalities))
    b, d = x_num.shape[0], tok.d
    tokens = [T.matmul(Tensor(np.ones((b, 1))), T.reshape(tok.special, (1, d)))]
    for i, mix in enumerate(tok.numeric):
        tokens.append(mixture_embed(Tensor(x_num[:, i : i + 1]), mix, temperature, sampler, kl, stochastic))
    for i, (card, table) in enumerate(zip(tok.cardinalities, tok.tables)):
        idx = x_cat[:, i]
        idx = np.where((idx < 0) | (idx >= card), card, idx)
        onehot = np.zeros((b, card + 1))
        onehot[np.arange(b), idx] = 1.0
        tokens.append(T.matmul(Tensor(onehot), table))
    return T.reshape(T.concat_lastdim(tokens), (b, len(tokens), d))


class StabModel(Module):
    def __init__(self, config: ModelConfig, n_numeric: int, cardinalities: Sequence[int] = ()):
        super().__init__()
        self.config = config.validate()
        if n_numeric + len(cardinalities) < 1:
            raise SchemaError("model needs at least one feature")
        rng = np.random.default_rng(config.init_seed)
        c = config
        self.tokenizer = self.child("tokenizer", FeatureTokenizer(n_numeric, cardinalities, c.d, c.J, rng))
        s = self.tokenizer.n_features
        self.layers = [
            self.child(
                f"layers.{i}",
                HybridLayer(
                    c.d,
                    c.heads,
                    s,
                    rng,
                    d_ff=c.ffn_width,
                    dropout=c.dropout,
                    use_lwta=c.stochastic,
                    block_size=c.U,
                    attn_bias=c.attn_bias,
                    parallel_width=c.aggregator_width if c.parallel else None,
                ),
            )
            for i in range(c.depth)
        ]
        self.final_norm = self.child("final_norm", LayerNorm(c.d))
        self.head = self.child("head", Linear(c.d, c.n_outputs, rng))

    @property
    def n_numeric(self) -> int:
        return self.tokenizer.n_numeric

    @property
    def cardinalities(self) -> list[int]:
        return self.tokenizer.cardinalities

    def has_random_path(self, mode: str) -> bool:
        c = self.config
        if mode == "test":
            return False
        dropout = c.dropout > 0 and (mode == "train" or c.mc_dropout)
        return dropout or c.stochastic

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"parameter {name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def forward(
    model: StabModel,
    x_num,
    x_cat,
    mode: str = "train",
    sampler: GumbelSampler | None = None,
) -> tuple[Tensor, Tensor]:
    """One stochastic pass. Returns (logits or scalar predictions, total KL).

    ``train`` uses the training temperature with dropout; ``infer`` uses the
    inference temperature and keeps dropout only when ``mc_dropout`` is set;
    ``test`` zeroes the Gumbel noise and disables dropout.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    c = model.config
    temperature = c.T_train if mode == "train" else c.T_infer
    stochastic = c.stochastic and mode != "test"
    training = mode == "train" or (mode == "infer" and c.mc_dropout)
    if model.has_random_path(mode) and sampler is None:
        raise ContractError(f"mode {mode!r} samples noise; a GumbelSampler is required")
    kl = KlAccumulator()
    H = tokenize(x_num, x_cat, model.tokenizer, temperature, sampler, kl, stochastic)
    for layer in model.layers:
        H = hybrid_layer_forward(H, layer, temperature, sampler, kl, stochastic, training)
    out = model.head(model.final_norm(H[:, 0, :]))
    if c.task == "regression":
        out = T.reshape(out, (out.shape[0],))
    return out, kl.total()


def predict_bayesian(
    model: StabModel,
    x_num,
    x_cat,
    N: int | None = None,
    base_seed: int = 0,
    chunk_rows: int = 4096,
) -> np.ndarray:
    """Average of N inference passes on streams ``(base_seed, 1..N)``.

    Classification returns mean class probabilities (batch, classes);
    regression returns mean predictions (batch,).  Each stream is consumed
    chunk by chunk, so ``chunk_rows`` is part of the reproducibility key.
    """
    N = model.config.N_infer if N is None else int(N)
    if N < 1:
        raise ContractError(f"N must be >= 1, got {N}")
    x_num, x_cat = _as_batch(x_num, x_cat, model.n_numeric, len(model.cardinalities))
    rows = x_num.shape[0]
    classify = model.config.task == "classification"
    passes = N if model.has_random_path("infer") else 1
    total = None
    with T.no_grad():
        for i in range(1, passes + 1):
            sampler = GumbelSampler(base_seed, i)
            parts = []
            for start in range(0, rows, chunk_rows):
                sl = slice(start, start + chunk_rows)
                out, _ = forward(model, x_num[sl], x_cat[sl], "infer", sampler)
                parts.append(T._softmax(out.data) if classify else out.data)
            res = np.concatenate(parts, axis=0)
            total = res if total is None else total + res
    return total / passes


def predict_labels(model: StabModel, x_num, x_cat, N: int | None = None, base_seed: int = 0) -> np.ndarray:
    avg = predict_bayesian(model, x_num, x_cat, N, base_seed)
    return avg.argmax(axis=-1) if model.config.task == "classification" else avg


def count_parameters(model: StabModel) -> dict[str, float]:
    """Trainable scalar counts per component plus the hybrid-branch overhead fraction."""
    size = lambda m: m.num_parameters()  # noqa: E731
    counts = {
        "tokenizer": size(model.tokenizer),
        "attention": sum(size(l.attn) + size(l.norm1) for l in model.layers),
        "ffn": sum(size(l.ffn_in) + size(l.ffn_out) + size(l.norm2) for l in model.layers),
        "parallel": sum(size(l.parallel) for l in model.layers if l.parallel is not None),
        "head": size(model.head) + size(model.final_norm),
    }
    counts["total"] = model.num_parameters()
    base = counts["total"] - counts["parallel"]
    counts["hybrid_overhead"] = counts["parallel"] / base if base else 0.0
    return counts


def config_from_dict(raw: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown model config key(s): {', '.join('model.' + k for k in unknown)}")
    return ModelConfig(**raw)


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)
