"""Tabular data: schema, CSV ingestion, splits, preprocessing, synthetic tasks and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .errors import ContractError, IngestionError, SchemaError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TASKS = ("classification", "regression")


@dataclass
class DatasetSchema:
    numeric: list[str]
    categorical: list[str]
    target: str
    task: str
    cardinalities: dict[str, int] = field(default_factory=dict)
    split_column: str | None = None

    def __post_init__(self):
        self.numeric = list(self.numeric)
        self.categorical = list(self.categorical)
        self.validate()

    @property
    def features(self) -> list[str]:
        return self.numeric + self.categorical

    def validate(self) -> None:
        names = self.features
        if not names:
            raise SchemaError("schema needs at least one feature")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate feature names: {', '.join(dupes)}")
        if self.target in names:
            raise SchemaError(f"target {self.target!r} is also listed as a feature")
        if self.task not in TASKS:
            raise SchemaError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.split_column is not None and self.split_column in names + [self.target]:
            raise SchemaError(f"split column {self.split_column!r} collides with a feature or the target")

    def to_dict(self) -> dict:
        cats = [
            {"name": n, "cardinality": self.cardinalities[n]} if n in self.cardinalities else {"name": n}
            for n in self.categorical
        ]
        return {
            "numeric": list(self.numeric),
            "categorical": cats,
            "target": {"name": self.target, "task": self.task},
            "split_column": self.split_column,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSchema":
        if not isinstance(raw, dict):
            raise SchemaError("schema document must be a mapping")
        unknown = sorted(set(raw) - {"numeric", "categorical", "target", "split_column"})
        if unknown:
            raise SchemaError(f"unknown schema key(s): {', '.join(unknown)}")
        cats, cards = [], {}
        for item in raw.get("categorical") or []:
            if isinstance(item, dict):
                cats.append(str(item["name"]))
                if item.get("cardinality") is not None:
                    cards[str(item["name"])] = int(item["cardinality"])
            else:
                cats.append(str(item))
        target = raw.get("target")
        if not isinstance(target, dict) or "name" not in target or "task" not in target:
            raise SchemaError("schema target must be a mapping with 'name' and 'task'")
        return cls(
            numeric=[str(n) for n in raw.get("numeric") or []],
            categorical=cats,
            target=str(target["name"]),
            task=str(target["task"]),
            cardinalities=cards,
            split_column=raw.get("split_column"),
        )


def load_schema(path: str | Path) -> DatasetSchema:
    with open(path, encoding="utf-8") as fh:
        return DatasetSchema.from_dict(yaml.safe_load(fh))


@dataclass
class Dataset:
    schema: DatasetSchema
    numeric: np.ndarray  # (n, s_r) float64
    categorical: np.ndarray  # (n, s_n) raw strings
    target: np.ndarray | None  # float64 (regression) or strings (classification)
    split: np.ndarray  # "train" / "val" / "test"
    rejected_rows: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.numeric.shape[0]

    def subset(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}; expected one of {SPLITS}")
        m = self.split == name
        return Dataset(
            self.schema,
            self.numeric[m],
            self.categorical[m],
            None if self.target is None else self.target[m],
            self.split[m],
        )


def assign_splits(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> np.ndarray:
    """Seeded 70/15/15 train/val/test assignment."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "val"
    split[order[n_train + n_val :]] = "test"
    return split


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def load_csv(
    path: str | Path,
    schema: DatasetSchema,
    require_target: bool = True,
    split_seed: int = 0,
) -> Dataset:
    """Read a headered UTF-8 CSV into a :class:`Dataset`.

    Rows with an unparseable numeric value (or regression target) are
    dropped and listed in ``rejected_rows`` (1-based data row numbers).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        rows = list(reader)
    header = [h.strip() for h in header]
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise SchemaError(f"{path}: duplicate header name(s): {', '.join(dupes)}")
    wanted = schema.features + ([schema.target] if require_target else [])
    missing = [n for n in wanted if n not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}; found: {', '.join(header)}")
    col = {n: i for i, n in enumerate(header)}
    split_col = col.get(schema.split_column) if schema.split_column else None
    has_target = schema.target in col

    numeric, cats, target, splits, rejected = [], [], [], [], []
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        try:
            nums = [_parse_float(row[col[n]]) for n in schema.numeric]
            if has_target and schema.task == "regression":
                y: Any = _parse_float(row[col[schema.target]])
            else:
                y = row[col[schema.target]].strip() if has_target else None
        except ValueError:
            rejected.append(lineno)
            continue
        if split_col is not None:
            s = row[split_col].strip()
            if s not in SPLITS:
                raise IngestionError(f"{path}: row {lineno}: split value {s!r} not in {SPLITS}")
            splits.append(s)
        numeric.append(nums)
        cats.append([row[col[n]].strip() for n in schema.categorical])
        target.append(y)
    if not numeric:
        raise IngestionError(f"{path}: no usable data rows")
    if rejected:
        log.warning("%s: rejected %d row(s) with unparseable numerics: %s", path, len(rejected), rejected)

    n = len(numeric)
    split = np.array(splits, dtype=object) if split_col is not None else assign_splits(n, split_seed)
    if not has_target:
        y_arr = None
    elif schema.task == "regression":
        y_arr = np.array(target, dtype=np.float64)
    else:
        y_arr = np.array(target, dtype=object)
    return Dataset(
        schema,
        np.array(numeric, dtype=np.float64).reshape(n, len(schema.numeric)),
        np.array(cats, dtype=object).reshape(n, len(schema.categorical)),
        y_arr,
        split,
        rejected,
    )


def write_csv(path: str | Path, ds: Dataset, include_target: bool = True, include_split: bool = True) -> None:
    schema = ds.schema
    header = schema.numeric + schema.categorical
    if include_target and ds.target is not None:
        header.append(schema.target)
    if include_split:
        header.append(schema.split_column or "split")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.numeric[i]] + list(ds.categorical[i])
            if include_target and ds.target is not None:
                y = ds.target[i]
                row.append(repr(float(y)) if schema.task == "regression" else y)
            if include_split:
                row.append(ds.split[i])
            w.writerow(row)


def _class_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


@dataclass
class Encoded:
    """Model-ready arrays."""

    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray | None

    def __len__(self) -> int:
        return self.x_num.shape[0]

    def take(self, idx) -> "Encoded":
        return Encoded(self.x_num[idx], self.x_cat[idx], None if self.y is None else self.y[idx])


@dataclass
class Preprocessor:
    task: str
    num_mean: np.ndarray
    num_std: np.ndarray
    constant: np.ndarray
    vocabs: list[dict[str, int]]
    classes: list[str]
    label_mean: float = 0.0
    label_std: float = 1.0
    label_scale: float = 1.0
    scale_numeric: bool = True
    fitted: bool = True

    @property
    def cardinalities(self) -> list[int]:
        return [len(v) for v in self.vocabs]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def transform_numeric(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.scale_numeric:
            return x.copy()
        z = (x - self.num_mean) / self.num_std
        return np.where(self.constant, 0.0, z)

    def transform_categorical(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=object)
        out = np.empty(raw.shape, dtype=np.int64)
        for j, vocab in enumerate(self.vocabs):
            unseen = len(vocab)
            out[:, j] = [vocab.get(v, unseen) for v in raw[:, j]]
        return out

    def transform_labels(self, y) -> np.ndarray:
        if self.task == "classification":
            index = {c: i for i, c in enumerate(self.classes)}
            try:
                return np.array([index[v] for v in np.asarray(y, dtype=object)], dtype=np.int64)
            except KeyError as exc:
                raise ContractError(f"label {exc.args[0]!r} not seen in the training split") from None
        y = np.asarray(y, dtype=np.float64)
        return (y * self.label_scale - self.label_mean) / self.label_std

    def inverse_labels(self, y) -> np.ndarray:
        if self.task == "classification":
            return np.array([self.classes[int(i)] for i in np.asarray(y)], dtype=object)
        y = np.asarray(y, dtype=np.float64)
        return (y * self.label_std + self.label_mean) / self.label_scale

    def apply(self, ds: Dataset) -> Encoded:
        y = None if ds.target is None else self.transform_labels(ds.target)
        return Encoded(self.transform_numeric(ds.numeric), self.transform_categorical(ds.categorical), y)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "num_mean": [float(v) for v in self.num_mean],
            "num_std": [float(v) for v in self.num_std],
            "constant": [bool(v) for v in self.constant],
            "vocabs": [sorted(v, key=v.get) for v in self.vocabs],
            "classes": list(self.classes),
            "label_mean": float(self.label_mean),
            "label_std": float(self.label_std),
            "label_scale": float(self.label_scale),
            "scale_numeric": bool(self.scale_numeric),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Preprocessor":
        return cls(
            task=raw["task"],
            num_mean=np.array(raw["num_mean"], dtype=np.float64),
            num_std=np.array(raw["num_std"], dtype=np.float64),
            constant=np.array(raw["constant"], dtype=bool),
            vocabs=[{v: i for i, v in enumerate(values)} for values in raw["vocabs"]],
            classes=list(raw["classes"]),
            label_mean=raw["label_mean"],
            label_std=raw["label_std"],
            label_scale=raw["label_scale"],
            scale_numeric=raw["scale_numeric"],
        )


def fit_preprocessor(train: Dataset, scale_numeric: bool = True, label_scale: float = 1.0) -> Preprocessor:
    """Fit normalization, vocabularies and label transform on training rows only."""
    if len(train) == 0:
        raise ContractError("cannot fit a preprocessor on an empty training split")
    if np.any(train.split != "train"):
        raise ContractError("preprocessor must be fitted on training rows only; pass ds.subset('train')")
    if label_scale == 0 or not math.isfinite(label_scale):
        raise ContractError(f"label scale must be finite and non-zero, got {label_scale}")
    schema = train.schema
    mean = train.numeric.mean(axis=0)
    std = train.numeric.std(axis=0)
    constant = std == 0.0
    std = np.maximum(std, 1e-8)
    vocabs = []
    for j in range(len(schema.categorical)):
        values = sorted(set(train.categorical[:, j]), key=_class_key)
        vocabs.append({v: i for i, v in enumerate(values)})
    classes: list[str] = []
    label_mean, label_std = 0.0, 1.0
    if schema.task == "classification":
        if train.target is None:
            raise ContractError("classification preprocessor needs training labels")
        classes = sorted(set(train.target), key=_class_key)
    elif train.target is not None:
        scaled = train.target * label_scale
        label_mean = float(scaled.mean())
        label_std = float(scaled.std()) or 1.0
    return Preprocessor(
        schema.task, mean, std, constant, vocabs, classes, label_mean, label_std, float(label_scale), scale_numeric
    )


SYNTHETIC_KINDS = ("linear_separable", "xor_numeric", "noisy_regression")
_HYPERPLANE = (np.array([0.8, -0.6]), 0.1)
_REGRESSION_W = np.array([1.5, -2.0, 0.5, 1.0])


def make_synthetic(kind: str, n_rows: int, seed: int = 0) -> Dataset:
    """Deterministic toy tasks with a seeded 70/15/15 split."""
    if kind not in SYNTHETIC_KINDS:
        raise ContractError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n_rows < 10:
        raise ContractError(f"n_rows must be >= 10, got {n_rows}")
    rng = np.random.default_rng(seed)
    if kind == "linear_separable":
        w, b = _HYPERPLANE
        keep = np.empty((0, 2))
        while keep.shape[0] < n_rows:
            x = rng.uniform(-2.0, 2.0, size=(2 * n_rows, 2))
            margin = x @ w + b
            keep = np.vstack([keep, x[np.abs(margin) >= 0.1]])
        x = keep[:n_rows]
        y = np.where(x @ w + b > 0, "1", "0").astype(object)
    elif kind == "xor_numeric":
        x = rng.uniform(-1.0, 1.0, size=(n_rows, 2))
        y = np.where((x[:, 0] > 0) ^ (x[:, 1] > 0), "1", "0").astype(object)
    else:
        x = rng.standard_normal((n_rows, 4))
        y = x @ _REGRESSION_W + 0.01 * rng.standard_normal(n_rows)
    task = "regression" if kind == "noisy_regression" else "classification"
    names = [f"x{i}" for i in range(x.shape[1])]
    schema = DatasetSchema(numeric=names, categorical=[], target="y", task=task)
    return Dataset(schema, x, np.empty((n_rows, 0), dtype=object), y, assign_splits(n_rows, seed))


def least_squares_baseline(x_train: np.ndarray, y_train: np.ndarray, x_eval: np.ndarray, task: str) -> np.ndarray:
    """Linear model fitted by least squares (one-vs-rest indicators for classification)."""
    add1 = lambda x: np.hstack([x, np.ones((x.shape[0], 1))])  # noqa: E731
    A, E = add1(np.asarray(x_train, float)), add1(np.asarray(x_eval, float))
    if task == "regression":
        coef, *_ = np.linalg.lstsq(A, y_train, rcond=None)
        return E @ coef
    y_train = np.asarray(y_train, dtype=np.int64)
    targets = np.eye(int(y_train.max()) + 1)[y_train]
    coef, *_ = np.linalg.lstsq(A, targets, rcond=None)
    return (E @ coef).argmax(axis=1)


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    count: int
    per_seed: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"task": self.task, "metric": self.metric, "value": self.value, "count": self.count}
        if self.per_seed:
            out["per_seed"] = list(self.per_seed)
        return out


def evaluate(predictions, targets, task: str, prep: Preprocessor | None = None) -> EvalReport:
    """Accuracy for classification, MSE for regression.

    With ``prep`` given, regression predictions and targets are taken to be
    standardized and are mapped back to original label units first.
    """
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.shape[0] != targets.shape[0]:
        raise ContractError(f"evaluate: {predictions.shape[0]} predictions for {targets.shape[0]} targets")
    n = int(targets.shape[0])
    if task == "classification":
        value = float(np.mean(predictions == targets)) if n else 0.0
        return EvalReport(task, "accuracy", value, n)
    p, t = predictions.astype(np.float64), targets.astype(np.float64)
    if prep is not None:
        p, t = prep.inverse_labels(p), prep.inverse_labels(t)
    value = float(np.mean((p - t) ** 2)) if n else 0.0
    return EvalReport(task, "mse", value, n)


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    first = reports[0]
    values = [r.value for r in reports]
    return EvalReport(first.task, first.metric, float(np.mean(values)), first.count, values)
