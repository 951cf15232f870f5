import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from stab.data import (
    DatasetSchema,
    EvalReport,
    Preprocessor,
    aggregate_reports,
    assign_splits,
    evaluate,
    fit_preprocessor,
    least_squares_baseline,
    load_csv,
    load_schema,
    make_synthetic,
    write_csv,
)
from stab.errors import ContractError, IngestionError, SchemaError

SCHEMA = DatasetSchema(numeric=["a"], categorical=["c"], target="y", task="classification")


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestSchema:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(numeric=[], categorical=[]),
            dict(numeric=["a", "a"], categorical=[]),
            dict(numeric=["a", "y"], categorical=[]),
            dict(numeric=["a"], categorical=[], task="ranking"),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(SchemaError):
            DatasetSchema(target="y", **{"task": "regression", **kw})

    def test_yaml_roundtrip(self, tmp_path):
        schema = DatasetSchema(
            numeric=["a", "b"], categorical=["c"], target="y", task="regression", cardinalities={"c": 4}, split_column="s"
        )
        p = tmp_path / "schema.yaml"
        p.write_text(yaml.safe_dump(schema.to_dict()))
        loaded = load_schema(p)
        assert loaded.to_dict() == schema.to_dict()
        assert loaded.features == ["a", "b", "c"]

    def test_plain_categorical_names(self):
        raw = {"numeric": ["a"], "categorical": ["c", "d"], "target": {"name": "y", "task": "classification"}}
        assert DatasetSchema.from_dict(raw).categorical == ["c", "d"]


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,c,y\n1,x,0\n2,y,1\n3,x,0\n"), SCHEMA)
        assert len(ds) == 3
        assert ds.numeric.shape[1] + ds.categorical.shape[1] == 2
        np.testing.assert_array_equal(ds.numeric[:, 0], [1, 2, 3])
        assert list(ds.categorical[:, 0]) == ["x", "y", "x"]

    def test_scientific_notation(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,c,y\n1e3,x,0\n"), SCHEMA)
        assert ds.numeric[0, 0] == 1000.0

    def test_duplicate_header(self, tmp_path):
        with pytest.raises(SchemaError, match="duplicate"):
            load_csv(write(tmp_path, "a,a,c,y\n1,2,x,0\n"), SCHEMA)

    def test_missing_columns_listed(self, tmp_path):
        with pytest.raises(SchemaError, match="missing column.*c, y"):
            load_csv(write(tmp_path, "a,b\n1,2\n"), SCHEMA)

    def test_empty_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, ""), SCHEMA)

    def test_unparseable_rows_rejected(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,c,y\n1,x,0\nabc,x,1\n,y,0\n4,y,1\n"), SCHEMA)
        assert len(ds) == 2 and ds.rejected_rows == [2, 3]

    def test_non_finite_rejected(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,c,y\nnan,x,0\ninf,x,1\n2,y,0\n"), SCHEMA)
        assert ds.rejected_rows == [1, 2]

    def test_quoted_fields(self, tmp_path):
        ds = load_csv(write(tmp_path, 'a,c,y\n1,"x, with comma",0\n2,"say ""hi""",1\n'), SCHEMA)
        assert list(ds.categorical[:, 0]) == ["x, with comma", 'say "hi"']

    def test_split_column(self, tmp_path):
        schema = DatasetSchema(numeric=["a"], categorical=[], target="y", task="regression", split_column="s")
        ds = load_csv(write(tmp_path, "a,y,s\n1,2,train\n3,4,test\n5,6,val\n"), schema)
        assert list(ds.split) == ["train", "test", "val"]
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, "a,y,s\n1,2,dev\n", "bad.csv"), schema)

    def test_target_optional_for_prediction(self, tmp_path):
        ds = load_csv(write(tmp_path, "c,a\nx,1\n"), SCHEMA, require_target=False)
        assert ds.target is None and ds.numeric[0, 0] == 1.0

    def test_write_then_load_roundtrip(self, tmp_path):
        ds = make_synthetic("noisy_regression", 30, 2)
        ds.schema.split_column = "split"
        write_csv(tmp_path / "r.csv", ds)
        back = load_csv(tmp_path / "r.csv", ds.schema)
        assert np.array_equal(back.numeric, ds.numeric)
        assert np.array_equal(back.target, ds.target)
        assert list(back.split) == list(ds.split)


class TestSplits:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 2**31))
    def test_disjoint_exhaustive_deterministic(self, n, seed):
        s = assign_splits(n, seed)
        assert len(s) == n and set(s) <= {"train", "val", "test"}
        assert np.array_equal(s, assign_splits(n, seed))

    def test_proportions(self):
        s = assign_splits(1000, 0)
        assert [int(np.sum(s == k)) for k in ("train", "val", "test")] == [700, 150, 150]


def frame(numeric, categorical=None, target=None, task="regression"):
    from stab.data import Dataset

    numeric = np.asarray(numeric, dtype=np.float64)
    n = numeric.shape[0]
    cat = np.asarray(categorical if categorical is not None else np.empty((n, 0)), dtype=object).reshape(n, -1)
    schema = DatasetSchema(
        numeric=[f"n{i}" for i in range(numeric.shape[1])],
        categorical=[f"c{i}" for i in range(cat.shape[1])],
        target="y",
        task=task,
    )
    y = np.zeros(n) if target is None else np.asarray(target, dtype=np.float64 if task == "regression" else object)
    return Dataset(schema, numeric, cat, y, np.array(["train"] * n, dtype=object))


class TestPreprocessor:
    def test_hand_z_score(self):
        prep = fit_preprocessor(frame([[0.0], [2.0]]))
        np.testing.assert_array_equal(prep.transform_numeric([[0.0], [2.0]]), [[-1.0], [1.0]])

    def test_constant_column_maps_to_zero(self):
        prep = fit_preprocessor(frame([[3.0, 1.0], [3.0, 2.0]]))
        out = prep.transform_numeric([[3.0, 1.0], [7.0, 2.0]])
        np.testing.assert_array_equal(out[:, 0], [0.0, 0.0])

    def test_train_split_standardized(self, rng):
        ds = frame(rng.normal(5, 3, size=(200, 4)))
        out = fit_preprocessor(ds).apply(ds).x_num
        assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-6)

    def test_scaling_can_be_disabled(self, rng):
        x = rng.normal(5, 3, size=(10, 2))
        prep = fit_preprocessor(frame(x), scale_numeric=False)
        np.testing.assert_array_equal(prep.transform_numeric(x), x)

    @pytest.mark.parametrize("scale", [1e-4, 1.0, 1e2])
    def test_label_roundtrip(self, rng, scale):
        y = rng.normal(2e5, 5e4, size=50)
        prep = fit_preprocessor(frame(np.ones((50, 1)), target=y), label_scale=scale)
        np.testing.assert_allclose(prep.inverse_labels(prep.transform_labels(y)), y, rtol=1e-9)
        z = prep.transform_labels(y)
        assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9

    def test_vocab_dense_with_unseen_index(self):
        ds = frame(np.zeros((4, 1)), [["b"], ["a"], ["b"], ["c"]])
        prep = fit_preprocessor(ds)
        assert sorted(prep.vocabs[0].values()) == [0, 1, 2]
        assert prep.cardinalities == [3]
        np.testing.assert_array_equal(prep.transform_categorical(np.array([["a"], ["zzz"]], dtype=object))[:, 0], [0, 3])

    def test_rejects_non_train_rows(self):
        ds = frame(np.zeros((3, 1)))
        ds.split[1] = "val"
        with pytest.raises(ContractError):
            fit_preprocessor(ds)

    def test_unseen_class_label(self):
        prep = fit_preprocessor(frame(np.zeros((2, 1)), target=["0", "1"], task="classification"))
        with pytest.raises(ContractError):
            prep.transform_labels(["2"])

    def test_class_order_is_numeric_aware(self):
        prep = fit_preprocessor(frame(np.zeros((3, 1)), target=["10", "2", "1"], task="classification"))
        assert prep.classes == ["1", "2", "10"]

    def test_dict_roundtrip(self, rng):
        ds = frame(rng.standard_normal((20, 2)), [["x"], ["y"]] * 10, rng.standard_normal(20))
        prep = fit_preprocessor(ds, label_scale=1e-2)
        back = Preprocessor.from_dict(prep.to_dict())
        assert back.to_dict() == prep.to_dict()
        enc_a, enc_b = prep.apply(ds), back.apply(ds)
        assert np.array_equal(enc_a.x_num, enc_b.x_num) and np.array_equal(enc_a.y, enc_b.y)


class TestSynthetic:
    def test_deterministic(self):
        a, b = make_synthetic("xor_numeric", 100, 3), make_synthetic("xor_numeric", 100, 3)
        assert np.array_equal(a.numeric, b.numeric) and list(a.target) == list(b.target)

    def test_linear_separable_margin(self):
        ds = make_synthetic("linear_separable", 2000, 0)
        margin = ds.numeric @ np.array([0.8, -0.6]) + 0.1
        assert np.all(np.abs(margin) >= 0.1)
        assert np.array_equal(ds.target == "1", margin > 0)

    def test_linear_baseline_separates_linear_task(self):
        ds = make_synthetic("linear_separable", 2000, 0)
        y = (ds.target == "1").astype(int)
        tr, te = ds.split == "train", ds.split == "test"
        pred = least_squares_baseline(ds.numeric[tr], y[tr], ds.numeric[te], "classification")
        assert np.mean(pred == y[te]) > 0.95

    def test_xor_defeats_linear_baseline(self):
        ds = make_synthetic("xor_numeric", 2000, 0)
        y = (ds.target == "1").astype(int)
        tr, te = ds.split == "train", ds.split == "test"
        pred = least_squares_baseline(ds.numeric[tr], y[tr], ds.numeric[te], "classification")
        assert np.mean(pred == y[te]) <= 0.6

    def test_regression_least_squares_reaches_noise_floor(self):
        ds = make_synthetic("noisy_regression", 2000, 0)
        tr, te = ds.split == "train", ds.split == "test"
        pred = least_squares_baseline(ds.numeric[tr], ds.target[tr], ds.numeric[te], "regression")
        assert np.mean((pred - ds.target[te]) ** 2) == pytest.approx(1e-4, rel=0.3)

    def test_invalid(self):
        with pytest.raises(ContractError):
            make_synthetic("spiral", 100)
        with pytest.raises(ContractError):
            make_synthetic("xor_numeric", 5)


class TestEvaluate:
    def test_all_correct(self):
        assert evaluate([0, 1, 1], [0, 1, 1], "classification").value == 1.0

    def test_mse(self):
        r = evaluate([0.0, 0.0], [1.0, -1.0], "regression")
        assert (r.metric, r.value, r.count) == ("mse", 1.0, 2)

    def test_standardized_path_equals_direct(self, rng):
        y = rng.normal(100, 20, 40)
        prep = fit_preprocessor(frame(np.ones((40, 1)), target=y), label_scale=1e-2)
        pred = y + rng.normal(0, 3, 40)
        direct = evaluate(pred, y, "regression").value
        via = evaluate(prep.transform_labels(pred), prep.transform_labels(y), "regression", prep).value
        assert via == pytest.approx(direct, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            evaluate([1, 2], [1], "classification")

    def test_aggregate(self):
        r = aggregate_reports([EvalReport("classification", "accuracy", v, 10) for v in (0.5, 0.7)])
        assert r.value == pytest.approx(0.6) and r.per_seed == [0.5, 0.7]
