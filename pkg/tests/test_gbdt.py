import numpy as np
import pytest

from raceimpute.core import RaceClass, RaceDistribution, TractRecord
from raceimpute.errors import DegenerateLabels, InvariantError, ModelFormatError
from raceimpute.gbdt import (
    FEATURE_NAMES,
    GbdtConfig,
    GbdtModel,
    TreeNode,
    build_filter_features,
    feature_importance,
    fit,
    fit_with_grid_search,
    load_gbdt,
    predict,
    predict_proba,
    save_gbdt,
)

W, B, H = RaceClass.WHITE, RaceClass.BLACK, RaceClass.HISPANIC


def four_row_fixture():
    # feature 0 splits {0,1} from {2,3}; all other features constant
    X = np.full((4, 11), 0.5)
    X[:, 0] = [0.1, 0.1, 0.9, 0.9]
    y = [W, W, B, H]
    return X, y


def separable_fixture(n=80):
    rng = np.random.default_rng(0)
    X = np.full((n, 11), 0.3)
    labels = []
    for i in range(n):
        if i % 2 == 0:
            X[i, 0] = rng.uniform(0.6, 1.0)
            labels.append(W)
        else:
            X[i, 0] = rng.uniform(0.0, 0.4)
            labels.append(B)
    return X, labels


class TestHandFixture:
    """One round, depth 1, lambda=1: leaf weights are -G/(H+lambda) with
    g = p - y and h = p(1-p) at the uniform softmax start (p = 0.2)."""

    def fit_fixture(self):
        X, y = four_row_fixture()
        config = GbdtConfig(num_rounds=1, learning_rate=0.3, max_depth=1, min_child_weight=0.0, l2_lambda=1.0)
        return fit(X, y, config)

    def test_leaf_weights_match_hand_computation(self):
        model = self.fit_fixture()
        trees = model.rounds[0]
        # class White: rows 0,1 are positives. GL = 2*(0.2-1) = -1.6,
        # HL = 2*0.16 = 0.32; GR = 2*0.2 = 0.4, HR = 0.32
        t0 = trees[0]
        assert t0.feature == 0
        assert t0.threshold == pytest.approx(0.5, abs=1e-12)
        assert t0.left.leaf_value == pytest.approx(1.6 / 1.32, abs=1e-10)
        assert t0.right.leaf_value == pytest.approx(-0.4 / 1.32, abs=1e-10)
        # class Black: row 2 positive. GL = 0.4, GR = 0.2 - 0.8 = -0.6
        t1 = trees[1]
        assert t1.left.leaf_value == pytest.approx(-0.4 / 1.32, abs=1e-10)
        assert t1.right.leaf_value == pytest.approx(0.6 / 1.32, abs=1e-10)
        # Hispanic symmetric to Black
        t2 = trees[2]
        assert t2.left.leaf_value == pytest.approx(-0.4 / 1.32, abs=1e-10)
        assert t2.right.leaf_value == pytest.approx(0.6 / 1.32, abs=1e-10)
        # Asian/Other have no positives: splitting cannot beat the root term,
        # so the tree is a single leaf -G/(H+lambda) = -0.8/1.64
        for t in (trees[3], trees[4]):
            assert t.is_leaf()
            assert t.leaf_value == pytest.approx(-0.8 / 1.64, abs=1e-10)

    def test_margins_accumulate_with_learning_rate(self):
        model = self.fit_fixture()
        X, _ = four_row_fixture()
        dist = predict(model, X[0])
        # hand margin for row 0: lr * leaf per class
        margins = 0.3 * np.array(
            [1.6 / 1.32, -0.4 / 1.32, -0.4 / 1.32, -0.8 / 1.64, -0.8 / 1.64]
        )
        expected = np.exp(margins - margins.max())
        expected /= expected.sum()
        assert np.allclose(dist.as_array(), expected, atol=1e-12)


class TestFit:
    def test_separable_two_rounds_depth_one_perfect(self):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=2, learning_rate=0.5, max_depth=1))
        preds = predict_proba(model, X).argmax(axis=1)
        assert (preds == np.array([int(v) for v in y])).all()

    def test_training_ce_non_increasing_with_full_sample(self):
        rng = np.random.default_rng(3)
        X = rng.random((200, 11))
        y = [RaceClass(int(v)) for v in rng.integers(0, 5, size=200)]
        model = fit(X, y, GbdtConfig(num_rounds=60, learning_rate=0.2, max_depth=3, subsample=1.0))
        ce = np.array(model.train_ce)
        assert (np.diff(ce) <= 1e-12).all()

    def test_deterministic_model_files(self, tmp_path):
        rng = np.random.default_rng(5)
        X = rng.random((100, 11))
        y = [RaceClass(int(v)) for v in rng.integers(0, 5, size=100)]
        cfg = GbdtConfig(num_rounds=10, learning_rate=0.3, max_depth=3, subsample=0.8, seed=7)
        fit(X, y, cfg)  # warm-up has no effect on determinism
        save_gbdt(fit(X, y, cfg), tmp_path / "a.json")
        save_gbdt(fit(X, y, cfg), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_single_class_rejected(self):
        X = np.random.default_rng(0).random((10, 11))
        with pytest.raises(DegenerateLabels):
            fit(X, [W] * 10, GbdtConfig(num_rounds=1))

    def test_learning_rate_zero_limit_approaches_base_softmax(self):
        X, y = separable_fixture(40)
        model = fit(X, y, GbdtConfig(num_rounds=1, learning_rate=1e-6, max_depth=2, min_child_weight=0.0))
        probs = predict_proba(model, X)
        assert np.abs(probs - 0.2).max() < 1e-4

    def test_min_child_weight_blocks_tiny_leaves(self):
        X, y = four_row_fixture()
        # each side holds hessian 0.32 < 1.0, so no split survives
        model = fit(X, y, GbdtConfig(num_rounds=1, max_depth=1, min_child_weight=1.0))
        assert all(t.is_leaf() for t in model.rounds[0])


class TestPredict:
    def test_zero_round_model_uniform(self):
        model = GbdtModel(config=GbdtConfig(num_rounds=1))
        dist = predict(model, np.zeros(11))
        assert dist.p == (0.2, 0.2, 0.2, 0.2, 0.2)

    def test_identical_rows_identical_predictions(self):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=5, learning_rate=0.3, max_depth=2))
        row = X[0]
        probs = predict_proba(model, np.stack([row, row]))
        assert np.array_equal(probs[0], probs[1])

    def test_out_of_range_features_still_valid(self):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=5, learning_rate=0.3, max_depth=2))
        wild = np.array([1e9, -1e9, 0, 0, 0, 5, -5, 2, 2, 2, 100.0])
        dist = predict(model, wild)
        assert abs(sum(dist.p) - 1.0) < 1e-9

    def test_nan_features_follow_default_direction(self):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=3, learning_rate=0.3, max_depth=1))
        root = model.rounds[0][0]
        assert root.default_left  # no missing values seen -> deterministic tie to left
        missing = np.full(11, np.nan)
        dist = predict(model, missing)
        assert abs(sum(dist.p) - 1.0) < 1e-9


class TestFeatureImportance:
    def test_single_feature_gets_all_gain(self):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=4, learning_rate=0.3, max_depth=2))
        ranking = feature_importance(model)
        assert ranking[0][0] == FEATURE_NAMES[0]
        assert ranking[0][1] > 0
        assert all(gain == 0.0 for _, gain in ranking[1:])

    def test_zero_round_all_zero_ties_by_index(self):
        model = GbdtModel(config=GbdtConfig(num_rounds=1))
        ranking = feature_importance(model)
        assert [name for name, _ in ranking] == list(FEATURE_NAMES)
        assert all(g == 0.0 for _, g in ranking)


class TestFilterFeatures:
    def make_tract(self, decile):
        return TractRecord(
            geoid="12345678901",
            composition=RaceDistribution((0.2, 0.2, 0.2, 0.2, 0.2)),
            median_income=40000,
            income_decile=decile,
        )

    def test_uniform_assembly(self):
        feats = build_filter_features(RaceDistribution.uniform(), self.make_tract(1))
        assert np.allclose(feats, [0.2] * 10 + [0.0])

    def test_decile_endpoint(self):
        feats = build_filter_features(RaceDistribution.uniform(), self.make_tract(10))
        assert feats[10] == 1.0

    def test_length_always_eleven(self):
        feats = build_filter_features(RaceDistribution((1, 0, 0, 0, 0)), self.make_tract(5))
        assert feats.shape == (11,)


class TestGridSearch:
    def test_picks_best_on_validation(self):
        X, y = separable_fixture(60)
        Xv, yv = separable_fixture(40)
        grid = (
            GbdtConfig(num_rounds=1, learning_rate=0.5, max_depth=1, min_child_weight=1e9),  # cannot split
            GbdtConfig(num_rounds=5, learning_rate=0.5, max_depth=1, min_child_weight=0.0),
        )
        model, best, results = fit_with_grid_search(X, y, Xv, yv, grid=grid, seed=0)
        assert best.num_rounds == 5
        assert len(results) == 2
        assert results[1][1] == 1.0
        assert results[0][1] == 0.5  # stuck at the uniform start, argmax ties to White


class TestSerialization:
    def test_round_trip(self, tmp_path):
        X, y = separable_fixture()
        model = fit(X, y, GbdtConfig(num_rounds=6, learning_rate=0.3, max_depth=2))
        path = tmp_path / "filter.json"
        save_gbdt(model, path)
        loaded = load_gbdt(path)
        assert np.array_equal(predict_proba(loaded, X), predict_proba(model, X))
        save_gbdt(loaded, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_checksum_tamper_detected(self, tmp_path):
        X, y = separable_fixture(30)
        model = fit(X, y, GbdtConfig(num_rounds=2, learning_rate=0.3, max_depth=1))
        path = tmp_path / "filter.json"
        save_gbdt(model, path)
        corrupted = path.read_text().replace('"leaf"', '"fake"', 1)
        path.write_text(corrupted)
        with pytest.raises(ModelFormatError):
            load_gbdt(path)
