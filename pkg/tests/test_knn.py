import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dft_oracle, exhaustive_vote, features_oracle
from pmufog import knn
from pmufog.signalgen import FaultType, SignalConfig, generate_dataset, generate_record


def assert_rel(actual, expected, rel=1e-9):
    for i, (x, y) in enumerate(zip(actual, expected), start=1):
        assert abs(x - y) <= rel * max(1.0, abs(y)), f"F{i}: {x} vs {y}"


def test_features_match_direct_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.normal(0.0, 1.0, 10)
        assert_rel(knn.extract_features(w).values, features_oracle(list(w)))


def test_constant_window():
    fv = knn.extract_features([3.0] * 10)
    assert fv.f2 == 0.0 and fv.f3 == 0.0 and fv.f10 == 0.0 and fv.f9 == 3.0
    assert fv.f4 == 0.0


def test_window_one_two_three():
    fv = knn.extract_features([1.0, 2.0, 3.0])
    assert fv[2] == pytest.approx(1.0)
    assert fv[3] == pytest.approx(2 / 3)
    assert fv[10] == 2.0


def test_f8_uses_square_root_of_mean_abs():
    assert knn.extract_features([4.0] * 10).f8 == pytest.approx(2.0)


def test_all_zero_window_is_finite():
    fv = knn.extract_features(np.zeros(10))
    assert all(math.isfinite(v) for v in fv.values)
    assert fv.f4 == 0.0 and fv.f11 == 0.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-1e3, 1e3)))
def test_feature_invariants(w):
    fv = knn.extract_features(w)
    assert all(math.isfinite(v) for v in fv.values)
    assert fv.f2 >= 0 and fv.f3 >= 0 and fv.f8 >= 0 and fv.f10 >= 0 and fv.f11 >= 0
    assert fv.f9 >= w.min()


def test_feature_vector_access():
    fv = knn.extract_features(np.arange(1.0, 11.0))
    assert fv[6] == fv.f6 == fv.as_dict()["shannon_entropy"]
    with pytest.raises(IndexError):
        fv[17]
    assert fv.as_array().shape == (16,)


def test_dft_matches_oracle():
    w = np.random.default_rng(1).normal(size=8)
    np.testing.assert_allclose(knn.dft(w), dft_oracle(list(w)), atol=1e-12)


def test_dft_constant_window_all_dc():
    D = knn.dft(np.full(10, 2.0))
    assert abs(D[0]) == pytest.approx(20.0)
    assert np.all(np.abs(D[1:]) < 1e-12)


def test_dft_single_tone():
    n = 10
    j = np.arange(1, n + 1)
    D = knn.dft(1.5 * np.cos(2 * np.pi * j / n))
    assert abs(D[1]) == pytest.approx(n / 2 * 1.5)
    mask = np.ones(n, bool)
    mask[[1, n - 1]] = False
    assert np.all(np.abs(D[mask]) < 1e-9)


def test_dft_impulse_flat():
    w = np.zeros(10)
    w[0] = 1.0
    np.testing.assert_allclose(np.abs(knn.dft(w)), 1.0)


@pytest.mark.parametrize("kw", [{"k": 4}, {"k": 0}, {"window_len": 1}, {"selected_features": (0,)},
                                {"selected_features": (17,)}, {"selected_features": ()}])
def test_config_validation(kw):
    with pytest.raises(knn.ConfigError):
        knn.KnnConfig(**kw)


def test_classify_matches_exhaustive_oracle():
    rng = np.random.default_rng(2)
    cfg = knn.KnnConfig(k=5, selected_features=tuple(range(1, 17)), standardize=False)
    for _ in range(100):
        n = int(rng.integers(6, 40))
        pts = rng.normal(size=(n, 16))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        model = knn.fit(pts, labels, cfg)
        q = rng.normal(size=16)
        got = knn.classify_features(model, q[None, :])
        want = exhaustive_vote(pts.tolist(), labels.tolist(), q.tolist(), 5)
        assert (bool(got[0][0]), float(got[1][0])) == want


def test_planted_neighbours_three():
    cfg = knn.KnnConfig(k=3, selected_features=(1,), standardize=False)
    feats = np.zeros((4, 16))
    feats[:, 0] = [1.0, 2.0, 3.0, 10.0]
    model = knn.fit(feats, [True, False, False, True], cfg)
    is_fault, margin = knn.classify_features(model, np.zeros((1, 16)))
    assert not is_fault[0] and margin[0] == pytest.approx(1 / 3)


def test_zero_distance_neighbour_k1():
    W = np.random.default_rng(3).normal(size=(6, 10))
    labels = np.array([True, False, False, True, False, False])
    model = knn.fit(knn.feature_matrix(W), labels, knn.KnnConfig(k=1))
    assert knn.classify(model, W[3]) == (True, 1.0)


def test_k_equal_training_size_is_global_majority():
    pts = np.random.default_rng(4).normal(size=(7, 16))
    labels = np.array([True, True, True, False, False, False, False])
    model = knn.fit(pts, labels, knn.KnnConfig(k=7, standardize=False))
    assert not knn.classify_features(model, np.full((1, 16), 100.0))[0][0]


def test_fit_requires_both_labels():
    with pytest.raises(ValueError):
        knn.fit(np.zeros((3, 16)), [True, True, True], knn.KnnConfig())


def test_standardization_identity():
    ds = generate_dataset(1, 0.05, seed=5)
    model = knn.train(ds)
    np.testing.assert_allclose(model.points.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(model.points.std(axis=0), 1.0, atol=1e-9)


def test_zero_variance_feature_warns():
    feats = np.random.default_rng(6).normal(size=(10, 16))
    feats[:, 5] = 1.0
    with pytest.warns(UserWarning):
        model = knn.fit(feats, [True] * 5 + [False] * 5, knn.KnnConfig())
    assert model.scale[0] == 1.0


def test_minimal_model_from_two_records():
    normal = generate_record(SignalConfig(rng_seed=1), FaultType.NONE)
    fault = generate_record(SignalConfig(rng_seed=2), FaultType.LL)
    model = knn.train([normal, fault])
    assert model.labels.any() and not model.labels.all()


def test_windows_of_labels_overlap():
    r = generate_record(SignalConfig(fault_onset_s=0.5, fault_duration_s=0.1), FaultType.LG)
    W, start, end, fault = knn.windows_of(r, 10)
    assert W.shape == (120, 10)
    idx = np.flatnonzero(fault)
    assert start[idx[0]] <= 0.5 <= end[idx[0]] + 1 / 600
    assert idx.size == 6


def test_model_save_load(tmp_path):
    model = knn.train(generate_dataset(1, 0.05, seed=7))
    model.save(tmp_path / "m.json")
    back = knn.KnnModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.points, model.points)
    np.testing.assert_array_equal(back.labels, model.labels)
    assert back.cfg == model.cfg


def test_memorisation_k1():
    ds = generate_dataset(2, 0.05, seed=8)
    model = knn.train(ds, knn.KnnConfig(k=1))
    table = knn.evaluate(model, ds)
    assert table["all"]["tpr"] == 1.0


def test_all_normal_dataset_reports_no_tpr():
    ds = generate_dataset(2, 0.05, seed=9)
    model = knn.train(ds)
    table = knn.evaluate(model, [r for r in ds if r.fault is FaultType.NONE])
    assert table["None"]["tpr"] is None
    assert table["all"]["tpr"] is None


def test_select_training_split():
    ds = generate_dataset(4, 0.05, seed=10)
    train, test = knn.select_training(ds, 3)
    assert len(train) == 18 and len(test) == 6
    assert not {id(r) for r in train} & {id(r) for r in test}


@pytest.mark.parametrize("flags,run,expected", [
    ([1, 0, 1, 1, 0, 1, 1, 1], 2, [0, 0, 1, 1, 0, 1, 1, 1]),
    ([1, 0, 1, 1, 0, 1, 1, 1], 3, [0, 0, 0, 0, 0, 1, 1, 1]),
    ([1, 0, 1], 1, [1, 0, 1]),
    ([], 2, []),
])
def test_persistent_runs(flags, run, expected):
    assert knn.persistent(np.array(flags, bool), run).tolist() == [bool(x) for x in expected]


def test_min_consecutive_validated_and_saved(tmp_path):
    with pytest.raises(knn.ConfigError):
        knn.KnnConfig(min_consecutive=0)
    model = knn.train(generate_dataset(1, 0.05, seed=7), knn.KnnConfig(min_consecutive=3))
    model.save(tmp_path / "m.json")
    assert knn.KnnModel.load(tmp_path / "m.json").cfg.min_consecutive == 3


def test_kurtosis_of_subnormal_scale_window_is_finite():
    fv = knn.extract_features([1.1514391726314926e-129, 0.0])
    assert fv.f4 == pytest.approx(1.0)
