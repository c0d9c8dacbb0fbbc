import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from humangeo import classifiers as K
from humangeo import convnet as C
from humangeo import dataset as D
from humangeo.errors import DegenerateFeatureError, FormatError, ShapeError, UsageError

from oracles import knn_naive


def blobs(k=4, n=20, d=5, sep=10.0, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.eye(k, d) * sep
    X = np.concatenate([centers[c] + sigma * rng.standard_normal((n, d)) for c in range(k)])
    return X, np.repeat(np.arange(k), n)


# ---------------------------------------------------------------- SVM


def test_svm_two_points_separable():
    X = np.array([[1.0, 0.0], [-1.0, 0.0]] * 5)
    y = np.array([1, 0] * 5)
    m = K.train_svm(K.FeatureSet(X, y, 2), c_grid=(1.0,), folds=2)
    for x in (0.3, 2.0, 10.0):
        assert K.svm_predict(m, np.array([x, 0.7])).label == 1
        assert K.svm_predict(m, np.array([-x, -0.4])).label == 0
    assert [K.svm_predict(m, x).label for x in X[:2]] == [1, 0]


def test_svm_blobs_perfect_folds():
    X, y = blobs(sep=10.0, sigma=1.0)
    m = K.train_svm(K.FeatureSet(X, y, 4), c_grid=(0.1, 1, 10, 100), folds=5)
    assert all(v == 1.0 for v in m.meta["cv_mca"].values())
    assert m.C == 0.1


def test_svm_duplication_invariance():
    X, y = blobs(sep=2.0, sigma=1.0, seed=1, n=15)
    a = K.train_svm(K.FeatureSet(X, y, 4), c_grid=(0.01, 0.1, 1, 10), folds=5, seed=3, epochs=100)
    b = K.train_svm(K.FeatureSet(np.repeat(X, 2, axis=0), np.repeat(y, 2), 4), c_grid=(0.01, 0.1, 1, 10), folds=5,
                    seed=3, epochs=100)
    assert a.C == b.C and a.meta["cv_mca"] == b.meta["cv_mca"]
    np.testing.assert_allclose(a.weight, b.weight, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(a.bias, b.bias, rtol=1e-5, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_folds_keep_duplicates_together(seed, folds):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 3, (12, 2)).astype(float)
    y = rng.integers(0, 3, 12)
    fold = K._folds(base, y, 3, folds, seed)
    for i in range(12):
        for j in range(12):
            if y[i] == y[j] and (base[i] == base[j]).all():
                assert fold[i] == fold[j]
    # a class with as many distinct rows as folds fills every fold once
    X = np.arange(folds, dtype=float)[:, None]
    assert sorted(K._folds(X, np.zeros(folds, int), 1, folds, seed)) == list(range(folds))


def test_svm_objective_non_increasing():
    X, y = blobs(sep=6.0, sigma=1.0, seed=2)
    for Cval in (0.01, 1.0, 100.0):
        hist = []
        K.fit_ovr(X, y, 4, Cval, epochs=200, history=hist)
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        assert hist[-1] < hist[0]


def test_svm_matches_reference_objective_minimum():
    # one class versus rest on 1-D separable data: the optimum is known in closed form
    X = np.array([[2.0], [-2.0]])
    W, b = K.fit_ovr(X, np.array([1, 0]), 2, C=100.0, epochs=2000)
    # margin constraints y (w x + b) >= 1 with minimal |w| give w = +-0.5, b = 0
    np.testing.assert_allclose(W[:, 0], [-0.5, 0.5], atol=1e-3)
    np.testing.assert_allclose(b, [0, 0], atol=1e-3)


def test_svm_errors():
    X, y = blobs(n=3)
    fs = K.FeatureSet(X, y, 4)
    with pytest.raises(UsageError, match="fewer than"):
        K.train_svm(fs, folds=5)
    with pytest.raises(UsageError):
        K.train_svm(fs, c_grid=(), folds=2)
    with pytest.raises(UsageError):
        K.train_svm(fs, c_grid=(0.0, 1.0), folds=2)
    with pytest.raises(UsageError):
        K.train_svm(fs, folds=1)
    with pytest.raises(ShapeError):
        K.FeatureSet(X, y[:-1], 4)


def test_svm_predict_examples():
    m = K.LinearSvmModel(np.zeros((3, 2), np.float32), np.array([1, 0, 0], np.float32), 1.0)
    assert K.svm_predict(m, np.array([5.0, -2.0])).label == 0
    tie = K.LinearSvmModel(np.zeros((3, 2), np.float32), np.array([0, 2, 2], np.float32), 1.0)
    assert K.svm_predict(tie, np.ones(2)).label == 1
    with pytest.raises(ShapeError):
        K.svm_predict(m, np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=6), st.floats(1e-3, 1e3))
def test_svm_argmax_scale_invariant(bias, scale):
    bias = np.array(bias, np.float32)
    m = K.LinearSvmModel(np.zeros((len(bias), 1), np.float32), bias, 1.0)
    s = K.LinearSvmModel(m.weight, (bias * np.float32(scale)).astype(np.float32), 1.0)
    assert K.svm_predict(m, np.zeros(1)).label == K.svm_predict(s, np.zeros(1)).label == int(np.argmax(bias))


def test_svm_file_roundtrip(tmp_path):
    m = K.LinearSvmModel(np.arange(6, dtype=np.float32).reshape(3, 2), np.array([1, 2, 3], np.float32), 0.1)
    K.save_svm(m, tmp_path / "s.gsvm")
    raw = (tmp_path / "s.gsvm").read_bytes()
    assert raw[:4] == b"GSVM"
    back = K.load_svm(tmp_path / "s.gsvm")
    assert np.array_equal(back.weight, m.weight) and np.array_equal(back.bias, m.bias) and back.C == 0.1
    (tmp_path / "t.gsvm").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        K.load_svm(tmp_path / "t.gsvm")


# ---------------------------------------------------------------- retrieval


def test_knn_examples():
    X = np.random.default_rng(0).standard_normal((6, 4))
    idx = K.KnnIndex(X, np.arange(6), normalized=False)
    hits = K.knn_retrieve(idx, X[3].astype(np.float32), 1)
    assert hits == [(3, 0.0)]
    allhits = K.knn_retrieve(idx, np.zeros(4), 6)
    assert sorted(i for i, _ in allhits) == list(range(6))
    assert [d for _, d in allhits] == sorted(d for _, d in allhits)
    for bad in (0, 7):
        with pytest.raises(UsageError):
            K.knn_retrieve(idx, np.zeros(4), bad)
    with pytest.raises(ShapeError):
        K.knn_retrieve(idx, np.zeros(5), 1)


def test_knn_matches_oracle_200x16():
    rng = np.random.default_rng(1)
    X = rng.integers(-3, 4, (200, 16)).astype(np.float32)
    idx = K.KnnIndex(X, np.zeros(200, int), normalized=False)
    for _ in range(50):
        q = rng.integers(-3, 4, 16).astype(np.float32)
        assert K.knn_retrieve(idx, q, 7) == knn_naive(X, q, 7)


def test_knn_tie_prefers_lower_row():
    X = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], np.float32)
    idx = K.KnnIndex(X, np.arange(4), normalized=False)
    assert [i for i, _ in K.knn_retrieve(idx, np.zeros(2), 4)] == [0, 1, 2, 3]


def test_weighted_vote_examples():
    p = K.weighted_vote([(0, 0.1), (1, 0.2), (1, 0.3)], 2)
    assert p.label == 0
    assert p.scores[0] == pytest.approx(10.0, rel=1e-6)
    assert p.scores[1] == pytest.approx(1 / 0.2 + 1 / 0.3, rel=1e-6)
    assert p.scores[1] == pytest.approx(8.3333333, rel=1e-6)
    assert K.weighted_vote([(2, 5.0)], 3).label == 2
    assert K.weighted_vote([(1, 0.01), (1, 9.0), (1, 100.0)], 3).label == 1
    assert K.weighted_vote([(0, 0.1), (1, 0.2), (1, 0.3)], 2, weighting="uniform").label == 1
    assert K.weighted_vote([(1, 1.0), (0, 1.0)], 2).label == 0
    with pytest.raises(UsageError):
        K.weighted_vote([], 2)
    with pytest.raises(UsageError):
        K.weighted_vote([(0, 1.0)], 2, weighting="gaussian")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.floats(0, 10)), min_size=1, max_size=12), st.randoms())
def test_weighted_vote_permutation_invariant(neighbors, rnd):
    shuffled = list(neighbors)
    rnd.shuffle(shuffled)
    a, b = K.weighted_vote(neighbors, 5), K.weighted_vote(shuffled, 5)
    assert a.label == b.label and a.scores.tobytes() == b.scores.tobytes()


def test_unit_normalize_and_degenerate():
    X = np.array([[3.0, 4.0], [0.0, 2.0]])
    assert np.allclose(K.unit_normalize(X), [[0.6, 0.8], [0.0, 1.0]])
    fs = K.FeatureSet(np.array([[1.0, 0.0], [0.0, 0.0]]), [0, 1], 2, ids=["a", "zero_rec"])
    with pytest.raises(DegenerateFeatureError, match="zero_rec"):
        K.index_from_features(fs)
    with pytest.raises(UsageError):
        K.index_from_features(K.FeatureSet(np.zeros((0, 2)), [], 2))


def test_index_file_roundtrip(tmp_path):
    idx = K.KnnIndex(np.random.default_rng(0).random((5, 3)), [0, 2, 1, 1, 0])
    K.save_index(idx, tmp_path / "i.gsix")
    raw = (tmp_path / "i.gsix").read_bytes()
    assert raw[:4] == b"GSIX"
    back = K.load_index(tmp_path / "i.gsix")
    assert np.array_equal(back.features, idx.features) and back.labels.tolist() == [0, 2, 1, 1, 0]
    assert back.normalized
    (tmp_path / "j.gsix").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        K.load_index(tmp_path / "j.gsix")


def test_features_dir_roundtrip(tmp_path):
    fs = K.FeatureSet(np.arange(6, dtype=np.float32).reshape(3, 2), [1, 0, 1], 2, "fc7", "human_based",
                      ["a", "b", "c"])
    K.save_features(fs, tmp_path / "f")
    back = K.load_features(tmp_path / "f")
    assert np.array_equal(back.features, fs.features) and back.labels.tolist() == [1, 0, 1]
    assert (back.tap, back.pooling, back.ids, back.num_classes) == ("fc7", "human_based", ["a", "b", "c"], 2)


# ---------------------------------------------------------------- composed predictors on a tiny dataset


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    m = D.make_synthetic_dataset(root, 3, 8, "foreground", seed=4)
    spec = C.desk_spec(3, mean=(0.5, 0.5, 0.5))
    w = C.build_network(spec, init="he", seed=0)
    return m, spec, w


def test_svm_pipeline_composition(tiny):
    m, spec, w = tiny
    X = K.encode_records(spec, w, m, m.records, "fc7", "image")
    svm = K.train_svm(K.FeatureSet(X, [r.label for r in m.records], 3), c_grid=(1.0,), folds=2, epochs=50)
    for r in m.records[:4]:
        x = C.extract_features(spec, w, D.preprocess(r, "image", (64, 64), spec.mean, root=m.root), "fc7")
        p = K.predict_pretrained_svm(spec, w, svm, m, r, "image")
        assert p.label == K.svm_predict(svm, x).label
        assert np.array_equal(p.scores, K.svm_predict(svm, x).scores)
        assert np.array_equal(p.scores, K.predict_finetuned_svm(spec, w, svm, m, r, "image").scores)


def test_build_index_rows_and_norms(tiny):
    m, spec, w = tiny
    idx = K.build_index(spec, w, m, m.records, "fc7", "image")
    assert len(idx) == len(m.records)
    assert np.allclose(np.linalg.norm(idx.features.astype(np.float64), axis=1), 1, atol=1e-5)
    r = m.records[5]
    f = C.extract_features(spec, w, D.preprocess(r, "image", (64, 64), spec.mean, root=m.root), "fc7")
    assert np.allclose(idx.features[5], f / np.linalg.norm(f.astype(np.float64)), atol=1e-6)


def test_deep_im2gps_self_match_and_composition(tiny):
    m, spec, w = tiny
    idx = K.build_index(spec, w, m, m.records, "fc7", "image")
    for i, r in enumerate(m.records[::3]):
        assert K.deep_im2gps_predict(idx, spec, w, m, r, k=1).label == r.label
    r = m.records[1]
    q = K.encode_records(spec, w, m, [r], "fc7", "image")[0]
    hits = K.knn_retrieve(idx, q, 5)
    expect = K.weighted_vote([(idx.labels[i], d) for i, d in hits], 3)
    got = K.deep_im2gps_predict(idx, spec, w, m, r, k=5)
    assert got.label == expect.label and np.array_equal(got.scores, expect.scores)
    # k = 1 is plain nearest-neighbour classification
    nn = idx.labels[int(np.argmin(np.linalg.norm(idx.features - K.unit_normalize(q[None])[0], axis=1)))]
    assert K.deep_im2gps_predict(idx, spec, w, m, r, k=1).label == nn


def test_predict_finetuned_memorized(tiny):
    m, spec, w = tiny
    r = m.records[-1]
    x = D.load_batch(m, [r], "image", (64, 64), spec.mean)
    trained = C.finetune(spec, w, (x, np.array([r.label])), (x[:0], np.array([], int)),
                         C.FinetuneConfig(lr=0.05, epochs=30, batch_size=1))
    assert K.predict_finetuned(spec, trained, m, r, "image").label == r.label
    X = K.encode_records(spec, trained, m, m.records, "fc7", "image")
    svm = K.train_svm(K.FeatureSet(X, [q.label for q in m.records], 3), c_grid=(100.0,), folds=2)
    assert K.predict_finetuned_svm(spec, trained, svm, m, r, "image").label == r.label
