"""City classifiers on top of ConvNet features.

* Pretrained+SVM / Finetuned+SVM: one-vs-rest linear SVMs over tapped
  activations, regularization chosen by stratified cross-validation.
* Finetuned: the network's own softmax output.
* Deep-IM2GPS: exact k-NN over unit-normalized training features with a
  distance-weighted vote over the neighbors' city labels.

Every argmax breaks ties toward the lowest class index; retrieval breaks
distance ties toward the lowest reference row.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import convnet
from . import tensor as T
from .dataset import load_batch, pooling_mode
from .errors import DegenerateFeatureError, FormatError, ShapeError, UsageError
from .evaluation import confusion, mean_class_accuracy

SVM_MAGIC = b"GSVM"
INDEX_MAGIC = b"GSIX"
DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0)
VOTE_EPS = 1e-8


@dataclass
class FeatureSet:
    features: np.ndarray  # N x d
    labels: np.ndarray  # N
    num_classes: int
    tap: str = ""
    pooling: str = "image_based"
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ShapeError(f"features {self.features.shape} do not match {len(self.labels)} labels")


@dataclass
class Prediction:
    label: int
    scores: np.ndarray


def _argmax(scores: np.ndarray) -> Prediction:
    return Prediction(int(np.argmax(scores)), scores)


# ---------------------------------------------------------------------------
# one-vs-rest linear SVM


@dataclass
class LinearSvmModel:
    weight: np.ndarray  # k x d
    bias: np.ndarray  # k
    C: float
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def svm_objective(W, b, X, Y, C) -> np.ndarray:
    """Per-class ``0.5 ||w||^2 + C * mean(hinge)``; ``Y`` is N x k in {-1, +1}."""
    margins = Y * (X @ W.T + b)
    return 0.5 * (W * W).sum(axis=1) + C * np.maximum(0.0, 1.0 - margins).mean(axis=0)


def fit_ovr(X, y, k: int, C: float, epochs: int = 300, history: list | None = None):
    """Full-batch subgradient descent with per-class backtracking.

    A step is accepted only if it does not increase that class's objective,
    so the objective is non-increasing epoch to epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n == 0:
        raise UsageError("cannot fit an SVM on an empty training set")
    Y = np.where(np.arange(k)[None, :] == np.asarray(y)[:, None], 1.0, -1.0)
    W = np.zeros((k, d))
    b = np.zeros(k)
    scale = 1.0 + C * float((X * X).sum(axis=1).max(initial=0.0))
    eta = np.full(k, 1.0 / scale)
    J = svm_objective(W, b, X, Y, C)
    if history is not None:
        history.append(J.sum())
    for _ in range(epochs):
        active = Y * (X @ W.T + b) < 1.0
        coef = np.where(active, Y, 0.0) * (C / n)
        gW = W - coef.T @ X
        gb = -coef.sum(axis=0)
        trial = np.minimum(eta * 2.0, 1e6)
        pending = np.ones(k, dtype=bool)
        for _ in range(40):
            W_new = W - trial[:, None] * gW
            b_new = b - trial * gb
            J_new = svm_objective(W_new, b_new, X, Y, C)
            ok = pending & (J_new <= J)
            W[ok], b[ok], J[ok], eta[ok] = W_new[ok], b_new[ok], J_new[ok], trial[ok]
            pending &= ~ok
            if not pending.any():
                break
            trial = np.where(pending, trial * 0.5, trial)
        eta = np.where(pending, trial, eta)
        if history is not None:
            history.append(J.sum())
    return W, b


def _folds(X, y, k: int, folds: int, seed: int) -> np.ndarray:
    """Stratified fold ids; identical feature rows always share a fold.

    Each class's distinct rows are shuffled and dealt round-robin, and the
    deal continues where the previous class stopped so that classes with
    few distinct rows still spread over different folds.
    """
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.intp)
    start = 0
    for c in range(k):
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            continue
        _, group = np.unique(X[idx], axis=0, return_inverse=True)
        group = group.ravel()
        order = rng.permutation(group.max() + 1)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        fold[idx] = (rank[group] + start) % folds
        start = (start + order.size) % folds
    return fold


def train_svm(features: FeatureSet, c_grid=DEFAULT_C_GRID, folds: int = 5, seed: int = 0,
              epochs: int = 300) -> LinearSvmModel:
    """Choose C by mean fold mCA (ties go to the smaller C), then refit on all data."""
    grid = sorted(float(c) for c in c_grid)
    if not grid or grid[0] <= 0:
        raise UsageError(f"C grid must be non-empty and positive, got {list(c_grid)}")
    if folds < 2:
        raise UsageError(f"need at least 2 folds, got {folds}")
    X = np.asarray(features.features, dtype=np.float64)
    y = features.labels
    k = features.num_classes
    if k < 2:
        raise UsageError("SVM needs at least 2 classes")
    counts = np.bincount(y, minlength=k)
    short = [c for c in range(k) if counts[c] < folds]
    if short:
        raise UsageError(f"classes {short} have fewer than {folds} examples")
    fold = _folds(X, y, k, folds, seed)
    scores = {}
    for C in grid:
        fold_mca = []
        for f in range(folds):
            tr, va = fold != f, fold == f
            if not va.any() or not tr.any():
                continue
            W, b = fit_ovr(X[tr], y[tr], k, C, epochs)
            pred = np.argmax(X[va] @ W.T + b, axis=1)
            fold_mca.append(mean_class_accuracy(confusion(pred, y[va], k)))
        if not fold_mca:
            raise UsageError("cross-validation produced no usable folds")
        scores[C] = float(np.mean(fold_mca))
    best = grid[0]
    for C in grid[1:]:
        if scores[C] > scores[best]:
            best = C
    W, b = fit_ovr(X, y, k, best, epochs)
    meta = {"cv_mca": scores, "folds": folds, "seed": seed, "epochs": epochs, "tap": features.tap,
            "pooling": features.pooling}
    return LinearSvmModel(W.astype(T.DTYPE), b.astype(T.DTYPE), best, meta)


def svm_scores(model: LinearSvmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ShapeError(f"feature dim {X.shape[-1]} != SVM dim {model.dim}")
    return X.astype(np.float64) @ model.weight.T.astype(np.float64) + model.bias.astype(np.float64)


def svm_predict(model: LinearSvmModel, x: np.ndarray) -> Prediction:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ShapeError(f"feature vector of length {x.shape} != SVM dim {model.dim}")
    return _argmax(svm_scores(model, x[None])[0])


def save_svm(model: LinearSvmModel, path) -> None:
    with open(path, "wb") as fp:
        fp.write(SVM_MAGIC)
        T.write_tensor(fp, model.weight)
        T.write_tensor(fp, model.bias)
        fp.write(struct.pack("<d", model.C))


def load_svm(path) -> LinearSvmModel:
    with open(path, "rb") as fp:
        if fp.read(4) != SVM_MAGIC:
            raise FormatError(f"{path}: not an SVM model file")
        W = T.read_tensor(fp)
        b = T.read_tensor(fp)
        raw = fp.read(8)
        if len(raw) != 8:
            raise FormatError(f"{path}: truncated SVM model file")
        if fp.read(1):
            raise FormatError(f"{path}: trailing bytes")
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise FormatError(f"{path}: inconsistent SVM shapes {W.shape}, {b.shape}")
    return LinearSvmModel(W, b, struct.unpack("<d", raw)[0])


# ---------------------------------------------------------------------------
# encoding records through a network


def encode_records(spec, weights, manifest, records, tap: str, pooling: str, strict: bool = True,
                   chunk: int = 256) -> np.ndarray:
    """Tap features (N x d) for manifest records, preprocessed with the network's mean."""
    pooling = pooling_mode(pooling)
    target = spec.input_shape[1:]
    parts = []
    for i in range(0, len(records), chunk):
        batch = load_batch(manifest, records[i : i + chunk], pooling, target, spec.mean, strict)
        parts.append(convnet.extract_features_batch(spec, weights, batch, tap))
    if not parts:
        return np.zeros((0, int(np.prod(convnet.tap_shape(spec, tap)))), dtype=T.DTYPE)
    return np.concatenate(parts)


def predict_svm_pipeline(spec, weights, svm: LinearSvmModel, manifest, record, pooling: str, tap: str = "fc7",
                         strict: bool = True) -> Prediction:
    """``g(f(I))`` for one record."""
    x = encode_records(spec, weights, manifest, [record], tap, pooling, strict)[0]
    return svm_predict(svm, x)


predict_pretrained_svm = predict_svm_pipeline
predict_finetuned_svm = predict_svm_pipeline


def predict_finetuned(spec, weights, manifest, record, pooling: str, strict: bool = True) -> Prediction:
    """``f'(I)``: argmax of the fine-tuned network's softmax."""
    batch = load_batch(manifest, [record], pooling_mode(pooling), spec.input_shape[1:], spec.mean, strict)
    probs, _ = convnet.forward(spec, weights, batch)
    return _argmax(probs[0].astype(np.float64))


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class KnnIndex:
    features: np.ndarray  # N x d
    labels: np.ndarray  # N
    normalized: bool = True

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=T.DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ShapeError(f"index features {self.features.shape} vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


def unit_normalize(X: np.ndarray, ids=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt((X * X).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        who = ids[zero[0]] if ids is not None else f"row {zero[0]}"
        raise DegenerateFeatureError(f"zero feature vector for {who}; cannot normalize")
    return (X / norms[:, None]).astype(T.DTYPE)


def index_from_features(features: FeatureSet, normalize: bool = True) -> KnnIndex:
    if len(features.labels) == 0:
        raise UsageError("cannot build an index from an empty training set")
    X = unit_normalize(features.features, features.ids or None) if normalize else features.features
    return KnnIndex(X, features.labels, normalize)


def build_index(spec, weights, manifest, records, tap: str = "fc7", pooling: str = "image_based",
                normalize: bool = True, strict: bool = True) -> KnnIndex:
    """Encode every training record with the fine-tuned network; rows follow ``records`` order."""
    if not records:
        raise UsageError("cannot build an index from an empty training set")
    X = encode_records(spec, weights, manifest, records, tap, pooling, strict)
    fs = FeatureSet(X, [r.label for r in records], manifest.num_classes, tap, pooling, [r.id for r in records])
    return index_from_features(fs, normalize)


def knn_retrieve(index: KnnIndex, query: np.ndarray, k: int) -> list:
    """The ``k`` nearest references as ``(row, euclidean distance)``, nearest first."""
    n = len(index)
    if not 1 <= k <= n:
        raise UsageError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.features.shape[1]:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.features.shape[1]}")
    if index.normalized:
        q = unit_normalize(q[None], ["query"])[0].astype(np.float64)
    diff = index.features.astype(np.float64) - q
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]


def weighted_vote(neighbors, num_classes: int, weighting: str = "inverse_distance",
                  eps: float = VOTE_EPS) -> Prediction:
    """Class score = sum over that class's neighbors of ``1 / (distance + eps)``.

    ``neighbors`` is a sequence of ``(label, distance)``. ``weighting="uniform"``
    counts each neighbor once.
    """
    if len(neighbors) < 1:
        raise UsageError("weighted_vote needs at least one neighbor")
    if weighting not in ("inverse_distance", "uniform"):
        raise UsageError(f"unknown weighting {weighting!r}")
    terms = [[] for _ in range(num_classes)]
    for label, dist in neighbors:
        terms[int(label)].append(1.0 if weighting == "uniform" else 1.0 / (float(dist) + eps))
    # fsum is correctly rounded, so the scores do not depend on neighbor order
    scores = np.array([math.fsum(t) for t in terms])
    return _argmax(scores)


def vote_from_index(index: KnnIndex, query: np.ndarray, k: int, num_classes: int,
                    weighting: str = "inverse_distance") -> Prediction:
    hits = knn_retrieve(index, query, k)
    return weighted_vote([(index.labels[i], d) for i, d in hits], num_classes, weighting)


def deep_im2gps_predict(index: KnnIndex, spec, weights, manifest, record, k: int = 5,
                        pooling: str = "image_based", tap: str = "fc7", weighting: str = "inverse_distance",
                        strict: bool = True) -> Prediction:
    """Encode the query, retrieve its ``k`` nearest training images, vote on the city."""
    q = encode_records(spec, weights, manifest, [record], tap, pooling, strict)[0]
    return vote_from_index(index, q, k, manifest.num_classes, weighting)


def save_index(index: KnnIndex, path) -> None:
    with open(path, "wb") as fp:
        fp.write(INDEX_MAGIC)
        T.write_tensor(fp, index.features)
        fp.write(struct.pack("<I", len(index)))
        fp.write(np.asarray(index.labels, dtype="<u4").tobytes())
        fp.write(struct.pack("<B", int(index.normalized)))


def load_index(path) -> KnnIndex:
    with open(path, "rb") as fp:
        if fp.read(4) != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file")
        X = T.read_tensor(fp)
        raw = fp.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated index file")
        (n,) = struct.unpack("<I", raw)
        lab = fp.read(4 * n)
        flag = fp.read(1)
        if len(lab) != 4 * n or len(flag) != 1 or fp.read(1):
            raise FormatError(f"{path}: truncated or oversized index file")
    if X.ndim != 2 or X.shape[0] != n:
        raise FormatError(f"{path}: feature matrix {X.shape} vs {n} labels")
    return KnnIndex(X, np.frombuffer(lab, dtype="<u4").astype(np.intp), bool(flag[0]))


def save_features(fs: FeatureSet, directory) -> None:
    """``features.gstn`` (N x d) plus ``features.tsv`` (id, label index)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T.save_tensor(d / "features.gstn", fs.features)
    lines = [f"#tap={fs.tap}\tpooling={fs.pooling}\tnum_classes={fs.num_classes}"]
    lines += [f"{rid}\t{int(lab)}" for rid, lab in zip(fs.ids, fs.labels)]
    (d / "features.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(directory) -> FeatureSet:
    d = Path(directory)
    X = T.load_tensor(d / "features.gstn")
    lines = (d / "features.tsv").read_text(encoding="utf-8").splitlines()
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("#").split("\t"))
    rows = [line.split("\t") for line in lines[1:] if line]
    return FeatureSet(X, [int(r[1]) for r in rows], int(meta["num_classes"]), meta["tap"], meta["pooling"],
                      [r[0] for r in rows])
