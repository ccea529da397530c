import io

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from conftest import gaussian_classes, random_stack
from dnfnorm.data import VectorSet
from dnfnorm.errors import (DegenerateScatterError, DimensionMismatchError, ParseError,
                            ZeroNormError)
from dnfnorm.flow import write_flow
from dnfnorm.linear import (LinearTransform, Pipeline, apply, compute_scatter,
                            dump_transform_text, lda_fit, ldan_fit, length_normalize, load_stage,
                            pca_fit, read_manifest, read_transform, whiten_fit, write_manifest,
                            write_transform)


def _aniso_classes(rng, K=5, n=60, D=8):
    B = rng.normal(size=(D, D))
    return gaussian_classes(rng, K, n, D, spread=2.0, cov=B @ B.T / D + 0.1 * np.eye(D))


def _proj_scatter(T, X):
    return compute_scatter(apply(T, X))[:2]


def _offdiag(S):
    return np.linalg.norm(S - np.diag(np.diag(S)))


# length normalization

def test_length_normalize_examples(rng):
    assert np.array_equal(length_normalize(np.array([1.0, 0, 0, 0])), [2.0, 0, 0, 0])
    x = np.array([1.0, -1.0, 1.0, 1.0])
    assert np.array_equal(length_normalize(x), x)
    V = rng.normal(size=(50, 7)) * rng.uniform(0.1, 10, size=(50, 1))
    assert np.allclose(np.linalg.norm(length_normalize(V), axis=1), np.sqrt(7), atol=1e-12)
    with pytest.raises(ZeroNormError):
        length_normalize(np.zeros(3))


# scatter

def test_scatter_point_classes():
    X = VectorSet(list("abcd"), [0, 0, 1, 1],
                  [[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    S_b, S_w, mean = compute_scatter(X)
    assert np.array_equal(S_w, np.zeros((2, 2)))
    assert np.array_equal(S_b, [[1.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(mean, [0.0, 0.0])
    same = VectorSet(list("abcd"), [0, 0, 1, 1], np.ones((4, 3)))
    S_b, S_w, _ = compute_scatter(same)
    assert not S_b.any() and not S_w.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_law_of_total_covariance(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(10, 60))
    labels = r.integers(0, 4, size=n)
    labels[:2] = [0, 1]
    X = VectorSet([str(i) for i in range(n)], labels, r.normal(size=(n, 3)) * 5)
    S_b, S_w, mean = compute_scatter(X)
    total = np.cov(X.vectors.T, bias=True)
    assert np.allclose(S_b + S_w, total, atol=1e-10)


def test_scatter_needs_two_classes(rng):
    with pytest.raises(DegenerateScatterError):
        compute_scatter(VectorSet(["a", "b"], [0, 0], rng.normal(size=(2, 2))))


# LDA

def test_lda_axis_aligned_fisher(rng):
    n = 4000
    labels = np.repeat([0, 1], n)
    V = rng.normal(size=(2 * n, 2)) + np.where(labels[:, None] == 0, [1.0, 0.0], [-1.0, 0.0])
    X = VectorSet([str(i) for i in range(2 * n)], labels, V)
    T = lda_fit(X, 1, 0.0)
    w = T.projection[0] / np.linalg.norm(T.projection[0])
    assert abs(w[0]) > 0.999


def test_lda_generalized_eig_oracle(rng):
    X = _aniso_classes(rng)
    T = lda_fit(X, 4, 0.0)
    S_b, S_w, _ = compute_scatter(X)
    _, vecs = scipy.linalg.eigh(S_b, S_w)
    oracle = vecs[:, ::-1][:, :4]
    angles = scipy.linalg.subspace_angles(T.projection.T, oracle)
    assert np.max(angles) <= 1e-8


def test_lda_lambda_zero_matches_classic(rng):
    X = _aniso_classes(rng, K=3)
    S_b, S_w, _ = compute_scatter(X)
    w, V = np.linalg.eig(np.linalg.solve(S_w, S_b))
    top = np.real(V[:, np.argmax(np.real(w))])
    d = lda_fit(X, 1, 0.0).projection[0]
    assert abs(d @ top) / (np.linalg.norm(d) * np.linalg.norm(top)) >= 1 - 1e-10


def test_lda_simultaneous_diagonalization(rng):
    X = _aniso_classes(rng)
    for out_dim in (4, 8):
        T = lda_fit(X, out_dim, 0.0)
        Sb, Sw = _proj_scatter(T, X)
        assert _offdiag(Sb) <= 1e-8 and _offdiag(Sw) <= 1e-8
        assert np.allclose(np.diag(Sw), 1.0, atol=1e-8)
        assert np.all(np.diff(np.diag(Sb)) <= 1e-10)


def test_lda_lambda_variant(rng):
    X = _aniso_classes(rng)
    T = lda_fit(X, 8, 0.1)
    Sb, Sw = _proj_scatter(T, X)
    assert _offdiag(Sb) <= 1e-8 and _offdiag(Sw) <= 1e-8
    assert np.allclose(np.diag(Sw), 1.0, atol=1e-8)
    with pytest.raises(ValueError):
        lda_fit(X, 2, -1.0)


def test_lda_fisher_optimality(rng):
    X = _aniso_classes(rng, K=2, D=5)
    S_b, S_w, _ = compute_scatter(X)
    d = lda_fit(X, 1, 0.0).projection[0]

    def ratio(w):
        return np.einsum("...i,ij,...j->...", w, S_b, w) / np.einsum("...i,ij,...j->...", w, S_w, w)

    best = ratio(d)
    assert np.all(ratio(rng.normal(size=(10000, 5))) <= best * (1 + 1e-12))


def test_lda_out_dim_clipped(rng):
    X = _aniso_classes(rng, D=4)
    assert lda_fit(X, 10).out_dim == 4


# LDA/N and the two-step decomposition

def test_ldan_on_white_within_is_orthogonal(rng):
    n, D = 3000, 3
    labels = np.repeat(np.arange(3), n)
    means = rng.normal(0, 3, size=(3, D))
    V = means[labels] + rng.normal(size=(3 * n, D))
    X = VectorSet([str(i) for i in range(3 * n)], labels, V)
    # exact within-class identity: whiten the empirical noise first
    _, S_w, _ = compute_scatter(X)
    T = ldan_fit(X)
    assert np.allclose(T.projection @ S_w @ T.projection.T, np.eye(D), atol=1e-10)
    # S_w is already ~I, so the symmetric inverse root is ~I and nearly orthogonal
    assert np.allclose(T.projection @ T.projection.T, np.eye(D), atol=0.1)


def test_ldan_whitens_and_survives_rotation(rng):
    X = _aniso_classes(rng)
    T = ldan_fit(X)
    _, Sw = _proj_scatter(T, X)
    assert np.allclose(Sw, np.eye(8), atol=1e-8)
    assert np.allclose(T.projection, T.projection.T, atol=1e-10)
    Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    R = LinearTransform(Q @ T.projection, T.offset, "ldan")
    _, Sw = _proj_scatter(R, X)
    assert np.allclose(Sw, np.eye(8), atol=1e-8)


def test_ldan_then_pca_reproduces_lda(rng):
    X = _aniso_classes(rng, K=6)
    N = ldan_fit(X)
    Y = apply(N, X)
    classes = Y.classes()
    means = np.array([Y.vectors[Y.labels == c].mean(axis=0) for c in classes])
    M = VectorSet([str(c) for c in classes], classes, means)
    P = pca_fit(M, 5)
    rows = P.projection @ N.projection
    L = lda_fit(X, 5, 0.0).projection
    cos = np.abs(np.sum(rows * L, axis=1)) / (np.linalg.norm(rows, axis=1) *
                                              np.linalg.norm(L, axis=1))
    assert np.all(cos >= 1 - 1e-8)


# whitening, PCA, identity

def test_whiten_diag_gaussian(rng):
    V = rng.normal(size=(10000, 2)) * [2.0, 1.0]
    X = VectorSet([str(i) for i in range(10000)], np.zeros(10000), V)
    Y = apply(whiten_fit(X), X)
    assert np.allclose(np.cov(Y.vectors.T), np.eye(2), atol=1e-2)
    assert np.allclose(np.cov(Y.vectors.T, bias=True), np.eye(2), atol=1e-10)


def test_pca_full_dim_is_isometry(rng):
    X = _aniso_classes(rng, D=5)
    Y = apply(pca_fit(X, 5), X)
    d0 = np.linalg.norm(X.vectors[:, None] - X.vectors[None], axis=-1)
    d1 = np.linalg.norm(Y.vectors[:, None] - Y.vectors[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-10)
    var = np.var(Y.vectors, axis=0)
    assert np.all(np.diff(var) <= 1e-10)


def test_identity_apply(rng):
    X = _aniso_classes(rng, D=3)
    Y = apply(LinearTransform.identity(3), X)
    assert Y == X


def test_transform_validation():
    with pytest.raises(DimensionMismatchError):
        LinearTransform(np.eye(2), np.zeros(3), "pca")
    with pytest.raises(DimensionMismatchError):
        LinearTransform(np.ones((3, 2)), np.zeros(2), "pca")
    with pytest.raises(ValueError):
        LinearTransform(np.eye(2), np.zeros(2), "nope")
    T = LinearTransform.identity(2)
    with pytest.raises(DimensionMismatchError):
        T.apply_array(np.zeros(3))


# pipelines and containers

def test_pipeline_associative(rng):
    X = _aniso_classes(rng, D=4)
    stages = [whiten_fit(X), LinearTransform.lengthnorm(4), random_stack(rng, 4, 2),
              pca_fit(X, 3)]
    P = Pipeline(stages)
    step = X
    for s in stages:
        step = apply(s, step)
    assert apply(P, X) == step
    assert np.array_equal(Pipeline([Pipeline(stages[:2]).stages[0], stages[1]]).apply_array(
        X.vectors), Pipeline(stages[:2]).apply_array(X.vectors))
    with pytest.raises(DimensionMismatchError):
        Pipeline([pca_fit(X, 3), whiten_fit(X)])


def test_transform_container(rng, tmp_path):
    X = _aniso_classes(rng, D=4)
    T = lda_fit(X, 3, 0.1)
    buf = io.BytesIO()
    write_transform(buf, T)
    raw = buf.getvalue()
    assert raw[:4] == b"LIN1"
    back = read_transform(io.BytesIO(raw))
    assert back.kind == "lda" and np.array_equal(back.projection, T.projection)
    assert np.array_equal(back.offset, T.offset)
    assert dump_transform_text(T).startswith("LIN1 text kind=lda out=3 in=4")
    with pytest.raises(ParseError, match="LIN1"):
        read_transform(io.BytesIO(b"ABCD" + raw[4:]))
    with pytest.raises(ParseError):
        read_transform(io.BytesIO(raw[:-1]))


def test_manifest(rng, tmp_path):
    X = _aniso_classes(rng, D=4)
    W = whiten_fit(X)
    flow = random_stack(rng, 4, 2)
    with open(tmp_path / "w.lin", "wb") as f:
        write_transform(f, W)
    with open(tmp_path / "f.dnf", "wb") as f:
        write_flow(f, flow)
    write_manifest(tmp_path / "m.txt", ["lengthnorm", "w.lin", "f.dnf"])
    P = read_manifest(tmp_path / "m.txt")
    expect = Pipeline([LinearTransform.lengthnorm(4), W, flow]).apply_array(X.vectors)
    assert np.array_equal(P.apply_array(X.vectors), expect)
    assert isinstance(load_stage(tmp_path / "f.dnf"), type(flow))
    (tmp_path / "bad.txt").write_text("missing.lin\n")
    with pytest.raises(ParseError) as err:
        read_manifest(tmp_path / "bad.txt")
    assert err.value.location == 1
