"""Linear preprocessing: length normalization, whitening, PCA, LDA and LDA/N,
plus pipelines that chain linear stages with trained flows."""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import VectorSet
from .errors import (DegenerateScatterError, DimensionMismatchError, InsufficientDataError,
                     ParseError, ZeroNormError)
from .flow import FLOW_MAGIC, FlowStack, read_flow
from .numerics import regularize, sym_eig

log = logging.getLogger(__name__)

LIN_MAGIC = b"LIN1"
KINDS = ("whiten", "pca", "lda", "ldan", "lengthnorm", "identity")

# defaults for lambda in the lambda * S_b + S_w denominator, by back-end
LDA_LAMBDA_COSINE = 0.1
LDA_LAMBDA_PLDA = 0.0


@dataclass(frozen=True)
class LinearTransform:
    """``y = projection @ (x - offset)``; ``kind == "lengthnorm"`` is a marker
    stage that rescales each vector to norm sqrt(D) and ignores the matrix."""

    projection: np.ndarray
    offset: np.ndarray
    kind: str

    def __post_init__(self):
        P = np.array(self.projection, dtype=np.float64)
        o = np.array(self.offset, dtype=np.float64).reshape(-1)
        if P.ndim != 2 or P.shape[1] != o.size:
            raise DimensionMismatchError(f"projection {P.shape} does not match offset {o.shape}")
        if P.shape[0] > P.shape[1]:
            raise DimensionMismatchError("out_dim exceeds in_dim")
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(o))):
            raise DegenerateScatterError("transform has non-finite entries")
        P.flags.writeable = False
        o.flags.writeable = False
        object.__setattr__(self, "projection", P)
        object.__setattr__(self, "offset", o)

    @property
    def in_dim(self):
        return self.projection.shape[1]

    @property
    def out_dim(self):
        return self.projection.shape[0]

    def apply_array(self, A):
        A = np.asarray(A, dtype=np.float64)
        if A.shape[-1] != self.in_dim:
            raise DimensionMismatchError(f"expected dim {self.in_dim}, got {A.shape[-1]}")
        if self.kind == "lengthnorm":
            return length_normalize(A)
        return (A - self.offset) @ self.projection.T

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros(dim), "identity")

    @classmethod
    def lengthnorm(cls, dim):
        return cls(np.eye(dim), np.zeros(dim), "lengthnorm")


def length_normalize(x):
    """Scale vector(s) to Euclidean norm sqrt(D)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("cannot length-normalize a zero vector")
    return x * (np.sqrt(x.shape[-1]) / norms)


def compute_scatter(X):
    """Between- and within-class covariance, both weighted by class size.

    ``S_w`` averages the per-class (1/n) covariances with weights n_c/N and
    ``S_b`` is the covariance of class means about the global mean with the
    same weights, so ``S_b + S_w`` is the total (1/N) covariance.
    """
    classes, inverse, counts = np.unique(X.labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise DegenerateScatterError("scatter needs at least 2 classes")
    if counts.max() < 2:
        raise InsufficientDataError("scatter needs a class with at least 2 samples")
    V = X.vectors
    N, D = V.shape
    mean = V.mean(axis=0)
    sums = np.zeros((len(classes), D))
    np.add.at(sums, inverse, V)
    class_means = sums / counts[:, None]
    centered = V - class_means[inverse]
    S_w = centered.T @ centered / N
    dm = class_means - mean
    S_b = (dm * counts[:, None]).T @ dm / N
    return 0.5 * (S_b + S_b.T), 0.5 * (S_w + S_w.T), mean


def _regularized(S, what):
    S_reg, added = regularize(S)
    if added:
        log.warning("%s is ill-conditioned; added a ridge before inversion", what)
    return S_reg


def _inv_sqrt(S):
    w, V = sym_eig(S)
    return (V / np.sqrt(w)) @ V.T


def lda_fit(X, out_dim, lam=0.0):
    """LDA on the pencil ``(S_b, lam*S_b + S_w)``.

    Rows are the leading generalized eigendirections, scaled so the projected
    within-class covariance is the identity; projected ``S_b`` and ``S_w`` are
    both diagonal.  ``out_dim`` may exceed ``classes - 1``; trailing rows are
    then the whitened directions of least between-class variance.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    S_b, S_w, mean = compute_scatter(X)
    D = S_b.shape[0]
    if out_dim > D:
        log.warning("LDA out_dim %d exceeds dimension %d; clipped", out_dim, D)
        out_dim = D
    if out_dim < 1:
        raise ValueError("out_dim must be at least 1")
    W_is = _inv_sqrt(_regularized(lam * S_b + S_w, "lambda*S_b + S_w"))
    _, V = sym_eig(W_is @ S_b @ W_is)
    rows = V[:, :out_dim].T @ W_is
    sw = np.einsum("kd,de,ke->k", rows, S_w, rows)
    rows = rows / np.sqrt(sw)[:, None]
    return LinearTransform(rows, mean, "lda")


def ldan_fit(X):
    """Within-class whitening only: symmetric ``S_w^{-1/2}``, no rotation, no
    dimension reduction."""
    _, S_w, mean = compute_scatter(X)
    return LinearTransform(_inv_sqrt(_regularized(S_w, "S_w")), mean, "ldan")


def _total_cov(X):
    V = X.vectors
    if len(V) < 2:
        raise InsufficientDataError("need at least 2 vectors")
    mean = V.mean(axis=0)
    C = (V - mean).T @ (V - mean) / len(V)
    return 0.5 * (C + C.T), mean


def whiten_fit(X):
    """PCA whitening of the total covariance (rows ordered by variance)."""
    C, mean = _total_cov(X)
    w, V = sym_eig(_regularized(C, "total covariance"))
    return LinearTransform(V.T / np.sqrt(w)[:, None], mean, "whiten")


def pca_fit(X, out_dim):
    C, mean = _total_cov(X)
    D = C.shape[0]
    if out_dim > D:
        log.warning("PCA out_dim %d exceeds dimension %d; clipped", out_dim, D)
        out_dim = D
    _, V = sym_eig(C)
    return LinearTransform(V[:, :out_dim].T, mean, "pca")


class Pipeline:
    """Ordered stages, each a ``LinearTransform`` or a ``FlowStack``."""

    def __init__(self, stages):
        self.stages = list(stages)
        dim = None
        for s in self.stages:
            d_in, d_out = _stage_dims(s)
            if dim is not None and d_in != dim:
                raise DimensionMismatchError(f"stage expects dim {d_in} but receives {dim}")
            dim = d_out

    def apply_array(self, A):
        for s in self.stages:
            A = _apply_stage(s, A)
        return A


def _stage_dims(stage):
    if isinstance(stage, FlowStack):
        return stage.dim, stage.dim
    return stage.in_dim, stage.out_dim


def _apply_stage(stage, A):
    if isinstance(stage, FlowStack):
        z, _ = stage.normalize(np.atleast_2d(A))
        return z
    return stage.apply_array(A)


def apply(T, X):
    """Apply a transform, flow or pipeline to a ``VectorSet``; labels and ids
    are carried through unchanged."""
    if isinstance(T, Pipeline):
        return X.with_vectors(T.apply_array(X.vectors))
    return X.with_vectors(_apply_stage(T, X.vectors))


# serialization

_KIND_CODES = {k: i for i, k in enumerate(KINDS)}


def write_transform(stream, T):
    """``LIN1`` u32 version u32 kind u32 out u32 in, f64 offset[in], f64 projection[out*in]."""
    stream.write(LIN_MAGIC)
    stream.write(struct.pack("<IIII", 1, _KIND_CODES[T.kind], T.out_dim, T.in_dim))
    stream.write(np.ascontiguousarray(T.offset, dtype="<f8").tobytes())
    stream.write(np.ascontiguousarray(T.projection, dtype="<f8").tobytes())


def read_transform(stream, path=None):
    magic = stream.read(4)
    if magic != LIN_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected 'LIN1'", path, 0)
    head = stream.read(16)
    if len(head) != 16:
        raise ParseError("truncated header", path, 4)
    version, kind, out_dim, in_dim = struct.unpack("<IIII", head)
    if version != 1 or kind >= len(KINDS):
        raise ParseError(f"unsupported version {version} / kind {kind}", path, 4)
    body = stream.read(8 * (in_dim + out_dim * in_dim))
    if len(body) != 8 * (in_dim + out_dim * in_dim):
        raise ParseError("truncated body", path, 20)
    vals = np.frombuffer(body, dtype="<f8")
    return LinearTransform(vals[in_dim:].reshape(out_dim, in_dim), vals[:in_dim], KINDS[kind])


def dump_transform_text(T):
    lines = [f"LIN1 text kind={T.kind} out={T.out_dim} in={T.in_dim}",
             "offset " + " ".join(f"{v:.17g}" for v in T.offset)]
    lines += ["row " + " ".join(f"{v:.17g}" for v in r) for r in T.projection]
    return "\n".join(lines) + "\n"


def save_transform(path, T):
    with open(path, "wb") as f:
        write_transform(f, T)


def load_stage(path):
    """Load a stage file by sniffing its magic (``LIN1`` or ``DNF1``)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        f.seek(0)
        if magic == LIN_MAGIC:
            return read_transform(f, path)
        if magic == FLOW_MAGIC:
            return read_flow(f, path)
    raise ParseError(f"unknown stage magic {magic!r}", path, 0)


def write_manifest(path, entries):
    """Manifest: one stage per line, a file path relative to the manifest or
    the word ``lengthnorm``."""
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e}\n")


def read_manifest(path, dim=None):
    base = os.path.dirname(os.path.abspath(path))
    stages = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            entry = line.strip()
            if not entry or entry.startswith("#"):
                continue
            if entry == "lengthnorm":
                stages.append(("lengthnorm", lineno))
                continue
            p = entry if os.path.isabs(entry) else os.path.join(base, entry)
            if not os.path.exists(p):
                raise ParseError(f"stage file {entry!r} not found", path, lineno)
            stages.append((load_stage(p), lineno))
    # resolve lengthnorm markers against their neighbours' dimension
    resolved = []
    cur = dim
    for s, lineno in stages:
        if isinstance(s, str):
            if cur is None:
                nxt = next((t for t, _ in stages if not isinstance(t, str)), None)
                if nxt is None:
                    raise ParseError("cannot infer dimension for lengthnorm", path, lineno)
                cur = _stage_dims(nxt)[0]
            s = LinearTransform.lengthnorm(cur)
        resolved.append(s)
        cur = _stage_dims(s)[1]
    return Pipeline(resolved)
