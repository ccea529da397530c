"""Labeled vector sets, their file formats, open-set splits, trials, and the
synthetic irregular-embedding generator."""

import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import DataError, DimensionMismatchError, InsufficientDataError, ParseError
from .numerics import make_rng

log = logging.getLogger(__name__)

VEC_MAGIC = b"VEC1"
_TEXT_HEADER = re.compile(rb"VEC1[ \t]+[0-9]+[ \t]*\r?\n")


@dataclass(frozen=True)
class VectorSet:
    ids: tuple
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        vectors = np.array(self.vectors, dtype=np.float64, order="C")
        if vectors.ndim == 1 and vectors.size == 0:
            vectors = vectors.reshape(0, 0)
        if vectors.ndim != 2:
            raise DimensionMismatchError("vectors must be a 2-D array")
        if not (len(ids) == len(labels) == vectors.shape[0]):
            raise DimensionMismatchError(
                f"{len(ids)} ids, {len(labels)} labels, {vectors.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise DataError("utterance ids are not unique")
        if not np.all(np.isfinite(vectors)):
            raise DataError("vectors contain non-finite values")
        labels.flags.writeable = False
        vectors.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def classes(self):
        return np.unique(self.labels)

    def with_vectors(self, vectors):
        """Same ids and labels, new vectors (dimension may change)."""
        return VectorSet(self.ids, self.labels, vectors)

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return VectorSet([self.ids[i] for i in index], self.labels[index], self.vectors[index])

    def index_of(self):
        return {u: i for i, u in enumerate(self.ids)}

    def __eq__(self, other):
        if not isinstance(other, VectorSet):
            return NotImplemented
        return (self.ids == other.ids and np.array_equal(self.labels, other.labels)
                and self.vectors.shape == other.vectors.shape
                and np.array_equal(self.vectors, other.vectors))

    __hash__ = None


# file formats

def write_vectors_text(path, X):
    if any(len(u.split()) != 1 for u in X.ids):
        raise DataError("ids must be non-empty and free of whitespace for the text format")
    with open(path, "w") as f:
        f.write(f"VEC1 {X.dim}\n")
        for uid, lab, vec in zip(X.ids, X.labels, X.vectors):
            f.write(f"{uid} {int(lab)} " + " ".join(f"{v:.17g}" for v in vec) + "\n")


def read_vectors_text(path):
    ids, labels, rows = [], [], []
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "VEC1":
            raise ParseError("expected header 'VEC1 <dim>'", path, 1)
        try:
            dim = int(header[1])
        except ValueError:
            raise ParseError(f"bad dimension {header[1]!r}", path, 1) from None
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 2:
                raise ParseError(f"expected {dim + 2} fields, got {len(parts)}", path, lineno)
            try:
                labels.append(int(parts[1]))
                rows.append([float(v) for v in parts[2:]])
            except ValueError as e:
                raise ParseError(str(e), path, lineno) from None
            ids.append(parts[0])
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return VectorSet(ids, labels, vectors)


def write_vectors_binary(path, X):
    """``VEC1`` u32 dim u32 count, then per record: u32 id length, utf-8 id,
    i64 label, dim f64 values.  All little-endian."""
    with open(path, "wb") as f:
        f.write(VEC_MAGIC)
        f.write(struct.pack("<II", X.dim, len(X)))
        for uid, lab, vec in zip(X.ids, X.labels, X.vectors):
            raw = uid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<q", int(lab)))
            f.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def read_vectors_binary(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != VEC_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected 'VEC1'", path, 0)
    if len(data) < 12:
        raise ParseError("truncated header", path, 4)
    dim, count = struct.unpack_from("<II", data, 4)
    if count * (12 + 8 * dim) > len(data) - 12:
        raise ParseError(f"header claims {count} records of dim {dim}; file too short", path, 4)
    pos = 12
    ids, labels = [], []
    vectors = np.empty((count, dim))
    for r in range(count):
        try:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n + 8 + 8 * dim > len(data):
                raise struct.error("short record")
            ids.append(data[pos:pos + n].decode("utf-8"))
            pos += n
            (lab,) = struct.unpack_from("<q", data, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise ParseError(f"record {r}: {e}", path, pos) from None
        labels.append(lab)
        vectors[r] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos)
        pos += 8 * dim
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes", path, pos)
    return VectorSet(ids, labels, vectors)


def read_vectors(path):
    """Read either format, sniffing the first bytes."""
    with open(path, "rb") as f:
        head = f.read(64)
    if head[:4] != VEC_MAGIC:
        raise ParseError(f"bad magic {head[:4]!r}, expected 'VEC1'", path, 0)
    # the binary dim field can itself start with a space byte (dim 32)
    if _TEXT_HEADER.match(head):
        return read_vectors_text(path)
    return read_vectors_binary(path)


def write_vectors(path, X, binary=None):
    """Write ``X``; binary unless the path ends in ``.txt`` or ``binary=False``."""
    if binary is None:
        binary = not str(path).endswith(".txt")
    (write_vectors_binary if binary else write_vectors_text)(path, X)


# synthetic data

@dataclass
class SynthConfig:
    classes: int = 50
    samples_per_class: int = 200
    dim: int = 20
    mean_spread: float = 3.0
    cov_scale_range: tuple = (0.5, 2.0)
    skew_strength: float = 0.3
    tail_strength: float = 0.1
    seed: int = 0
    # None: independent Haar rotation per class.  A float tilts one shared
    # rotation per class by a random rotation of that angular scale, with
    # scales sorted so classes share a dominant axis ordering.
    orientation_spread: float = None
    # strength of a shared monotone cubic map applied to all classes in a
    # random rotated frame; 0 disables it
    global_warp: float = 0.0

    def __post_init__(self):
        lo, hi = self.cov_scale_range
        if self.classes < 1 or self.samples_per_class < 1 or self.dim < 1:
            raise ValueError("counts must be at least 1")
        if not 0 < lo <= hi:
            raise ValueError("cov_scale_range must satisfy 0 < lo <= hi")
        if self.skew_strength < 0 or self.tail_strength < 0 or self.mean_spread < 0:
            raise ValueError("strengths must be non-negative")
        if self.orientation_spread is not None and self.orientation_spread < 0:
            raise ValueError("orientation_spread must be non-negative")
        if self.global_warp < 0:
            raise ValueError("global_warp must be non-negative")


def random_rotation(rng, dim):
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def synth_generate(cfg, return_truth=False):
    """Classes with random means, anisotropic rotated covariances and a
    per-axis quadratic (skew) plus cubic (tail) warp of a standard normal base.

    Args:
        cfg: a ``SynthConfig``.
        return_truth: also return the class means (K, D) and covariance
            factors (K, D, D) used before any warp.

    Returns:
        A ``VectorSet`` with ids ``c<class>_u<index>`` and integer labels,
        or ``(X, means, factors)`` when ``return_truth`` is set.
    """
    rng = make_rng(cfg.seed)
    D = cfg.dim
    lo, hi = cfg.cov_scale_range
    spread = cfg.orientation_spread
    base = random_rotation(rng, D) if spread is not None else None
    ids, labels, rows, means, factors = [], [], [], [], []
    for c in range(cfg.classes):
        mu = rng.normal(0.0, cfg.mean_spread, size=D)
        scales = rng.uniform(lo, hi, size=D)
        if base is None:
            L = random_rotation(rng, D) * scales
        else:
            A = rng.normal(size=(D, D))
            tilt = expm(spread * (A - A.T) / (2.0 * np.sqrt(D)))
            L = base @ tilt * np.sort(scales)[::-1]
        a = rng.uniform(0.0, cfg.skew_strength, size=D) * rng.choice([-1.0, 1.0], size=D)
        b = rng.uniform(0.0, cfg.tail_strength, size=D)
        s = rng.normal(size=(cfg.samples_per_class, D))
        u = s + a * s ** 2 + b * s ** 3
        rows.append(mu + u @ L.T)
        means.append(mu)
        factors.append(L)
        labels.extend([c] * cfg.samples_per_class)
        ids.extend(f"c{c:04d}_u{i:04d}" for i in range(cfg.samples_per_class))
    V = np.vstack(rows)
    if cfg.global_warp > 0:
        V = _global_warp(V, random_rotation(rng, D), cfg.global_warp)
    X = VectorSet(ids, labels, V)
    if return_truth:
        return X, np.array(means), np.array(factors)
    return X


def _global_warp(V, R, beta):
    # t -> t + beta t^3 per axis of the frame R, in units of the overall spread
    m = V.mean(axis=0)
    s = (V - m).std()
    T = (V - m) @ R / s
    return m + s * (T + beta * T ** 3) @ R.T


def gaussian_mixture_2d(n, seed):
    """Three-component 2-D mixture used for the vanilla-flow demonstration."""
    rng = make_rng(seed)
    means = np.array([[-2.0, -1.0], [2.0, -1.0], [0.0, 2.0]])
    covs = [np.array([[0.6, 0.25], [0.25, 0.4]]),
            np.array([[0.4, -0.2], [-0.2, 0.6]]),
            np.array([[0.8, 0.0], [0.0, 0.3]])]
    comp = rng.integers(0, 3, size=n)
    out = np.empty((n, 2))
    for k in range(3):
        idx = np.flatnonzero(comp == k)
        out[idx] = rng.multivariate_normal(means[k], covs[k], size=idx.size)
    return VectorSet([f"m{i:06d}" for i in range(n)], comp, out)


# splits and trials

def split_open_set(X, train_fraction, seed):
    """Class-disjoint split; ``round(fraction * n_classes)`` classes go to train."""
    classes = X.classes()
    if len(classes) < 4:
        raise InsufficientDataError("open-set split needs at least 4 classes")
    n_train = int(round(train_fraction * len(classes)))
    if n_train <= 0 or n_train >= len(classes):
        raise InsufficientDataError(
            f"train fraction {train_fraction} leaves one side of the split empty")
    rng = make_rng(seed)
    chosen = set(rng.permutation(classes)[:n_train].tolist())
    in_train = np.array([lab in chosen for lab in X.labels])
    return X.subset(in_train), X.subset(~in_train)


@dataclass
class TrialList:
    enroll: list = field(default_factory=list)
    test: list = field(default_factory=list)
    is_target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.enroll)

    @property
    def n_target(self):
        return int(np.sum(self.is_target))

    @property
    def n_nontarget(self):
        return len(self) - self.n_target


def make_trials(X, max_imposter_per_target=0, seed=0):
    """All same-class pairs as targets plus imposter pairs.

    With ``max_imposter_per_target == 0`` every cross-class pair is used,
    otherwise at most ``cap * n_targets`` imposters are drawn without
    replacement.
    """
    classes = X.classes()
    if len(classes) < 2:
        raise InsufficientDataError("trials need at least 2 classes")
    N = len(X)
    iu, ju = np.triu_indices(N, k=1)
    same = X.labels[iu] == X.labels[ju]
    for c in classes:
        if np.sum(X.labels == c) < 2:
            log.warning("class %d has a single sample and contributes no target trials", c)
    t_idx = np.flatnonzero(same)
    n_idx = np.flatnonzero(~same)
    if max_imposter_per_target > 0:
        cap = max_imposter_per_target * len(t_idx)
        if cap < len(n_idx):
            rng = make_rng(seed)
            n_idx = np.sort(rng.choice(n_idx, size=cap, replace=False))
    keep = np.concatenate([t_idx, n_idx])
    keep.sort()
    ids = X.ids
    return TrialList([ids[i] for i in iu[keep]], [ids[j] for j in ju[keep]], same[keep].copy())


def write_trials(path, trials):
    with open(path, "w") as f:
        for e, t, tgt in zip(trials.enroll, trials.test, trials.is_target):
            f.write(f"{e} {t} {'target' if tgt else 'nontarget'}\n")


def read_trials(path):
    enroll, test, tgt = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ParseError("expected 'enroll_id test_id target|nontarget'", path, lineno)
            enroll.append(parts[0])
            test.append(parts[1])
            tgt.append(parts[2] == "target")
    return TrialList(enroll, test, np.array(tgt, dtype=bool))


def write_scores(path, trials, scores):
    with open(path, "w") as f:
        for e, t, s in zip(trials.enroll, trials.test, scores):
            f.write(f"{e} {t} {s:.17g}\n")


def read_scores(path):
    """Returns ``{(enroll, test): score}``."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError("expected 'enroll_id test_id score'", path, lineno)
            try:
                out[(parts[0], parts[1])] = float(parts[2])
            except ValueError:
                raise ParseError(f"bad score {parts[2]!r}", path, lineno) from None
    return out
