"""Discriminative normalization flow: class-conditional unit-covariance Gaussian
priors on the latent codes of a MAF, trained by maximum likelihood."""

import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import VectorSet
from .errors import (DimensionMismatchError, InsufficientDataError, MissingClassError,
                     MissingPriorError, NumericError, ParseError, TrainingDivergedError)
from .flow import FlowStack, read_flow, write_flow
from .metrics import discrimination_report, regulation_report
from .numerics import AdamState, adam_step, make_rng

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
PRIOR_MAGIC = b"PRI1"

TRACE_COLUMNS = ("epoch", "nll", "avg_kurtosis", "avg_skewness", "pc1_dir_var", "pc2_dir_var",
                 "avg_pc_dir_var", "pc_shape_var_avg", "between_var", "within_var", "bw_ratio",
                 "ce_inner", "ce_cosine", "train_eer_cosine")


class ClassPriors:
    """Per-class latent means; every class shares the identity covariance."""

    def __init__(self, labels, means):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        means = np.array(means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != labels.size:
            raise DimensionMismatchError("need one mean row per label")
        if not np.all(np.isfinite(means)):
            raise NumericError("prior means must be finite")
        order = np.argsort(labels, kind="stable")
        self.labels = labels[order]
        self.means = means[order]
        if np.unique(self.labels).size != self.labels.size:
            raise ValueError("duplicate class labels in priors")

    @classmethod
    def from_dict(cls, means):
        keys = sorted(means)
        return cls(keys, np.array([means[k] for k in keys]))

    @classmethod
    def from_data(cls, X):
        """Per-class sample means of ``X``."""
        labels, inverse, counts = np.unique(X.labels, return_inverse=True, return_counts=True)
        sums = np.zeros((len(labels), X.dim))
        np.add.at(sums, inverse, X.vectors)
        return cls(labels, sums / counts[:, None])

    @property
    def dim(self):
        return self.means.shape[1]

    def as_dict(self):
        return {int(l): m for l, m in zip(self.labels, self.means)}

    def rows_for(self, labels):
        """Row index into ``means`` for every label."""
        idx = np.searchsorted(self.labels, labels)
        idx = np.minimum(idx, len(self.labels) - 1)
        bad = self.labels[idx] != labels
        if np.any(bad):
            raise MissingPriorError(int(np.asarray(labels)[bad][0]))
        return idx

    def copy(self):
        return ClassPriors(self.labels.copy(), self.means.copy())


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 300
    lr: float = 0.003
    seed: int = 0
    mode: str = "dnf"
    n_blocks: int = 10
    hidden_sizes: tuple = None
    mean_update: str = "gradient"
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 3
    probe_classes: int = 50
    probe_samples: int = 100
    diag_k: int = 10
    diag_min_class_samples: int = 25
    diagnostics: bool = True
    # global gradient-norm cap per minibatch; None disables
    grad_clip: float = 50.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.mode not in ("dnf", "vanilla_nf"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mean_update not in ("gradient", "reestimate"):
            raise ValueError(f"unknown mean_update {self.mean_update!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")


def _gaussian_nll(stack, vectors, means_per_row):
    """Mean negative log-likelihood and its gradients.

    Returns ``(nll, flow_grad, d_means_per_row)``.
    """
    z, logdet, caches = stack.forward_with_cache(vectors)
    N, D = z.shape
    diff = z - means_per_row
    per = -0.5 * D * LOG_2PI - 0.5 * np.sum(diff * diff, axis=1) + logdet
    nll = -float(np.mean(per))
    d_z = diff / N
    d_logdet = np.full(N, -1.0 / N)
    flow_grad, _ = stack.backward(caches, d_z, d_logdet)
    return nll, flow_grad, -d_z


def dnf_loss(stack, priors, vectors, labels):
    """DNF objective on a batch.

    ``nll = -mean_i [ ln N(z_i; mu_{y_i}, I) + ln|det dz_i/dx_i| ]``

    Returns ``(nll, flow_grad, mean_grad)`` where ``mean_grad`` has the shape
    of ``priors.means``.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if priors.dim != stack.dim:
        raise DimensionMismatchError("prior and flow dimensions differ")
    rows = priors.rows_for(labels)
    nll, g_flow, d_rows = _gaussian_nll(stack, vectors, priors.means[rows])
    g_means = np.zeros_like(priors.means)
    np.add.at(g_means, rows, d_rows)
    return nll, g_flow, g_means


def nf_loss(stack, vectors):
    """Vanilla flow objective with a single N(0, I) prior; returns ``(nll, flow_grad)``."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    nll, g_flow, _ = _gaussian_nll(stack, vectors, np.zeros((1, stack.dim)))
    return nll, g_flow


def dataset_nll(stack, vectors, labels=None, priors=None, chunk=4096):
    """Mean NLL over a whole set without gradients."""
    total = 0.0
    N = len(vectors)
    D = stack.dim
    for s in range(0, N, chunk):
        z, logdet = stack.normalize(vectors[s:s + chunk])
        if priors is not None:
            z = z - priors.means[priors.rows_for(labels[s:s + chunk])]
        total += float(np.sum(0.5 * D * LOG_2PI + 0.5 * np.sum(z * z, axis=1) - logdet))
    return total / N


def normalize_set(stack, X):
    """Latent codes of every vector; ids and labels unchanged."""
    if X.dim != stack.dim:
        raise DimensionMismatchError(f"flow dim {stack.dim} != data dim {X.dim}")
    z, _ = stack.normalize(X.vectors)
    return X.with_vectors(z)


@dataclass
class DiagnosticTrace:
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self):
        out = io.StringIO()
        out.write(",".join(TRACE_COLUMNS) + "\n")
        for r in self.rows:
            out.write(",".join(str(r["epoch"]) if c == "epoch" else f"{r[c]:.10g}"
                               for c in TRACE_COLUMNS) + "\n")
        return out.getvalue()


@dataclass
class TrainResult:
    stack: FlowStack
    priors: ClassPriors
    trace: DiagnosticTrace
    epochs_run: int


def _select_probe(X, cfg, rng):
    classes = X.classes()
    if len(classes) > cfg.probe_classes:
        classes = np.sort(rng.choice(classes, size=cfg.probe_classes, replace=False))
    picked = []
    for c in classes:
        idx = np.flatnonzero(X.labels == c)
        if len(idx) > cfg.probe_samples:
            idx = np.sort(rng.choice(idx, size=cfg.probe_samples, replace=False))
        picked.append(idx)
    return X.subset(np.concatenate(picked))


def _diagnostics(stack, priors, probe, cfg, epoch, nll):
    row = {c: float("nan") for c in TRACE_COLUMNS}
    row["epoch"] = epoch
    row["nll"] = nll
    if not cfg.diagnostics:
        return row
    Z = normalize_set(stack, probe)
    try:
        rep = regulation_report(Z, k=cfg.diag_k, min_class_samples=cfg.diag_min_class_samples)
        row.update(avg_kurtosis=rep.avg_kurtosis, avg_skewness=rep.avg_skewness,
                   pc1_dir_var=rep.pc_dir_var[0],
                   pc2_dir_var=rep.pc_dir_var[1] if len(rep.pc_dir_var) > 1 else float("nan"),
                   avg_pc_dir_var=rep.avg_pc_dir_var, pc_shape_var_avg=rep.pc_shape_var_avg)
    except InsufficientDataError:
        pass
    if len(Z.classes()) >= 2:
        means = priors.as_dict() if priors is not None else ClassPriors.from_data(Z).as_dict()
        disc = discrimination_report(Z, means)
        row.update(between_var=disc.between_var, within_var=disc.within_var,
                   bw_ratio=disc.bw_ratio, ce_inner=disc.ce_inner, ce_cosine=disc.ce_cosine,
                   train_eer_cosine=disc.train_eer_cosine)
    return row


def train(X, cfg, priors=None):
    """Shuffled-minibatch Adam on the DNF (or vanilla flow) objective.

    Prior means start at the per-class data means (or ``priors``) and are
    learned jointly with the flow, or re-estimated in closed form after each
    epoch when ``cfg.mean_update == "reestimate"``.  Row 0 of the trace
    describes the untrained identity flow.  Raises ``TrainingDivergedError``
    carrying the last good ``(stack, priors)`` when the loss stops being
    finite.
    """
    D = X.dim
    if D < 2:
        raise InsufficientDataError("flow training needs D >= 2")
    dnf_mode = cfg.mode == "dnf"
    classes, counts = np.unique(X.labels, return_counts=True)
    if dnf_mode and len(classes) < 2:
        raise InsufficientDataError("DNF training needs at least 2 classes")
    rng = make_rng(cfg.seed)
    stack = FlowStack.create(D, cfg.n_blocks, cfg.hidden_sizes, rng=rng)
    if dnf_mode:
        if priors is None:
            priors = ClassPriors.from_data(X)
        else:
            priors = priors.copy()
            missing = set(classes.tolist()) - set(priors.labels.tolist())
            if missing:
                raise MissingPriorError(min(missing))
        empty = set(priors.labels.tolist()) - set(classes.tolist())
        if empty:
            raise MissingClassError(f"priors name classes with no data: {sorted(empty)[:5]}")
    else:
        priors = None
    learn_means = dnf_mode and cfg.mean_update == "gradient"
    n_flow = stack.num_params()
    params = stack.get_flat()
    if learn_means:
        params = np.concatenate([params, priors.means.ravel()])
    adam = AdamState.zeros(params.size, lr=cfg.lr)
    # separate stream so probe settings never change the training path
    probe = _select_probe(X, cfg, rng.spawn(1)[0])
    V, L = X.vectors, X.labels

    def full_nll():
        return dataset_nll(stack, V, L, priors)

    trace = DiagnosticTrace()
    nll = full_nll()
    trace.rows.append(_diagnostics(stack, priors, probe, cfg, 0, nll))
    best, stale, epochs_run = nll, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        good = (stack.copy(), priors.copy() if priors is not None else None)
        order = rng.permutation(len(X))
        try:
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                if dnf_mode:
                    loss, g_flow, g_means = dnf_loss(stack, priors, V[idx], L[idx])
                else:
                    loss, g_flow = nf_loss(stack, V[idx])
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                grad = np.concatenate([g_flow, g_means.ravel()]) if learn_means else g_flow
                norm = float(np.linalg.norm(grad))
                if not np.isfinite(norm):
                    raise NumericError("non-finite gradient")
                if cfg.grad_clip is not None and norm > cfg.grad_clip:
                    # one outlying batch must not dominate Adam's moments
                    grad = grad * (cfg.grad_clip / norm)
                params, _ = adam_step(params, grad, adam)
                stack.set_flat(params[:n_flow])
                if learn_means:
                    priors.means = params[n_flow:].reshape(priors.means.shape).copy()
            if dnf_mode and not learn_means:
                Z = normalize_set(stack, X)
                priors = ClassPriors.from_data(Z)
            nll = full_nll()
            if not np.isfinite(nll):
                raise NumericError("non-finite loss")
        except NumericError as e:
            log.error("training diverged in epoch %d: %s", epoch, e)
            raise TrainingDivergedError(epoch, good) from e
        epochs_run = epoch
        trace.rows.append(_diagnostics(stack, priors, probe, cfg, epoch, nll))
        log.info("epoch %d nll %.6f", epoch, nll)
        if best - nll < cfg.early_stop_tol:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop after epoch %d", epoch)
                break
        else:
            stale = 0
        best = min(best, nll)
    return TrainResult(stack, priors, trace, epochs_run)


# checkpoints: flow container followed by an optional prior-means section

def write_checkpoint(stream, stack, priors=None):
    """Flow container, then ``PRI1`` u32 K u32 D and K records of i64 label
    plus D f64 means (omitted for vanilla flows)."""
    write_flow(stream, stack)
    if priors is not None:
        stream.write(PRIOR_MAGIC)
        stream.write(struct.pack("<II", len(priors.labels), priors.dim))
        for lab, m in zip(priors.labels, priors.means):
            stream.write(struct.pack("<q", int(lab)))
            stream.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_checkpoint(stream, path=None):
    stack = read_flow(stream, path)
    magic = stream.read(4)
    if not magic:
        return stack, None
    if magic != PRIOR_MAGIC:
        raise ParseError(f"bad section magic {magic!r}, expected 'PRI1'", path, stream.tell() - 4)
    head = stream.read(8)
    if len(head) != 8:
        raise ParseError("truncated prior header", path, stream.tell())
    K, D = struct.unpack("<II", head)
    labels, means = [], []
    for _ in range(K):
        rec = stream.read(8 + 8 * D)
        if len(rec) != 8 + 8 * D:
            raise ParseError("truncated prior record", path, stream.tell())
        labels.append(struct.unpack("<q", rec[:8])[0])
        means.append(np.frombuffer(rec[8:], dtype="<f8"))
    return stack, ClassPriors(labels, np.array(means).reshape(K, D))


def save_checkpoint(path, stack, priors=None):
    with open(path, "wb") as f:
        write_checkpoint(f, stack, priors)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return read_checkpoint(f, path)
