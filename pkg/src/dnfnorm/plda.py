"""Two-covariance PLDA: ``x = m + y + w`` with ``y ~ N(0, Sb)`` shared by all
samples of a class and ``w ~ N(0, Sw)`` per sample."""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientDataError, NumericError, ParseError
from .linear import compute_scatter
from .numerics import regularize

log = logging.getLogger(__name__)

PLDA_MAGIC = b"PLD1"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PldaModel:
    mean: np.ndarray
    sigma_b: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        for name in ("mean", "sigma_b", "sigma_w"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        D = self.mean.size
        if self.sigma_b.shape != (D, D) or self.sigma_w.shape != (D, D):
            raise DataError("PLDA covariance shapes do not match the mean")

    @property
    def dim(self):
        return self.mean.size


def _logdet(S):
    sign, ld = np.linalg.slogdet(S)
    if sign <= 0:
        raise NumericError("covariance is not positive definite")
    return ld


def _class_stats(X):
    classes, inverse, counts = np.unique(X.labels, return_inverse=True, return_counts=True)
    sums = np.zeros((len(classes), X.dim))
    np.add.at(sums, inverse, X.vectors)
    return classes, inverse, counts, sums


def plda_loglik(model, X):
    """Exact total log-likelihood of ``X`` under the marginal PLDA model.

    For a class with n samples, mean x̄ and scatter S about x̄::

        -1/2 [ nD ln2π + (n-1) ln|Sw| + ln|Sw + n Sb|
               + tr(Sw^-1 S) + n (x̄-m)^T (Sw + n Sb)^-1 (x̄-m) ]
    """
    _, inverse, counts, sums = _class_stats(X)
    means = sums / counts[:, None]
    centered = X.vectors - means[inverse]
    D = X.dim
    Sw_inv = np.linalg.inv(model.sigma_w)
    ld_w = _logdet(model.sigma_w)
    total = -0.5 * np.einsum("nd,de,ne->", centered, Sw_inv, centered)
    for n in np.unique(counts):
        sel = counts == n
        C = model.sigma_w + n * model.sigma_b
        dm = means[sel] - model.mean
        quad = np.einsum("kd,de,ke->", dm, np.linalg.inv(C), dm)
        k = int(sel.sum())
        total -= 0.5 * (k * (n * D * LOG_2PI + (n - 1) * ld_w + _logdet(C)) + n * quad)
    return float(total)


def plda_fit(X, iters=10, tol=1e-6, return_history=False):
    """EM estimation starting from the moment initialization.

    The E-step computes the exact posterior of each class offset from the
    per-class count and sum; the M-step re-estimates the mean, ``Sb`` and
    ``Sw``.  Stops early when the log-likelihood gain drops below
    ``tol * |LL|``.  ``iters=0`` returns the initialization: global mean,
    class-weighted between-class scatter and pooled within-class scatter.
    """
    classes, inverse, counts, sums = _class_stats(X)
    if len(classes) < 2:
        raise InsufficientDataError("PLDA needs at least 2 classes")
    if len(X) < 2 * len(classes):
        log.warning("fewer than 2 samples per class on average; PLDA estimates will be poor")
    S_b, S_w, mean = compute_scatter(X)
    model = PldaModel(mean, S_b, _checked_sw(S_w))
    V = X.vectors
    N, D = V.shape
    K = len(classes)
    history = [plda_loglik(model, X)] if (iters > 0 or return_history) else []
    for _ in range(iters):
        Sb_inv = np.linalg.inv(_checked_sb(model.sigma_b))
        Sw_inv = np.linalg.inv(model.sigma_w)
        y_hat = np.empty((K, D))
        R_b = np.zeros((D, D))
        R_w = np.zeros((D, D))
        for n in np.unique(counts):
            sel = np.flatnonzero(counts == n)
            C = np.linalg.inv(Sb_inv + n * Sw_inv)
            C = 0.5 * (C + C.T)
            y_hat[sel] = (sums[sel] - n * model.mean) @ Sw_inv.T @ C.T
            R_b += len(sel) * C
            R_w += len(sel) * n * C
        new_mean = (V - y_hat[inverse]).mean(axis=0)
        resid = V - new_mean - y_hat[inverse]
        Sb = (y_hat.T @ y_hat + R_b) / K
        Sw = (resid.T @ resid + R_w) / N
        model = PldaModel(new_mean, 0.5 * (Sb + Sb.T), _checked_sw(0.5 * (Sw + Sw.T)))
        ll = plda_loglik(model, X)
        gain = ll - history[-1]
        history.append(ll)
        if abs(gain) < tol * abs(ll):
            break
    return (model, history) if return_history else model


def _checked_sw(Sw):
    Sw_reg, added = regularize(Sw)
    if added:
        log.warning("within-class covariance is singular; regularized")
    return Sw_reg


def _checked_sb(Sb):
    Sb_reg, added = regularize(Sb)
    if added:
        log.warning("between-class covariance is singular; regularized")
    return Sb_reg


class PldaScorer:
    """Precomputed quadratic form of the same/different-class log-likelihood ratio.

    With ``T = Sb + Sw`` and mean-removed ``e``, ``t``::

        llr = 1/2 e'Qe + 1/2 t'Qt + e'Pt + c
        Q = T^-1 - (T - Sb T^-1 Sb)^-1
        P = T^-1 Sb (T - Sb T^-1 Sb)^-1
        c = -1/2 (ln|T - Sb T^-1 Sb| - ln|T|)
    """

    def __init__(self, model):
        self.model = model
        T = model.sigma_b + model.sigma_w
        T_inv = np.linalg.inv(T)
        B = model.sigma_b
        schur = T - B @ T_inv @ B
        schur_inv = np.linalg.inv(schur)
        Q = T_inv - schur_inv
        P = T_inv @ B @ schur_inv
        self.Q = 0.5 * (Q + Q.T)
        self.P = 0.5 * (P + P.T)
        self.const = -0.5 * (_logdet(schur) - _logdet(T))

    def score(self, e, t):
        m = self.model.mean
        e = np.asarray(e, dtype=np.float64) - m
        t = np.asarray(t, dtype=np.float64) - m
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
            raise DataError("non-finite input to PLDA scoring")
        qe = np.einsum("...d,de,...e->...", e, self.Q, e)
        qt = np.einsum("...d,de,...e->...", t, self.Q, t)
        cross = np.einsum("...d,de,...e->...", e, self.P, t)
        cross_r = np.einsum("...d,de,...e->...", t, self.P, e)
        return 0.5 * (qe + qt) + 0.5 * (cross + cross_r) + self.const


def plda_score(model, e, t):
    """Log-likelihood ratio that ``e`` and ``t`` share a class."""
    return PldaScorer(model).score(e, t)


def plda_score_dense(model, e, t):
    """Same ratio from explicit joint Gaussians (slow; used for checks)."""
    from scipy.stats import multivariate_normal

    T = model.sigma_b + model.sigma_w
    B = model.sigma_b
    D = model.dim
    joint = np.block([[T, B], [B, T]])
    et = np.concatenate([e - model.mean, t - model.mean])
    same = multivariate_normal(np.zeros(2 * D), joint).logpdf(et)
    diff = (multivariate_normal(np.zeros(D), T).logpdf(e - model.mean)
            + multivariate_normal(np.zeros(D), T).logpdf(t - model.mean))
    return same - diff


def write_plda(stream, model):
    """``PLD1`` u32 version u32 dim, f64 mean[D], f64 Sb[D*D], f64 Sw[D*D]."""
    stream.write(PLDA_MAGIC)
    stream.write(struct.pack("<II", 1, model.dim))
    for a in (model.mean, model.sigma_b, model.sigma_w):
        stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_plda(stream, path=None):
    magic = stream.read(4)
    if magic != PLDA_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected 'PLD1'", path, 0)
    head = stream.read(8)
    if len(head) != 8:
        raise ParseError("truncated header", path, 4)
    version, D = struct.unpack("<II", head)
    if version != 1:
        raise ParseError(f"unsupported version {version}", path, 4)
    n = D + 2 * D * D
    body = stream.read(8 * n)
    if len(body) != 8 * n:
        raise ParseError("truncated body", path, 12)
    vals = np.frombuffer(body, dtype="<f8")
    return PldaModel(vals[:D], vals[D:D + D * D].reshape(D, D), vals[D + D * D:].reshape(D, D))


def dump_plda_text(model):
    fmt = lambda a: " ".join(f"{v:.17g}" for v in np.ravel(a))
    return (f"PLD1 text dim={model.dim}\nmean {fmt(model.mean)}\n"
            f"sigma_b {fmt(model.sigma_b)}\nsigma_w {fmt(model.sigma_w)}\n")
