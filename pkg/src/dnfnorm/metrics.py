"""Scoring, equal error rate, and homogeneity/Gaussianality diagnostics."""

import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import VectorSet
from .errors import DataError, InsufficientDataError, MissingPriorError, ZeroNormError
from .linear import compute_scatter
from .numerics import sym_eig


def cosine_score(e, t):
    """Cosine similarity; broadcasts over leading axes."""
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ne = np.linalg.norm(e, axis=-1)
    nt = np.linalg.norm(t, axis=-1)
    if np.any(ne == 0) or np.any(nt == 0):
        raise ZeroNormError("cosine score of a zero vector")
    return np.clip(np.sum(e * t, axis=-1) / (ne * nt), -1.0, 1.0)


def score_trials(X, trials, scorer):
    """Score every trial; ``scorer(E, T)`` takes row-aligned batches."""
    idx = X.index_of()
    try:
        ei = np.array([idx[u] for u in trials.enroll], dtype=np.intp)
        ti = np.array([idx[u] for u in trials.test], dtype=np.intp)
    except KeyError as e:
        raise DataError(f"trial id {e.args[0]!r} not in vector set") from None
    return np.asarray(scorer(X.vectors[ei], X.vectors[ti]), dtype=np.float64)


def operating_points(target_scores, nontarget_scores):
    """False-reject and false-accept rates at every unique score threshold.

    A trial is accepted when its score is >= the threshold.  A final point at
    +inf (reject everything) closes the curve.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise InsufficientDataError("EER needs at least one target and one nontarget score")
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, frr, far


def eer(target_scores, nontarget_scores):
    """Equal error rate and its threshold.

    Walks the threshold sweep until FRR - FAR turns non-negative and
    interpolates linearly between the bracketing operating points.
    """
    thr, frr, far = operating_points(target_scores, nontarget_scores)
    d = frr - far
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(far[i]), float(thr[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    rate = far[i - 1] + a * (far[i] - far[i - 1])
    hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    return float(rate), float(thr[i - 1] + a * (hi - thr[i - 1]))


def trial_eer(scores, is_target):
    scores = np.asarray(scores)
    is_target = np.asarray(is_target, dtype=bool)
    return eer(scores[is_target], scores[~is_target])


def all_pairs_cosine_eer(V, labels):
    """Cosine EER over every unordered pair of distinct rows."""
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError("cosine score of a zero vector")
    U = V / norms[:, None]
    iu, ju = np.triu_indices(len(V), k=1)
    G = U @ U.T
    s = G[iu, ju]
    same = labels[iu] == labels[ju]
    return eer(s[same], s[~same])[0]


# distribution diagnostics

def _moments(p):
    """Population skewness and excess kurtosis along each column."""
    c = p - p.mean(axis=0)
    m2 = np.mean(c ** 2, axis=0)
    m3 = np.mean(c ** 3, axis=0)
    m4 = np.mean(c ** 4, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(m2 > 0, m3 / m2 ** 1.5, 0.0)
        kurt = np.where(m2 > 0, m4 / m2 ** 2 - 3.0, 0.0)
    return skew, kurt


def _mean_direction(vs):
    """Sign-align unit vectors to a common direction and return (aligned, mean)."""
    ref = vs[0]
    for _ in range(3):
        signs = np.where(vs @ ref >= 0, 1.0, -1.0)
        aligned = vs * signs[:, None]
        m = aligned.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm == 0:
            break
        ref = m / norm
    signs = np.where(vs @ ref >= 0, 1.0, -1.0)
    return vs * signs[:, None], ref


@dataclass
class RegulationReport:
    pc_dir_var: list
    avg_pc_dir_var: float
    pc_shape_var: list
    pc_shape_var_avg: float
    avg_kurtosis: float
    avg_abs_kurtosis: float
    avg_skewness: float
    skewness_signed: float
    skewness_abs: float
    between_var: float
    within_var: float
    k: int
    min_class_samples: int
    n_classes: int

    @property
    def bw_ratio(self):
        return self.between_var / self.within_var

    def rows(self):
        """``(label, value)`` pairs in report order."""
        def pc(lst, i):
            return lst[i] if i < len(lst) else float("nan")
        return [
            ("PC1 dir. var", pc(self.pc_dir_var, 0)),
            ("PC2 dir. var", pc(self.pc_dir_var, 1)),
            ("Avg PC dir. var", self.avg_pc_dir_var),
            ("PC1 shape var", pc(self.pc_shape_var, 0)),
            ("PC2 shape var", pc(self.pc_shape_var, 1)),
            ("Avg PC shape var", self.pc_shape_var_avg),
            ("PC Kurtosis", self.avg_kurtosis),
            ("PC |Kurtosis|", self.avg_abs_kurtosis),
            ("PC Skewness", self.skewness_abs),
            ("PC Skewness (signed)", self.skewness_signed),
            ("Between-class var", self.between_var),
            ("Within-class var", self.within_var),
        ]

    def as_dict(self):
        return asdict(self)


def regulation_report(X, k=10, min_class_samples=100):
    """Homogeneity and Gaussianality statistics of a labeled set.

    Only classes with at least ``min_class_samples`` vectors take part.  For
    each of them the class covariance is eigendecomposed; for the m-th PC:

    * direction variance: variance over classes of the cosine between the
      class PC and the mean PC (signs aligned to the mean first);
    * shape variance: variance over classes of the m-th eigenvalue;
    * skewness and excess kurtosis of the class data projected on its PC.

    Kurtosis and skewness are averaged over classes and then over the first
    ``k`` PCs; skewness is reported both as mean |skew| (``avg_skewness``)
    and signed.
    """
    classes, counts = np.unique(X.labels, return_counts=True)
    keep = classes[counts >= min_class_samples]
    if len(keep) < 2:
        raise InsufficientDataError(
            f"{len(keep)} classes have >= {min_class_samples} samples; need 2")
    k = int(min(k, X.dim))
    if k < 1:
        raise ValueError("k must be at least 1")
    evals, pcs, skews, kurts = [], [], [], []
    for c in keep:
        V = X.vectors[X.labels == c]
        centered = V - V.mean(axis=0)
        cov = centered.T @ centered / len(V)
        w, E = sym_eig(0.5 * (cov + cov.T))
        E = E[:, :k]
        s, q = _moments(centered @ E)
        evals.append(w[:k])
        pcs.append(E.T)
        skews.append(s)
        kurts.append(q)
    evals = np.array(evals)
    pcs = np.array(pcs)
    skews = np.array(skews)
    kurts = np.array(kurts)
    dir_var = []
    for m in range(k):
        aligned, ref = _mean_direction(pcs[:, m, :])
        dir_var.append(float(np.var(aligned @ ref)))
    shape_var = np.var(evals, axis=0)
    sel = np.isin(X.labels, keep)
    S_b, S_w, _ = compute_scatter(X.subset(sel))
    return RegulationReport(
        pc_dir_var=dir_var,
        avg_pc_dir_var=float(np.mean(dir_var)),
        pc_shape_var=[float(v) for v in shape_var],
        pc_shape_var_avg=float(np.mean(shape_var)),
        avg_kurtosis=float(np.mean(kurts)),
        avg_abs_kurtosis=float(np.mean(np.abs(kurts))),
        avg_skewness=float(np.mean(np.abs(skews))),
        skewness_signed=float(np.mean(skews)),
        skewness_abs=float(np.mean(np.abs(skews))),
        between_var=float(np.mean(np.diag(S_b))),
        within_var=float(np.mean(np.diag(S_w))),
        k=k,
        min_class_samples=int(min_class_samples),
        n_classes=int(len(keep)),
    )


@dataclass
class SubgroupStats:
    start: int
    stop: int
    report: RegulationReport
    cosine_eer: float
    between_var: float


def subgroup_report(X, transform, group_size, k=10, min_class_samples=100):
    """Statistics of contiguous groups of LDA-sorted dimensions.

    ``transform`` is applied first; its output dimensions are split into
    groups of ``group_size`` in discriminant order (a shorter trailing group
    is kept).  Each group gets its own regulation report, all-pairs cosine
    EER and between-class variance.
    """
    Y = X.with_vectors(transform.apply_array(X.vectors))
    out_dim = Y.dim
    if group_size < 1 or group_size > out_dim:
        raise ValueError(f"group size {group_size} must lie in 1..{out_dim}")
    bounds = list(range(0, out_dim, group_size))
    if len(bounds) < 2:
        raise ValueError("transform output must split into at least 2 groups")
    groups = []
    for start in bounds:
        stop = min(start + group_size, out_dim)
        G = Y.with_vectors(Y.vectors[:, start:stop])
        rep = regulation_report(G, k=min(k, stop - start), min_class_samples=min_class_samples)
        groups.append(SubgroupStats(start, stop, rep, all_pairs_cosine_eer(G.vectors, G.labels),
                                    rep.between_var))
    return groups


@dataclass
class DiscriminationReport:
    ce_inner: float
    ce_cosine: float
    between_var: float
    within_var: float
    bw_ratio: float
    train_eer_cosine: float


def _cross_entropy(logits, target):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    return float(np.mean(logz - shifted[np.arange(len(target)), target]))


def discrimination_report(Z, class_means):
    """Class-separation measures of latent codes.

    ``class_means`` maps label -> mean vector.  Cross entropy uses softmax
    over logits given by inner products (``ce_inner``) or cosines
    (``ce_cosine``) between each vector and every class mean.
    """
    labels = sorted(class_means)
    pos = {lab: i for i, lab in enumerate(labels)}
    for lab in np.unique(Z.labels):
        if int(lab) not in pos:
            raise MissingPriorError(int(lab))
    M = np.array([class_means[lab] for lab in labels], dtype=np.float64)
    target = np.array([pos[int(lab)] for lab in Z.labels])
    V = Z.vectors
    ce_inner = _cross_entropy(V @ M.T, target)
    cos = cosine_score(V[:, None, :], M[None, :, :])
    ce_cos = _cross_entropy(cos, target)
    if np.unique(Z.labels).size == len(Z):
        # singleton classes: no within-class spread and no target pairs
        bv = float(np.mean(np.var(V, axis=0)))
        wv = 0.0
        train_eer = float("nan")
    else:
        S_b, S_w, _ = compute_scatter(Z)
        bv = float(np.mean(np.diag(S_b)))
        wv = float(np.mean(np.diag(S_w)))
        train_eer = all_pairs_cosine_eer(V, Z.labels)
    ratio = bv / wv if wv > 0 else float("inf")
    return DiscriminationReport(ce_inner, ce_cos, bv, wv, ratio, train_eer)


# report rendering

def report_csv(named_reports):
    """CSV with one column per report; rows follow ``RegulationReport.rows``."""
    names = list(named_reports)
    out = io.StringIO()
    out.write("statistic," + ",".join(names) + "\n")
    rows = [r.rows() for r in named_reports.values()]
    for i, (label, _) in enumerate(rows[0]):
        out.write(label + "," + ",".join(f"{r[i][1]:.10g}" for r in rows) + "\n")
    return out.getvalue()


def report_text(named_reports):
    """Aligned plain-text table, one row per statistic."""
    names = list(named_reports)
    rows = [r.rows() for r in named_reports.values()]
    width = max(len(label) for label, _ in rows[0]) + 2
    col = max(12, max(len(n) for n in names) + 2)
    lines = [" " * width + "".join(n.rjust(col) for n in names)]
    for i, (label, _) in enumerate(rows[0]):
        lines.append(label.ljust(width) + "".join(f"{r[i][1]:{col}.4f}" for r in rows))
    return "\n".join(lines) + "\n"


def subgroup_csv(groups):
    out = io.StringIO()
    out.write("group,start,stop,avg_pc_shape_var,avg_kurtosis,avg_abs_kurtosis,"
              "avg_skewness,between_var,cosine_eer\n")
    for i, g in enumerate(groups):
        r = g.report
        out.write(f"{i},{g.start},{g.stop},{r.pc_shape_var_avg:.10g},{r.avg_kurtosis:.10g},"
                  f"{r.avg_abs_kurtosis:.10g},{r.avg_skewness:.10g},{g.between_var:.10g},"
                  f"{g.cosine_eer:.10g}\n")
    return out.getvalue()
