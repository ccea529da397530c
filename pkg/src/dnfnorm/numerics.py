"""Numerical building blocks: symmetric eigensolver, RNG, Adam, finite differences."""

from dataclasses import dataclass

import numpy as np

from .errors import IterationLimitError, NonFiniteGradientError, NumericError, SymmetryError

MAX_SWEEPS = 60


def make_rng(seed):
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _round_robin(n):
    """Rounds of disjoint index pairs covering every (p, q), p < q, once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(M, tol=1e-15, max_sweeps=MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Rotations within one round of the round-robin ordering act on disjoint
    coordinate planes, so they are applied together.

    Args:
        M: symmetric (n, n) array.
        tol: sweeps stop once the off-diagonal Frobenius mass falls below
            ``tol * ||M||_F``.

    Returns:
        ``(w, V)`` with eigenvalues ``w`` in descending order and orthonormal
        eigenvectors in the columns of ``V``.  Equal eigenvalues keep their
        diagonal order; each column is signed so that its largest-magnitude
        entry is positive.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise SymmetryError("matrix has non-finite entries")
    n = A.shape[0]
    norm = np.linalg.norm(A)
    asym = np.linalg.norm(A - A.T)
    if asym > 1e-10 * norm:
        raise SymmetryError(f"matrix is not symmetric (||M - M^T|| = {asym:.3g})")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n > 1 and norm > 0:
        rounds = _round_robin(n)
        offdiag = ~np.eye(n, dtype=bool)
        target = tol * norm
        for sweep in range(max_sweeps + 1):
            off = np.linalg.norm(A[offdiag])
            if off <= target:
                break
            if sweep == max_sweeps:
                raise IterationLimitError(
                    f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3g})")
            for P, Q in rounds:
                apq = A[P, Q]
                active = apq != 0.0
                if not np.any(active):
                    continue
                t = np.zeros_like(apq)
                theta = (A[Q, Q][active] - A[P, P][active]) / (2.0 * apq[active])
                big = np.abs(theta) > 1e150
                ta = np.empty_like(theta)
                ta[big] = 0.5 / theta[big]
                small = ~big
                ta[small] = np.where(theta[small] >= 0, 1.0, -1.0) / (
                    np.abs(theta[small]) + np.hypot(theta[small], 1.0))
                t[active] = ta
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                colP, colQ = A[:, P].copy(), A[:, Q].copy()
                A[:, P] = c * colP - s * colQ
                A[:, Q] = s * colP + c * colQ
                rowP, rowQ = A[P, :].copy(), A[Q, :].copy()
                A[P, :] = c[:, None] * rowP - s[:, None] * rowQ
                A[Q, :] = s[:, None] * rowP + c[:, None] * rowQ
                vP, vQ = V[:, P].copy(), V[:, Q].copy()
                V[:, P] = c * vP - s * vQ
                V[:, Q] = s * vP + c * vQ
            A = 0.5 * (A + A.T)
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return w, V


def sym_inv_sqrt(M, floor=0.0):
    """Symmetric inverse square root via ``sym_eig``; eigenvalues clipped at ``floor``."""
    w, V = sym_eig(M)
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T


def regularize(S, cond_limit=1e10, ridge=1e-8):
    """Add ``ridge * trace(S)/D * I`` when S is ill-conditioned.

    Returns the (possibly) regularized matrix and whether a ridge was added.
    """
    S = np.asarray(S, dtype=np.float64)
    D = S.shape[0]
    w, _ = sym_eig(S)
    top, bottom = w[0], w[-1]
    if top <= 0 or bottom <= 0 or top / bottom > cond_limit:
        scale = np.trace(S) / D
        if scale <= 0:
            scale = 1.0
        return S + ridge * scale * np.eye(D), True
    return S, False


@dataclass
class AdamState:
    """Adam moment estimates; mutated in place by :func:`adam_step`."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(m=np.zeros(n), v=np.zeros(n), **kwargs)

    def __post_init__(self):
        if len(self.m) != len(self.v):
            raise ValueError("moment vectors differ in length")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("lr and eps must be positive")


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Returns the new parameter vector; ``state`` is advanced in place and also
    returned for convenience.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError(
            f"length mismatch: params {len(params)}, grads {len(grads)}, state {len(state.m)}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
