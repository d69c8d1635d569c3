"""Matrix functions applied to vectors.

Dense kernels (``expm_dense``, ``phi_dense``) and Krylov-projected products
``phi_k(scale * A) b`` and ``psi(scale * A) b = sum_k p_k phi_k(scale * A) b``
for operators that are only available through their action on vectors.

The Krylov products follow the usual recipe: an Arnoldi process builds an
orthonormal basis ``V`` and Hessenberg ``H``; all required ``phi_k(scale H) e1``
are then read off a single exponential of an augmented matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Operator = Callable[[np.ndarray], np.ndarray]


class KrylovError(RuntimeError):
    """Arnoldi process or Krylov product could not deliver the requested accuracy."""


@dataclass(frozen=True)
class KrylovConfig:
    """Settings for the Krylov approximation of matrix-function products.

    Parameters
    ----------
    m_max : int
        Largest subspace dimension. Capped by the problem dimension, where
        the process terminates with a (happy) breakdown.
    tol : float
        Target for the a-posteriori error estimate, relative to ``||b||``.
    reorthogonalize : bool
        Run a second Gram-Schmidt pass per Arnoldi step.
    gram_schmidt : {"cgs", "mgs"}
        Classical (block, vectorized) or modified Gram-Schmidt. With
        reorthogonalization both keep the basis orthonormal to roundoff.
    """

    m_max: int = 100
    tol: float = 1e-12
    reorthogonalize: bool = True
    gram_schmidt: str = "cgs"

    def __post_init__(self):
        if self.m_max < 1:
            raise ValueError(f"m_max must be >= 1, got {self.m_max}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.gram_schmidt not in ("cgs", "mgs"):
            raise ValueError(f"gram_schmidt must be 'cgs' or 'mgs', got {self.gram_schmidt!r}")


@dataclass
class KrylovBasis:
    """Result of an Arnoldi process.

    ``V`` has ``m`` orthonormal columns, ``H`` is ``(m + 1) x m`` upper
    Hessenberg and ``v_next`` is the unit vector completing the relation
    ``A V = V H[:m] + H[m, m-1] v_next e_m^T`` (``None`` after breakdown).
    """

    V: np.ndarray
    H: np.ndarray
    beta: float
    v_next: np.ndarray | None = None
    breakdown: bool = False

    @property
    def m(self) -> int:
        return self.V.shape[1]


# ---------------------------------------------------------------------------
# dense kernels

_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
# 1-norm bounds below which the degree-m approximant is accurate to unit roundoff
_THETA = ((3, 1.495585217958292e-2), (5, 2.539398330063230e-1),
          (7, 9.504178996162932e-1), (9, 2.097847961257068e0))
_THETA13 = 5.371920351148152e0


def _square(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} expects a square matrix, got shape {A.shape}")
    return A


def expm_dense(A) -> np.ndarray:
    """Matrix exponential by Pade scaling and squaring (degrees 3..13)."""
    A = _square(A, "expm_dense")
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    norm = np.abs(A).sum(axis=0).max()
    if not math.isfinite(norm):
        raise OverflowError("expm_dense: non-finite matrix entries")
    ident = np.eye(n)
    if norm == 0.0:
        return ident

    A2 = A @ A
    if norm <= _THETA[1][1]:
        if norm <= _THETA[0][1]:
            b = _PADE[3]
            U = A @ (b[3] * A2 + b[1] * ident)
            V = b[2] * A2 + b[0] * ident
        else:
            b = _PADE[5]
            A4 = A2 @ A2
            U = A @ (b[5] * A4 + b[3] * A2 + b[1] * ident)
            V = b[4] * A4 + b[2] * A2 + b[0] * ident
        return _pade_solve(U, V, 0)
    A4 = A2 @ A2
    A6 = A4 @ A2
    if norm <= _THETA[2][1]:
        b = _PADE[7]
        U = A @ (b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
        return _pade_solve(U, V, 0)
    if norm <= _THETA[3][1]:
        b = _PADE[9]
        A8 = A4 @ A4
        U = A @ (b[9] * A8 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = b[8] * A8 + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
        return _pade_solve(U, V, 0)

    s = max(0, int(math.ceil(math.log2(norm / _THETA13))))
    if s > 1000:
        raise OverflowError(f"expm_dense: norm {norm:.3e} too large")
    A = A / 2.0**s
    A2 = A2 / 4.0**s
    A4 = A4 / 16.0**s
    A6 = A6 / 64.0**s
    b = _PADE[13]
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    return _pade_solve(U, V, s)


def _pade_solve(U, V, s):
    R = np.linalg.solve(V - U, V + U)
    if s:
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(s):
                R = R @ R
        if not np.isfinite(R).all():
            raise OverflowError("expm_dense: result overflowed")
    return R


def _phi_taylor(X, k, max_terms):
    """phi_0 .. phi_k of a small-norm matrix by direct series summation."""
    n = X.shape[0]
    out = []
    for j in range(k + 1):
        term = np.eye(n) / math.factorial(j)
        total = term.copy()
        for i in range(1, max_terms + 1):
            term = term @ X / (i + j)
            total += term
            if np.abs(term).max() <= 1e-17 * max(np.abs(total).max(), 1e-300):
                break
        else:
            raise ArithmeticError(
                f"phi_dense: series for phi_{j} did not converge in {max_terms} terms")
        out.append(total)
    return out


def phi_dense(k: int, Z, max_terms: int = 60) -> np.ndarray:
    """Dense ``phi_k(Z)``; reference implementation for the Krylov products.

    The series ``sum_i Z^i / (i + k)!`` is summed for ``Z / 2^s`` with
    ``||Z / 2^s||_1 <= 1/2`` and the result is brought back with the doubling
    identities ``phi_0(2X) = phi_0(X)^2`` and
    ``phi_j(2X) = 2^-j [phi_0(X) phi_j(X) + sum_{i=1..j} phi_i(X) / (j - i)!]``.
    This path never touches :func:`expm_dense`.
    """
    if k < 0:
        raise ValueError("phi_dense: k must be non-negative")
    Z = _square(Z, "phi_dense")
    norm = np.abs(Z).sum(axis=0).max() if Z.size else 0.0
    if not np.isfinite(norm):
        raise ArithmeticError("phi_dense: non-finite input")
    s = 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))
    phis = _phi_taylor(Z / 2.0**s, k, max_terms)
    for _ in range(s):
        new = []
        for j in range(k + 1):
            acc = phis[0] @ phis[j]
            for i in range(1, j + 1):
                acc = acc + phis[i] / math.factorial(j - i)
            new.append(acc / 2.0**j)
        phis = new
    return phis[k]


def psi_dense(row: Sequence[float], Z) -> np.ndarray:
    """Dense ``sum_k row[k-1] phi_k(Z)``."""
    Z = _square(Z, "psi_dense")
    out = np.zeros_like(Z)
    for k, c in enumerate(row, start=1):
        if c != 0.0:
            out += c * phi_dense(k, Z)
    return out


# ---------------------------------------------------------------------------
# Krylov machinery

class _Arnoldi:
    """Incremental Arnoldi process with modified Gram-Schmidt."""

    def __init__(self, apply_A: Operator, b, m_max: int, reorthogonalize: bool,
                 gram_schmidt: str = "cgs"):
        b = np.asarray(b, dtype=float)
        beta = float(np.linalg.norm(b))
        if beta == 0.0:
            raise KrylovError("arnoldi: zero starting vector")
        if not np.isfinite(beta):
            raise KrylovError("arnoldi: non-finite starting vector")
        self.apply_A = apply_A
        self.n = b.shape[0]
        self.m_max = min(m_max, self.n)
        self.reorth = reorthogonalize
        self.mgs = gram_schmidt == "mgs"
        self.beta = beta
        # basis stored row-wise so each vector is contiguous
        self.Vt = np.zeros((self.m_max + 1, self.n))
        self.H = np.zeros((self.m_max + 1, self.m_max))
        self.Vt[0] = b / beta
        self.m = 0
        self.breakdown = False

    def extend(self):
        j = self.m
        Vt = self.Vt
        w = np.array(self.apply_A(Vt[j]), dtype=float)
        if w.shape != (self.n,):
            raise KrylovError(f"arnoldi: operator returned shape {w.shape}, expected ({self.n},)")
        wnorm = math.sqrt(w @ w)
        col = self.H[:, j]
        if self.mgs:
            for _ in range(2 if self.reorth else 1):
                for i in range(j + 1):
                    vi = Vt[i]
                    c = vi @ w
                    col[i] += c
                    w -= c * vi
        else:
            basis = Vt[:j + 1]
            for _ in range(2 if self.reorth else 1):
                c = basis @ w
                col[:j + 1] += c
                w -= c @ basis
        hnext = math.sqrt(w @ w)
        self.m = j + 1
        if not math.isfinite(hnext):
            raise KrylovError("arnoldi: non-finite Hessenberg entry")
        if hnext <= 1e-13 * max(wnorm, 1e-300) or self.m == self.n:
            self.breakdown = True
            return
        col[j + 1] = hnext
        Vt[j + 1] = w / hnext

    def basis(self) -> KrylovBasis:
        m = self.m
        return KrylovBasis(
            V=self.Vt[:m].T.copy(),
            H=self.H[:m + 1, :m].copy(),
            beta=self.beta,
            v_next=None if self.breakdown else self.Vt[m].copy(),
            breakdown=self.breakdown,
        )


def arnoldi(apply_A: Operator, b, cfg: KrylovConfig = KrylovConfig()) -> KrylovBasis:
    """Run Arnoldi up to ``cfg.m_max`` steps or until breakdown."""
    proc = _Arnoldi(apply_A, b, cfg.m_max, cfg.reorthogonalize, cfg.gram_schmidt)
    while proc.m < proc.m_max and not proc.breakdown:
        proc.extend()
    return proc.basis()


def phi_augmented(Hs, p: int) -> np.ndarray:
    """Columns ``phi_1(Hs) e1 .. phi_p(Hs) e1`` from one exponential.

    ``exp([[Hs, e1, 0], [0, 0, I_{p-1}], [0, 0, 0]])`` carries
    ``phi_j(Hs) e1`` in its column ``m + j - 1`` (top block).
    """
    m = Hs.shape[0]
    aug = np.zeros((m + p, m + p))
    aug[:m, :m] = Hs
    aug[0, m] = 1.0
    for j in range(1, p):
        aug[m + j - 1, m + j] = 1.0
    E = expm_dense(aug)
    return E[:m, m:m + p]


def _row(row) -> np.ndarray:
    row = np.asarray(row, dtype=float).ravel()
    if not np.all(np.isfinite(row)):
        raise ValueError("psi coefficient row must be finite")
    return row


def psi_products(terms, apply_A: Operator, b,
                 cfg: KrylovConfig = KrylovConfig()) -> list[np.ndarray]:
    """Evaluate several ``psi(scale * A) b`` sharing one vector ``b``.

    ``terms`` is a sequence of ``(row, scale)``. All terms use one Arnoldi
    basis, grown until every term's error estimate is below ``cfg.tol``.
    Each term's estimate is ``|scale| h_{m+1,m} |e_m^T phi_{k+1}(scale H) e1|``
    with ``k`` the highest phi index it needs.
    """
    b = np.asarray(b, dtype=float)
    out: list = [None] * len(terms)
    pending = []
    for idx, (row, scale) in enumerate(terms):
        row = _row(row)
        nz = np.flatnonzero(row)
        if nz.size == 0:
            out[idx] = np.zeros_like(b)
            continue
        if not np.isfinite(scale):
            raise ValueError(f"psi product: non-finite scale {scale}")
        coef = row[:int(nz[-1]) + 1]
        if scale == 0.0:
            c0 = sum(c / math.factorial(k) for k, c in enumerate(coef, start=1))
            out[idx] = c0 * b
        else:
            pending.append((idx, coef, float(scale)))
    if not pending:
        return out
    if not np.any(b):
        for idx, _, _ in pending:
            out[idx] = np.zeros_like(b)
        return out

    proc = _Arnoldi(apply_A, b, cfg.m_max, cfg.reorthogonalize, cfg.gram_schmidt)
    log_tol = math.log(cfg.tol)
    log_h = 0.0  # log prod_j h_{j+1,j}
    while pending:
        proc.extend()
        m = proc.m
        H = proc.H[:m, :m]
        if proc.breakdown:
            for idx, coef, scale in pending:
                cols = phi_augmented(scale * H, coef.size)
                out[idx] = proc.beta * ((cols @ coef) @ proc.Vt[:m])
            break
        hlast = proc.H[m, m - 1]
        log_h += math.log(hlast)
        last = m == proc.m_max
        still = []
        for idx, coef, scale in pending:
            kmax = coef.size
            tau = abs(scale)
            # leading series term of the estimate screens out hopeless checks
            cheap = m * math.log(tau) + log_h - math.lgamma(m + kmax + 1)
            if cheap < log_tol + 0.7 or last:
                full = phi_augmented(scale * H, kmax + 1)
                err = tau * hlast * np.abs(full[m - 1, 1:]).max()
                if err <= cfg.tol:
                    out[idx] = proc.beta * ((full[:, :kmax] @ coef) @ proc.Vt[:m])
                    continue
                if last:
                    raise KrylovError(
                        f"Krylov product not converged: m={m}, estimate {err:.2e} "
                        f"> tol {cfg.tol:.1e}")
            still.append((idx, coef, scale))
        pending = still
    return out


def psi_times_vector(row, apply_A: Operator, scale: float, b,
                     cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """``sum_k row[k-1] phi_k(scale * A) b`` using one Krylov basis."""
    return psi_products([(row, scale)], apply_A, b, cfg)[0]


def phi_times_vector(k: int, apply_A: Operator, scale: float, b,
                     cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """Krylov approximation of ``phi_k(scale * A) b`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("phi_times_vector needs k >= 1")
    row = np.zeros(k)
    row[-1] = 1.0
    return psi_times_vector(row, apply_A, scale, b, cfg)


def psi_transpose_times_vector(row, apply_A_transpose: Operator, scale: float, b,
                               cfg: KrylovConfig = KrylovConfig()) -> np.ndarray:
    """``psi(scale * A)^T b``, evaluated as ``psi(scale * A^T) b``.

    A polynomial in ``A`` transposes into the same polynomial in ``A^T``,
    so the series defining each ``phi_k`` does too.
    """
    return psi_times_vector(row, apply_A_transpose, scale, b, cfg)
