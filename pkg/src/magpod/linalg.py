"""Dense linear-algebra kernel: SPD factorization/solve and symmetric eigen.

Everything here is a thin, contract-enforcing layer over LAPACK (via scipy /
numpy). Matrices are plain float64 ndarrays; no sparse storage, no complex
arithmetic, no iterative solvers.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import (
    DimensionMismatchError,
    EigenConvergenceError,
    NotPositiveDefiniteError,
)
from .validation import check_matrix, check_symmetric

__all__ = [
    "SpdFactorization",
    "spd_factorize",
    "spd_factorize_jittered",
    "spd_solve",
    "sym_eig",
    "save_matrix",
    "load_matrix",
]

# Escalation ladder for conditioning jitter, relative to mean diagonal.
JITTER_INITIAL = 1e-10
JITTER_MAX = 1e-6
JITTER_GROWTH = 10.0

# Guard against accidental O(n^3) blow-ups; Gram/covariance sizes stay small.
DEFAULT_EIG_SIZE_CAP = 4096


@dataclass(frozen=True)
class SpdFactorization:
    """Lower-triangular Cholesky factor of an SPD matrix.

    ``matrix = factor @ factor.T`` and ``log_det`` equals twice the sum of
    the log-diagonal of the factor.
    """

    size: int
    factor: np.ndarray
    log_det: float
    jitter: float = 0.0


def spd_factorize(M, sym_tol=1e-10):
    """Cholesky-factorize a symmetric positive definite matrix.

    Raises NotSymmetricError if M deviates from symmetry beyond ``sym_tol``
    (relative), and NotPositiveDefiniteError when a pivot is non-positive,
    which signals the caller to retry with jitter.
    """
    M = check_symmetric(M, tol=sym_tol, name="M")
    try:
        L = scipy.linalg.cholesky(M, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return SpdFactorization(size=M.shape[0], factor=L, log_det=log_det)


def spd_factorize_jittered(M, sym_tol=1e-10):
    """Factorize with the escalating-jitter retry policy.

    On failure, retries with ``M + eps * trace(M)/n * I`` where eps starts at
    1e-10 and grows tenfold up to 1e-6; beyond that the error propagates.
    """
    try:
        return spd_factorize(M, sym_tol=sym_tol)
    except NotPositiveDefiniteError:
        pass
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    scale = float(np.trace(M)) / n
    if scale <= 0.0:
        scale = 1.0
    eps = JITTER_INITIAL
    eye = np.eye(n)
    while eps <= JITTER_MAX:
        try:
            fac = spd_factorize(M + (eps * scale) * eye, sym_tol=sym_tol)
            return SpdFactorization(
                size=fac.size, factor=fac.factor, log_det=fac.log_det,
                jitter=eps * scale,
            )
        except NotPositiveDefiniteError:
            eps *= JITTER_GROWTH
    raise NotPositiveDefiniteError(
        f"matrix not positive definite even with jitter {JITTER_MAX:g} * trace/n"
    )


def spd_solve(F, B):
    """Solve M X = B given an SpdFactorization of M.

    B may be a vector or a matrix of right-hand sides; the result has the
    same shape.
    """
    B = np.asarray(B, dtype=float)
    rows = B.shape[0] if B.ndim > 0 else 0
    if B.ndim not in (1, 2) or rows != F.size:
        raise DimensionMismatchError(
            f"right-hand side has {rows} rows, factorization has size {F.size}"
        )
    return scipy.linalg.cho_solve((F.factor, True), B, check_finite=False)


def sym_eig(M, sym_tol=1e-10, size_cap=DEFAULT_EIG_SIZE_CAP):
    """Full symmetric eigendecomposition, eigenvalues sorted descending.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns,
    orthonormal, and each column's largest-magnitude entry made positive so
    results are deterministic across runs and platforms.
    """
    M = check_symmetric(M, tol=sym_tol, name="M")
    n = M.shape[0]
    if n > size_cap:
        raise DimensionMismatchError(
            f"matrix size {n} exceeds the eigensolver cap {size_cap}"
        )
    try:
        w, V = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(str(exc)) from exc
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    pivot = np.abs(V).argmax(axis=0)
    signs = np.sign(V[pivot, np.arange(n)])
    signs[signs == 0.0] = 1.0
    V = V * signs
    return w, V


def save_matrix(path, M):
    """Write a matrix as text: a `rows cols` header then one row per line.

    Values carry 17 significant digits, enough to round-trip float64.
    """
    M = check_matrix(M, "M")
    rows, cols = M.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{rows} {cols}\n")
        for r in range(rows):
            fh.write(" ".join(f"{v:.17g}" for v in M[r]))
            fh.write("\n")


def load_matrix(path):
    """Read a matrix written by :func:`save_matrix`."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header {header!r}")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(
            f"{path}: header promises {rows}x{cols}, file holds {data.shape}"
        )
    return check_matrix(data, "loaded matrix")
