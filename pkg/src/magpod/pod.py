"""Weighted proper orthogonal decomposition with gradient-augmented snapshots.

The basis comes from the method of snapshots: the Gram matrix of the
snapshot columns under the weighted inner product <u, v> = u^T W v is
eigendecomposed, and each kept eigenpair (lam, phi) yields a basis vector
U phi / sqrt(lam). The weight W is the testbed stiffness assembled with
unit material at the expected parameter combination, so basis vectors are
orthonormal in the corresponding energy norm.
"""

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin

from . import testbed
from .exceptions import (
    DimensionMismatchError,
    RankDeficientWarning,
    ZeroReferenceError,
)
from .linalg import load_matrix, save_matrix, sym_eig
from .validation import check_2d_samples, check_matrix, check_vector

__all__ = [
    "DEFAULT_AUGMENT_STEP",
    "SnapshotMatrix",
    "build_weight",
    "build_snapshot_matrix",
    "WeightedPOD",
    "project",
    "project_sensitivities",
    "reconstruct",
    "relative_error",
    "save_basis",
    "load_basis",
]

DEFAULT_AUGMENT_STEP = 1e-3
RANK_CUTOFF = 1e-12


def build_weight(p_bar, cfg):
    """Inner-product weight: testbed stiffness at p_bar, unit material, zero state."""
    W, _ = testbed.assemble(p_bar, None, cfg, nu_override=1.0)
    return W


@dataclass(frozen=True)
class SnapshotMatrix:
    """Snapshot columns with per-column provenance labels.

    Labels are (sample_index, kind) pairs where kind is "state" for a plain
    solution column and "grad<i>" for a gradient-augmented column along
    parameter i (1-based). ``step`` is the augmentation step size.
    """

    matrix: np.ndarray
    labels: tuple
    step: float = 0.0

    @property
    def n_dofs(self):
        return self.matrix.shape[0]

    @property
    def n_columns(self):
        return self.matrix.shape[1]


def build_snapshot_matrix(solutions, augment=False, step=DEFAULT_AUGMENT_STEP):
    """Concatenate solution states (and optionally gradient-shifted copies).

    With ``augment`` each sample contributes, in parameter order, the block
    [u, u + step * du/dp_1, ..., u + step * du/dp_np]; otherwise one state
    column per sample.
    """
    if not solutions:
        raise ValueError("need at least one solution")
    n = solutions[0].u.shape[0]
    n_p = solutions[0].sensitivities.shape[1]
    for sol in solutions:
        if sol.u.shape != (n,) or sol.sensitivities.shape != (n, n_p):
            raise DimensionMismatchError(
                "all solutions must share state length and parameter count"
            )
    if augment and not step > 0.0:
        raise ValueError("augmentation step must be positive")

    cols = []
    labels = []
    for j, sol in enumerate(solutions):
        cols.append(sol.u)
        labels.append((j, "state"))
        if augment:
            for i in range(n_p):
                cols.append(sol.u + step * sol.sensitivities[:, i])
                labels.append((j, f"grad{i + 1}"))
    return SnapshotMatrix(
        matrix=np.column_stack(cols),
        labels=tuple(labels),
        step=step if augment else 0.0,
    )


class WeightedPOD(TransformerMixin, BaseEstimator):
    """Reduced basis via weighted POD, as a scikit-learn transformer.

    Parameters
    ----------
    n_modes : int or None, default=14
        Number of basis vectors to keep. Capped at the numerical rank of
        the snapshot set (with a RankDeficientWarning); None keeps the full
        numerical rank.
    weight : ndarray of shape (n_dofs, n_dofs) or None
        SPD inner-product weight; None means the identity.
    rank_cutoff : float, default=1e-12
        Gram eigenvalues below ``rank_cutoff * lambda_1`` count as noise and
        are discarded before the 1/sqrt(lambda) scaling.

    Attributes
    ----------
    basis_ : ndarray of shape (n_dofs, n_modes_)
        Basis vectors as columns, orthonormal under the weight.
    eigenvalues_ : ndarray of shape (n_modes_,)
        Gram eigenvalues of the kept modes, descending and positive.
    rank_ : int
        Numerical rank of the snapshot set under the cutoff.
    rank_deficient_ : bool
        True when the requested size exceeded the numerical rank.

    Snapshots are passed to :meth:`fit` as rows (scikit-learn orientation);
    a column-major :class:`SnapshotMatrix` ``S`` fits via ``fit(S.matrix.T)``.
    """

    def __init__(self, n_modes=14, weight=None, rank_cutoff=RANK_CUTOFF):
        self.n_modes = n_modes
        self.weight = weight
        self.rank_cutoff = rank_cutoff

    def fit(self, X, y=None):
        X = check_2d_samples(X, "X")
        U = X.T
        if self.weight is None:
            WU = U
        else:
            W = check_matrix(self.weight, "weight")
            if W.shape != (U.shape[0], U.shape[0]):
                raise DimensionMismatchError(
                    f"weight shape {W.shape} does not match {U.shape[0]} dofs"
                )
            WU = W @ U
        gram = U.T @ WU
        gram = 0.5 * (gram + gram.T)
        lam, phi = sym_eig(gram, sym_tol=1e-8)
        if lam[0] <= 0.0:
            raise ValueError("snapshot set has no energy under the weight")
        rank = int(np.sum(lam > self.rank_cutoff * lam[0]))
        requested = rank if self.n_modes is None else int(self.n_modes)
        if requested < 1:
            raise ValueError(f"n_modes must be >= 1, got {requested}")
        self.rank_ = rank
        self.rank_deficient_ = requested > rank
        if self.rank_deficient_:
            warnings.warn(
                f"requested {requested} modes but numerical rank is {rank}; "
                "basis capped",
                RankDeficientWarning,
            )
        r = min(requested, rank)
        lam_r = lam[:r]
        Q = (U @ phi[:, :r]) / np.sqrt(lam_r)
        # One weighted Cholesky-QR pass: a no-op in exact arithmetic, but it
        # repairs the orthonormality lost to near-collinear snapshot columns
        # (the upper-triangular correction keeps leading spans nested and
        # diagonal signs positive).
        WQ = Q if self.weight is None else np.asarray(self.weight) @ Q
        overlap = Q.T @ WQ
        overlap = 0.5 * (overlap + overlap.T)
        L = scipy.linalg.cholesky(overlap, lower=True, check_finite=False)
        Q = scipy.linalg.solve_triangular(
            L, Q.T, lower=True, check_finite=False
        ).T
        self.basis_ = Q
        self.eigenvalues_ = lam_r
        self.n_modes_ = r
        self.n_features_in_ = X.shape[1]
        self._weighted_basis = (
            Q if self.weight is None else np.asarray(self.weight) @ Q
        )
        return self

    def transform(self, X):
        """Reduced coefficients of states: rows map to rows of length n_modes_."""
        X = check_2d_samples(X, "X", n_features=self.n_features_in_)
        return X @ self._weighted_basis

    def inverse_transform(self, Z):
        """Lift reduced coefficients back to full states."""
        Z = check_2d_samples(Z, "Z", n_features=self.n_modes_)
        return Z @ self.basis_.T

    def transform_gradients(self, sens):
        """Reduced coefficients of a sensitivity block of shape (n_dofs, n_p)."""
        sens = check_matrix(sens, "sens")
        if sens.shape[0] != self.n_features_in_:
            raise DimensionMismatchError(
                f"sensitivities have {sens.shape[0]} rows, expected "
                f"{self.n_features_in_}"
            )
        return self._weighted_basis.T @ sens


def project(pod, u):
    """Reduced coefficients of a single state vector."""
    u = check_vector(u, "u")
    return pod.transform(u[None, :])[0]


def project_sensitivities(pod, sens):
    """Reduced coefficients of state sensitivities, column per parameter."""
    return pod.transform_gradients(sens)


def reconstruct(pod, xi):
    """Full state from reduced coefficients."""
    xi = check_vector(xi, "xi")
    return pod.inverse_transform(xi[None, :])[0]


def relative_error(u, u_tilde, weight):
    """Relative error of a reconstruction in the quadratic norm of ``weight``.

    Returns sqrt((u - u~)^T W (u - u~) / (u^T W u)); raises ZeroReferenceError
    when the reference state has no energy.
    """
    u = check_vector(u, "u")
    u_tilde = check_vector(u_tilde, "u_tilde", length=u.shape[0])
    W = check_matrix(weight, "weight")
    den = float(u @ (W @ u))
    if den <= 0.0:
        raise ZeroReferenceError("reference state has zero energy under the weight")
    diff = u - u_tilde
    num = max(float(diff @ (W @ diff)), 0.0)
    return float(np.sqrt(num / den))


def save_basis(directory, pod, p_bar, cfg):
    """Persist a fitted basis; the weight is re-assembled on load, not stored."""
    os.makedirs(directory, exist_ok=True)
    save_matrix(os.path.join(directory, "basis.txt"), pod.basis_)
    save_matrix(
        os.path.join(directory, "eigenvalues.txt"), pod.eigenvalues_[None, :]
    )
    manifest = {
        "n_modes": pod.n_modes_,
        "rank": pod.rank_,
        "rank_deficient": bool(pod.rank_deficient_),
        "weight_point": {
            "values": list(p_bar.values),
            "bounds": [list(b) for b in p_bar.bounds],
        },
        "testbed_config": cfg.to_dict(),
    }
    with open(os.path.join(directory, "basis.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_basis(directory):
    """Load a basis saved by :func:`save_basis`; returns (pod, p_bar, cfg)."""
    with open(os.path.join(directory, "basis.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    cfg = testbed.TestbedConfig.from_dict(manifest["testbed_config"])
    p_bar = testbed.ParamPoint(
        tuple(manifest["weight_point"]["values"]),
        tuple(tuple(b) for b in manifest["weight_point"]["bounds"]),
    )
    W = build_weight(p_bar, cfg)
    pod = WeightedPOD(n_modes=manifest["n_modes"], weight=W)
    pod.basis_ = load_matrix(os.path.join(directory, "basis.txt"))
    pod.eigenvalues_ = load_matrix(os.path.join(directory, "eigenvalues.txt"))[0]
    pod.n_modes_ = manifest["n_modes"]
    pod.rank_ = manifest["rank"]
    pod.rank_deficient_ = manifest["rank_deficient"]
    pod.n_features_in_ = pod.basis_.shape[0]
    pod._weighted_basis = W @ pod.basis_
    return pod, p_bar, cfg
