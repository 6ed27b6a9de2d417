import math

import numpy as np
import pytest

from magpod.exceptions import (
    DimensionMismatchError,
    NotPositiveDefiniteError,
    NotSymmetricError,
)
from magpod.linalg import (
    load_matrix,
    save_matrix,
    spd_factorize,
    spd_factorize_jittered,
    spd_solve,
    sym_eig,
)


class TestSpdFactorize:
    def test_identity(self):
        F = spd_factorize(np.eye(3))
        assert np.allclose(F.factor, np.eye(3))
        assert F.log_det == 0.0

    def test_diagonal(self):
        F = spd_factorize(np.diag([4.0, 9.0]))
        assert np.allclose(np.diag(F.factor), [2.0, 3.0])
        assert F.log_det == pytest.approx(math.log(36.0), abs=1e-14)

    def test_2x2_logdet(self):
        # det [[2,1],[1,2]] = 3 by cofactor expansion
        F = spd_factorize(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert F.log_det == pytest.approx(math.log(3.0), abs=1e-14)

    def test_reconstruction(self):
        rng = np.random.default_rng(3)
        G = rng.normal(size=(8, 8))
        M = G.T @ G + np.eye(8)
        F = spd_factorize(M)
        assert np.abs(F.factor @ F.factor.T - M).max() <= 1e-10 * np.abs(M).max()

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetricError):
            spd_factorize(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefiniteError):
            spd_factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_jitter_rescues_semidefinite(self):
        # Rank-one matrix: PSD but not PD; the escalation ladder must fix it.
        v = np.array([1.0, 2.0, 3.0])
        M = np.outer(v, v)
        F = spd_factorize_jittered(M)
        assert F.jitter > 0.0
        x = spd_solve(F, M @ np.ones(3))
        assert np.isfinite(x).all()

    def test_jitter_gives_up_on_indefinite(self):
        with pytest.raises(NotPositiveDefiniteError):
            spd_factorize_jittered(np.array([[1.0, 0.0], [0.0, -1.0]]))


class TestSpdSolve:
    def test_identity(self):
        F = spd_factorize(np.eye(2))
        assert np.allclose(spd_solve(F, np.array([3.0, 5.0])), [3.0, 5.0])

    def test_diagonal(self):
        F = spd_factorize(np.diag([2.0, 4.0]))
        assert np.allclose(spd_solve(F, np.array([2.0, 4.0])), [1.0, 1.0])

    def test_2x2(self):
        # [[2,1],[1,2]] @ [1,1] = [3,3]
        F = spd_factorize(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert spd_solve(F, np.array([3.0, 3.0])) == pytest.approx([1.0, 1.0])

    def test_dimension_mismatch(self):
        F = spd_factorize(np.eye(2))
        with pytest.raises(DimensionMismatchError):
            spd_solve(F, np.ones(3))

    @pytest.mark.parametrize("seed", range(8))
    def test_random_spd_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 51))
        G = rng.normal(size=(n, n))
        M = G.T @ G + np.eye(n)
        x = rng.normal(size=n)
        F = spd_factorize(M)
        x_rec = spd_solve(F, M @ x)
        assert np.linalg.norm(x_rec - x) <= 1e-7 * np.linalg.norm(x)
        # residual contract on a matrix right-hand side
        B = rng.normal(size=(n, 3))
        X = spd_solve(F, B)
        assert np.abs(M @ X - B).max() <= 1e-8 * max(np.abs(B).max(), 1.0)


class TestSymEig:
    def test_identity(self):
        w, V = sym_eig(np.eye(2))
        assert np.allclose(w, [1.0, 1.0])

    def test_diagonal_descending(self):
        w, _ = sym_eig(np.diag([2.0, 3.0]))
        assert np.allclose(w, [3.0, 2.0])

    def test_2x2(self):
        # characteristic polynomial l^2 - 4l + 3 -> roots 3, 1
        w, V = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert w == pytest.approx([3.0, 1.0], abs=1e-12)
        for i in range(2):
            res = np.array([[2.0, 1.0], [1.0, 2.0]]) @ V[:, i] - w[i] * V[:, i]
            assert np.linalg.norm(res) <= 1e-8 * abs(w[i])

    def test_sign_convention(self):
        w, V = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        for i in range(2):
            assert V[np.abs(V[:, i]).argmax(), i] > 0

    @pytest.mark.parametrize("seed", range(6))
    def test_random_reconstruction_and_trace(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(2, 51))
        A = rng.normal(size=(n, n))
        M = 0.5 * (A + A.T)
        w, V = sym_eig(M)
        assert np.all(np.diff(w) <= 1e-12)
        assert np.abs(V @ np.diag(w) @ V.T - M).max() <= 1e-8 * max(np.abs(M).max(), 1.0)
        assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-8
        assert abs(w.sum() - np.trace(M)) <= 1e-10 * max(abs(np.trace(M)), 1.0)

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetricError):
            sym_eig(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_size_cap(self):
        with pytest.raises(DimensionMismatchError):
            sym_eig(np.eye(5), size_cap=4)


class TestSerialization:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        M = rng.normal(size=(5, 3)) * 10.0 ** rng.integers(-8, 8, size=(5, 3))
        path = tmp_path / "m.txt"
        save_matrix(path, M)
        assert np.array_equal(load_matrix(path), M)

    def test_header(self, tmp_path):
        path = tmp_path / "m.txt"
        save_matrix(path, np.ones((2, 4)))
        assert path.read_text().splitlines()[0] == "2 4"

    def test_rejects_nonfinite(self, tmp_path):
        with pytest.raises(ValueError):
            save_matrix(tmp_path / "bad.txt", np.array([[np.nan]]))

    def test_rejects_shape_mismatch(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("2 2\n1 2\n")
        with pytest.raises(ValueError):
            load_matrix(path)
