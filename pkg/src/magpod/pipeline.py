"""Study orchestration: dataset generation over nested partitions, field and
scalar-output surrogates in gradient-free and gradient-enhanced modes, and
the error/timing reports comparing them on a held-out test set.
"""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import pod as pod_mod
from . import testbed
from .exceptions import ZeroReferenceError
from .gpr import GaussianProcessSurrogate
from .linalg import load_matrix, save_matrix
from .sampling import plan_dataset
from .testbed import ParamPoint, TestbedConfig

__all__ = [
    "Dataset",
    "FieldSurrogate",
    "EvalReport",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "train_field_surrogate",
    "train_kpi_surrogate",
    "predict_field",
    "evaluate",
    "timing_report",
    "demo_one_dimensional",
    "basis_study",
    "write_rows_csv",
]

MANIFEST_VOLATILE_KEYS = ("created", "solve_seconds", "total_seconds")


def _mix_seed(seed, index):
    """Stable per-task seed so parallel order cannot change results."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _parallel_map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


@dataclass
class Dataset:
    """Solved samples over nested training partitions plus a held-out test set."""

    cfg: TestbedConfig
    bounds: tuple
    sizes: tuple
    test_size: int
    seed: int
    augment_step: float
    points: list
    states: np.ndarray  # (n_dofs, N) columns are samples
    sensitivities: np.ndarray  # (N, n_dofs, n_p)
    kpi_values: np.ndarray  # (N,)
    kpi_gradients: np.ndarray  # (N, n_p)
    solve_seconds: np.ndarray  # (N,)
    rejected_count: int
    manifest: dict = field(default_factory=dict)

    @property
    def n_dofs(self):
        return self.states.shape[0]

    @property
    def n_params(self):
        return len(self.bounds)

    def train_indices(self, size):
        if size not in self.sizes:
            raise ValueError(f"partition {size} not in {self.sizes}")
        return np.arange(size)

    def test_indices(self):
        start = max(self.sizes)
        return np.arange(start, start + self.test_size)

    def params_array(self, indices):
        return np.array([self.points[i].values for i in indices])

    def solutions(self, indices):
        out = []
        for i in indices:
            out.append(
                testbed.FieldSolution(
                    u=self.states[:, i],
                    sensitivities=self.sensitivities[i],
                    newton_iterations=0,
                    residual_norm=0.0,
                )
            )
        return out


def _config_hash(payload):
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("ascii")
    ).hexdigest()


def generate_dataset(
    cfg,
    sizes,
    test_size,
    seed=0,
    bounds=testbed.DEFAULT_BOUNDS,
    augment_step=pod_mod.DEFAULT_AUGMENT_STEP,
    n_jobs=1,
):
    """Plan, solve, and package the nested-partition dataset.

    The first max(sizes) accepted design points form the prefix-nested
    training partitions; the following ``test_size`` points are the test
    set. Every record carries the state, its parametric sensitivities, the
    scalar output with gradient, and the solve wall time.
    """
    sizes = tuple(int(s) for s in sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"partition sizes must be ascending, got {sizes}")
    if test_size < 1:
        raise ValueError("test_size must be >= 1")

    t_start = time.perf_counter()
    total = max(sizes) + test_size
    plan = plan_dataset(total, cfg, bounds=bounds)
    points = list(plan.accepted)

    def solve_one(args):
        index, p = args
        t0 = time.perf_counter()
        try:
            sol = testbed.solve(p, cfg)
            kpi = testbed.compute_kpi(p, sol, cfg)
        except Exception as exc:
            raise type(exc)(f"sample {index}: {exc}") from exc
        return sol, kpi, time.perf_counter() - t0

    results = _parallel_map(solve_one, list(enumerate(points)), n_jobs)

    n = results[0][0].u.shape[0]
    n_p = len(bounds)
    states = np.empty((n, total))
    sens = np.empty((total, n, n_p))
    kpi_values = np.empty(total)
    kpi_grads = np.empty((total, n_p))
    seconds = np.empty(total)
    for i, (sol, kpi, dt) in enumerate(results):
        states[:, i] = sol.u
        sens[i] = sol.sensitivities
        kpi_values[i] = kpi.value
        kpi_grads[i] = kpi.gradient
        seconds[i] = dt

    core = {
        "testbed_config": cfg.to_dict(),
        "bounds": [list(b) for b in bounds],
        "sizes": list(sizes),
        "test_size": test_size,
        "seed": seed,
        "augment_step": augment_step,
    }
    manifest = {
        "version": 1,
        "config_hash": _config_hash(core),
        **core,
        "plan": plan.to_dict(),
        "rejected_count": plan.rejected_count,
        "jacobian_ratio_min": testbed.JACOBIAN_RATIO_MIN,
        "eval_metric_state": "true_state",
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "solve_seconds": seconds.tolist(),
        "total_seconds": time.perf_counter() - t_start,
    }
    manifest["plan"].pop("accepted")  # points live in their own file

    return Dataset(
        cfg=cfg,
        bounds=tuple(tuple(b) for b in bounds),
        sizes=sizes,
        test_size=test_size,
        seed=seed,
        augment_step=augment_step,
        points=points,
        states=states,
        sensitivities=sens,
        kpi_values=kpi_values,
        kpi_gradients=kpi_grads,
        solve_seconds=seconds,
        rejected_count=plan.rejected_count,
        manifest=manifest,
    )


def save_dataset(ds, directory):
    """Write a dataset directory: manifest.json plus header-text matrices."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(ds.manifest, fh, indent=2, sort_keys=True)
    N = len(ds.points)
    save_matrix(os.path.join(directory, "params.txt"), ds.params_array(range(N)))
    save_matrix(os.path.join(directory, "states.txt"), ds.states)
    # Sensitivities flatten to (n_dofs, N * n_p), sample-major column blocks.
    sens_flat = ds.sensitivities.transpose(1, 0, 2).reshape(ds.n_dofs, -1)
    save_matrix(os.path.join(directory, "sensitivities.txt"), sens_flat)
    save_matrix(os.path.join(directory, "kpi_values.txt"), ds.kpi_values[:, None])
    save_matrix(os.path.join(directory, "kpi_gradients.txt"), ds.kpi_gradients)


def load_dataset(directory):
    """Load a dataset directory written by :func:`save_dataset`."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    cfg = TestbedConfig.from_dict(manifest["testbed_config"])
    bounds = tuple(tuple(b) for b in manifest["bounds"])
    params = load_matrix(os.path.join(directory, "params.txt"))
    states = load_matrix(os.path.join(directory, "states.txt"))
    sens_flat = load_matrix(os.path.join(directory, "sensitivities.txt"))
    N = params.shape[0]
    n_p = len(bounds)
    sens = sens_flat.reshape(states.shape[0], N, n_p).transpose(1, 0, 2)
    kpi_values = load_matrix(os.path.join(directory, "kpi_values.txt"))[:, 0]
    kpi_grads = load_matrix(os.path.join(directory, "kpi_gradients.txt"))
    points = [ParamPoint(tuple(row), bounds) for row in params]
    return Dataset(
        cfg=cfg,
        bounds=bounds,
        sizes=tuple(manifest["sizes"]),
        test_size=manifest["test_size"],
        seed=manifest["seed"],
        augment_step=manifest["augment_step"],
        points=points,
        states=states,
        sensitivities=sens,
        kpi_values=kpi_values,
        kpi_gradients=kpi_grads,
        solve_seconds=np.array(manifest["solve_seconds"]),
        rejected_count=manifest["rejected_count"],
        manifest=manifest,
    )


@dataclass
class FieldSurrogate:
    """POD basis plus one GP per reduced coefficient."""

    pod: pod_mod.WeightedPOD
    models: list
    mode: str
    partition_size: int
    fit_seconds: float
    _cache: dict = field(default=None, repr=False)

    @property
    def rank(self):
        return self.pod.n_modes_

    def _build_cache(self):
        m0 = self.models[0]
        iso = all(np.ndim(m.kernel_params_.length_scale) == 0 for m in self.models)
        shared = all(
            m._Xn.shape == m0._Xn.shape and np.array_equal(m._Xn, m0._Xn)
            for m in self.models
        )
        if not (iso and shared):
            self._cache = {}
            return
        N = m0._t.shape[0]
        eye = np.eye(N)
        self._cache = {
            "Xn": m0._Xn,
            "lo": m0._lo,
            "inv_range": 1.0 / m0._range,
            "sf2": np.array([m.kernel_params_.signal_variance for m in self.models]),
            "inv_ls2": np.array(
                [float(m.kernel_params_.length_scale) ** -2 for m in self.models]
            ),
            "alpha": np.stack([m._alpha for m in self.models]),
            "kinv": np.stack(
                [
                    scipy.linalg.cho_solve((m._L, True), eye, check_finite=False)
                    for m in self.models
                ]
            ),
            "y_mean": np.array([m._y_mean for m in self.models]),
            "y_scale": np.array([m._y_scale for m in self.models]),
            "use_gradients": m0.use_gradients,
            "basis": np.ascontiguousarray(self.pod.basis_),
        }

    def predict(self, p):
        """Reconstructed state and per-coefficient posterior variance at p."""
        x = p.array if isinstance(p, ParamPoint) else np.asarray(p, dtype=float)
        if self._cache is None:
            self._build_cache()
        c = self._cache
        if not c:
            return self._predict_slow(x)
        xq = (x - c["lo"]) * c["inv_range"]
        delta = xq - c["Xn"]  # query minus training
        d2 = np.einsum("ij,ij->i", delta, delta)
        K = c["sf2"][:, None] * np.exp(d2[None, :] * (-0.5 * c["inv_ls2"][:, None]))
        if c["use_gradients"]:
            grads = K[:, :, None] * (delta[None, :, :] * c["inv_ls2"][:, None, None])
            rows = np.concatenate([K[:, :, None], grads], axis=2)
            rows = rows.reshape(K.shape[0], -1)
        else:
            rows = K
        mean_n = np.einsum("mi,mi->m", rows, c["alpha"])
        v = np.matmul(c["kinv"], rows[:, :, None])[:, :, 0]
        q = np.einsum("mi,mi->m", rows, v)
        var = np.clip(c["sf2"] - q, 0.0, None) * c["y_scale"] ** 2
        xi = mean_n * c["y_scale"] + c["y_mean"]
        return c["basis"] @ xi, var

    def _predict_slow(self, x):
        xi = np.empty(len(self.models))
        var = np.empty(len(self.models))
        for k, m in enumerate(self.models):
            xi[k] = m.predict(x[None, :])[0]
            var[k] = m.predict_variance(x[None, :])[0]
        return self.pod.inverse_transform(xi[None, :])[0], var


def predict_field(surrogate, p):
    """Reconstructed state and per-coefficient variance at a parameter point."""
    return surrogate.predict(p)


def train_field_surrogate(
    ds, partition, rank=14, mode="gf", seed=0, weight=None, n_jobs=1
):
    """POD + per-coefficient GP training on one partition.

    ``mode`` is "gf" (values only) or "ge" (values plus reduced-coefficient
    gradients obtained by projecting the state sensitivities).
    """
    if mode not in ("gf", "ge"):
        raise ValueError(f"mode must be 'gf' or 'ge', got {mode!r}")
    t0 = time.perf_counter()
    if weight is None:
        weight = pod_mod.build_weight(ParamPoint.midpoint(ds.bounds), ds.cfg)
    idx = ds.train_indices(partition)
    states = ds.states[:, idx]
    pod = pod_mod.WeightedPOD(n_modes=rank, weight=weight).fit(states.T)
    Xi = pod.transform(states.T)  # (partition, r)
    X = ds.params_array(idx)
    if mode == "ge":
        xi_grads = np.stack(
            [pod.transform_gradients(ds.sensitivities[i]) for i in idx]
        )  # (partition, r, n_p)

    def fit_one(k):
        model = GaussianProcessSurrogate(
            use_gradients=(mode == "ge"),
            input_bounds=ds.bounds,
            random_state=_mix_seed(seed, k),
        )
        if mode == "ge":
            model.fit(X, Xi[:, k], gradients=xi_grads[:, k, :])
        else:
            model.fit(X, Xi[:, k])
        return model

    models = _parallel_map(fit_one, range(pod.n_modes_), n_jobs)
    return FieldSurrogate(
        pod=pod,
        models=models,
        mode=mode,
        partition_size=partition,
        fit_seconds=time.perf_counter() - t0,
    )


def train_kpi_surrogate(ds, partition, mode="gf", seed=0):
    """GP directly from parameters to the scalar output."""
    if mode not in ("gf", "ge"):
        raise ValueError(f"mode must be 'gf' or 'ge', got {mode!r}")
    t0 = time.perf_counter()
    idx = ds.train_indices(partition)
    X = ds.params_array(idx)
    y = ds.kpi_values[idx]
    model = GaussianProcessSurrogate(
        use_gradients=(mode == "ge"),
        input_bounds=ds.bounds,
        random_state=_mix_seed(seed, 10_000),
    )
    if mode == "ge":
        model.fit(X, y, gradients=ds.kpi_gradients[idx])
    else:
        model.fit(X, y)
    model.fit_seconds_ = time.perf_counter() - t0
    model.partition_size_ = partition
    model.mode_ = mode
    return model


def _energy_of_state(p, u, cfg):
    K, _ = testbed.assemble(p, u, cfg)
    return 0.5 * float(u @ (K @ u))


@dataclass
class EvalReport:
    """Flat (partition, mode, metric, value) rows for CSV emission."""

    rows: list

    def get(self, partition, mode, metric):
        for part, md, met, val in self.rows:
            if part == partition and md == mode and met == metric:
                return val
        raise KeyError((partition, mode, metric))

    def to_csv(self, path):
        write_rows_csv(path, self.rows)


def write_rows_csv(path, rows):
    """CSV with the report schema header and full-precision numeric cells."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("partition,mode,metric,value\r\n")
        for partition, mode, metric, value in rows:
            fh.write(f"{partition},{mode},{metric},{value:.17g}\r\n")


def evaluate(ds, field_surrogates, kpi_surrogates, timings=True):
    """Score every surrogate on the held-out test set.

    Field reconstructions are measured in the energy norm of the stiffness
    reassembled at each test point's true converged state, so the metric is
    one fixed quadratic form per point regardless of the surrogate under
    test. The scalar output is scored as mean absolute percentage error,
    both recomputed from the reconstructed field and predicted directly.
    """
    test_idx = ds.test_indices()
    if test_idx.size == 0:
        raise ValueError("dataset has no test points")
    kpi_true = ds.kpi_values[test_idx]
    if np.any(kpi_true == 0.0):
        raise ZeroReferenceError("test set contains a zero scalar output")

    eval_mats = []
    for i in test_idx:
        K, _ = testbed.assemble(ds.points[i], ds.states[:, i], ds.cfg)
        eval_mats.append(K)

    rows = []
    for (partition, mode), surr in sorted(field_surrogates.items()):
        errs = np.empty(test_idx.size)
        base = np.empty(test_idx.size)
        ape_field = np.empty(test_idx.size)
        predict_times = np.empty(test_idx.size)
        for j, i in enumerate(test_idx):
            p = ds.points[i]
            u_true = ds.states[:, i]
            t0 = time.perf_counter()
            u_hat, _ = surr.predict(p)
            predict_times[j] = time.perf_counter() - t0
            errs[j] = pod_mod.relative_error(u_true, u_hat, eval_mats[j])
            u_proj = surr.pod.inverse_transform(
                surr.pod.transform(u_true[None, :])
            )[0]
            base[j] = pod_mod.relative_error(u_true, u_proj, eval_mats[j])
            w_hat = _energy_of_state(p, u_hat, ds.cfg)
            ape_field[j] = abs(w_hat - kpi_true[j]) / abs(kpi_true[j])
        rows.append((partition, mode, "field_error", float(errs.mean())))
        rows.append((partition, mode, "pod_baseline", float(base.mean())))
        rows.append(
            (partition, mode, "kpi_mape_field", float(100.0 * ape_field.mean()))
        )
        if timings:
            rows.append(
                (partition, mode, "predict_seconds_median",
                 float(np.median(predict_times)))
            )
            rows.append(
                (partition, mode, "field_fit_seconds", float(surr.fit_seconds))
            )

    X_test = ds.params_array(test_idx)
    for (partition, mode), model in sorted(kpi_surrogates.items()):
        pred = model.predict(X_test)
        ape = np.abs(pred - kpi_true) / np.abs(kpi_true)
        rows.append(
            (partition, mode, "kpi_mape_direct", float(100.0 * ape.mean()))
        )
        if timings:
            rows.append(
                (partition, mode, "kpi_fit_seconds",
                 float(getattr(model, "fit_seconds_", 0.0)))
            )
    return EvalReport(rows=rows)


def timing_report(ds, field_surrogates, kpi_surrogates):
    """Wall-clock rows: dataset generation and per-mode fit times."""
    rows = []
    for partition in ds.sizes:
        rows.append(
            (partition, "na", "simulation_seconds",
             float(np.sum(ds.solve_seconds[:partition])))
        )
    for (partition, mode), surr in sorted(field_surrogates.items()):
        rows.append((partition, mode, "field_fit_seconds", float(surr.fit_seconds)))
    for (partition, mode), model in sorted(kpi_surrogates.items()):
        rows.append(
            (partition, mode, "kpi_fit_seconds",
             float(getattr(model, "fit_seconds_", 0.0)))
        )
    return rows


def demo_one_dimensional(csv_path=None, seed=0):
    """Fit both GP variants to x*sin(x) from 5 samples with exact slopes.

    Writes the truth/prediction/95%-band grid to ``csv_path`` (if given)
    and returns the RMSE and mean band width of both variants.
    """

    def f(x):
        return x * np.sin(x)

    def df(x):
        return np.sin(x) + x * np.cos(x)

    lo, hi = 0.0, 10.0
    X = np.linspace(lo, hi, 5)[:, None]
    y = f(X[:, 0])
    grads = df(X[:, 0])[:, None]
    bounds = ((lo, hi),)

    gf = GaussianProcessSurrogate(
        input_bounds=bounds, random_state=seed
    ).fit(X, y)
    ge = GaussianProcessSurrogate(
        use_gradients=True, input_bounds=bounds, random_state=seed
    ).fit(X, y, gradients=grads)

    grid = np.linspace(lo, hi, 201)[:, None]
    truth = f(grid[:, 0])
    gf_mean, gf_std = gf.predict(grid, return_std=True)
    ge_mean, ge_std = ge.predict(grid, return_std=True)
    z95 = 1.959963984540054

    table = np.column_stack(
        [
            grid[:, 0],
            truth,
            gf_mean,
            gf_mean - z95 * gf_std,
            gf_mean + z95 * gf_std,
            ge_mean,
            ge_mean - z95 * ge_std,
            ge_mean + z95 * ge_std,
        ]
    )
    if csv_path is not None:
        header = "x,truth,gf_mean,gf_lo95,gf_hi95,ge_mean,ge_lo95,ge_hi95"
        with open(csv_path, "w", encoding="ascii", newline="") as fh:
            fh.write(header + "\r\n")
            for row in table:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\r\n")

    return {
        "gf_rmse": float(np.sqrt(np.mean((gf_mean - truth) ** 2))),
        "ge_rmse": float(np.sqrt(np.mean((ge_mean - truth) ** 2))),
        "gf_band_width": float(np.mean(2.0 * z95 * gf_std)),
        "ge_band_width": float(np.mean(2.0 * z95 * ge_std)),
        "table": table,
    }


def _truncated_error(pod, r, u, weight):
    Q = pod.basis_[:, :r]
    xi = Q.T @ (weight @ u)
    return pod_mod.relative_error(u, Q @ xi, weight)


def basis_study(ds, partitions=None, step=None, weight=None):
    """Reconstruction error against basis size, plain vs augmented snapshots.

    Test states are projected onto truncations of each basis and scored in
    the weight norm; returns (partition, basis kind, metric, value) rows.
    """
    if partitions is None:
        partitions = (min(ds.sizes), max(ds.sizes))
    if step is None:
        step = ds.augment_step
    if weight is None:
        weight = pod_mod.build_weight(ParamPoint.midpoint(ds.bounds), ds.cfg)
    test_idx = ds.test_indices()
    rows = []
    for partition in partitions:
        idx = ds.train_indices(partition)
        sols = ds.solutions(idx)
        for kind, augment in (("plain", False), ("augmented", True)):
            snap = pod_mod.build_snapshot_matrix(sols, augment=augment, step=step)
            basis = pod_mod.WeightedPOD(n_modes=None, weight=weight).fit(
                snap.matrix.T
            )
            r_max = min(basis.rank_, partition + ds.n_params + 1)
            for r in range(1, r_max + 1):
                errs = [
                    _truncated_error(basis, r, ds.states[:, i], weight)
                    for i in test_idx
                ]
                rows.append(
                    (partition, kind, f"recon_error_r{r}", float(np.mean(errs)))
                )
    return rows
