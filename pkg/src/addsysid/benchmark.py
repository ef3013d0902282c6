"""Three-mass benchmark, noise generation, SNR calibration and Monte Carlo sweeps."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

from .closed_loop import DiscreteController, diagonal_controller, lead_lag, simulate_closed_loop
from .errors import NumericError, SysIdError, ValidationError
from .lti import AdditiveModel, freq_response, simulate_additive
from .riv import EstimatorOptions, SampledDataset, align_submodels, alignment_permutation, riv_solve
from .structured import ModalMap, ModalParams, modal_eval, modal_init, project

log = logging.getLogger(__name__)

DEFAULT_NOISE = ((1.0, 0.5), (1.0, -0.85))  # (1 + 0.5 q^-1) / (1 - 0.85 q^-1)


@dataclass
class BenchmarkSpec:
    masses: tuple = (1.0, 1.0, 1.0)
    springs: tuple = (50.0, 50.0, 50.0)
    damping_ratio: float = 0.02
    fs: float = 100.0
    loop_mode: str = "open"
    arma_num: tuple = DEFAULT_NOISE[0]
    arma_den: tuple = DEFAULT_NOISE[1]
    snr_db: float | None = 30.0  # None: noise-free
    controller: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.masses) != len(self.springs):
            raise ValidationError("one spring per mass", "BAD_BENCHMARK")
        if min(self.masses) <= 0 or min(self.springs) <= 0 or not self.fs > 0:
            raise ValidationError("physical parameters must be positive", "BAD_BENCHMARK")
        if not 0 < self.damping_ratio < 1:
            raise ValidationError("damping ratio must lie in (0, 1)", "BAD_BENCHMARK")
        if self.loop_mode not in ("open", "closed"):
            raise ValidationError("loop_mode must be open or closed", "BAD_BENCHMARK")

    @property
    def h(self):
        return 1.0 / self.fs

    def to_dict(self):
        d = asdict(self)
        for k in ("masses", "springs", "arma_num", "arma_den"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown benchmark fields {sorted(extra)}", "SCHEMA")
        d = dict(d)
        for k in ("masses", "springs", "arma_num", "arma_den"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


def chain_modes(masses, springs):
    """Undamped modes of a grounded spring-mass chain.

    Spring ``i`` joins mass ``i`` to mass ``i - 1``; the first spring is
    anchored to the ground. Returns natural frequencies (ascending) and
    mass-normalized mode shapes as columns.
    """
    m = np.asarray(masses, dtype=float)
    k = np.asarray(springs, dtype=float)
    n = m.size
    Kmat = np.zeros((n, n))
    for i in range(n):
        Kmat[i, i] += k[i]
        if i > 0:
            Kmat[i - 1, i - 1] += k[i]
            Kmat[i, i - 1] -= k[i]
            Kmat[i - 1, i] -= k[i]
    w2, Phi = scipy.linalg.eigh(Kmat, np.diag(m))
    return np.sqrt(w2), Phi


def three_mass_params(spec):
    w, Phi = chain_modes(spec.masses, spec.springs)
    # force inputs, position outputs: residue of mode i is phi phi^T / w^2
    pl = (Phi / w**2).T
    pr = Phi.T
    return ModalParams(np.full(w.size, spec.damping_ratio), w, pl, pr).normalized()


def build_three_mass(spec=None):
    """Additive modal model of the chain, one subsystem per mode."""
    return modal_eval(three_mass_params(spec or BenchmarkSpec()))


def gen_noise(N, n_y, arma_num=DEFAULT_NOISE[0], arma_den=DEFAULT_NOISE[1], seed=None,
              scale=1.0):
    """Independent ARMA-filtered Gaussian channels, ``scale`` is the std of e."""
    den = np.asarray(arma_den, dtype=float)
    if den.size > 1 and np.any(np.abs(np.roots(den)) >= 1):
        raise NumericError("ARMA denominator is not stable", "UNSTABLE_NOISE_FILTER")
    rng = np.random.default_rng(seed)
    e = scale * rng.standard_normal((N, n_y))
    return scipy.signal.lfilter(np.asarray(arma_num, dtype=float), den, e, axis=0)


def arma_variance(arma_num, arma_den, n_terms=100000):
    """Output variance of the ARMA filter for unit-variance white input."""
    imp = np.zeros(n_terms)
    imp[0] = 1.0
    g = scipy.signal.lfilter(arma_num, arma_den, imp)
    return float(g @ g)


def snr_scale(x, v_unit, target_db):
    """Scalar ``c`` giving ``10 log10(mean_j var x_j / mean_j var(c v)_j) = target``."""
    px = float(np.mean(np.var(np.asarray(x).reshape(len(x), -1), axis=0)))
    pv = float(np.mean(np.var(np.asarray(v_unit).reshape(len(v_unit), -1), axis=0)))
    if not px > 0:
        raise NumericError("noise-free output has zero power", "ZERO_SIGNAL")
    if not pv > 0:
        raise NumericError("noise realization has zero power", "ZERO_SIGNAL")
    return np.sqrt(px / pv * 10 ** (-target_db / 10))


def calibrate_snr(x, v_unit, target_db):
    """``c * v_unit`` scaled to the target channel-averaged SNR."""
    return snr_scale(x, v_unit, target_db) * np.asarray(v_unit, dtype=float)


def measured_snr_db(x, v):
    px = np.mean(np.var(np.asarray(x).reshape(len(x), -1), axis=0))
    pv = np.mean(np.var(np.asarray(v).reshape(len(v), -1), axis=0))
    return 10 * np.log10(px / pv)


def default_controller(spec=None, model=None, loop_gain=1.0):
    """Diagonal lead-lag stand-in controller for the benchmark.

    Per channel ``k_j (1 + s/w_z)/(1 + s/w_p)`` with ``w_z = w_c/3``,
    ``w_p = 3 w_c`` and ``w_c = 0.3 w_1`` (``w_1`` the slowest mode); ``k_j``
    sets the collocated loop gain ``|G_jj C_j|`` to ``loop_gain`` at ``w_c``,
    so the default puts the crossover there. Tustin-discretized.
    """
    spec = spec or BenchmarkSpec()
    model = model or build_three_mass(spec)
    if model.n_u != model.n_y:
        raise ValidationError("default controller needs a square plant", "DIM_MISMATCH")
    w1 = min(abs(p) for s in model.subsystems for p in s.poles())
    wc = 0.3 * w1
    wz, wp = wc / 3, 3 * wc
    G = freq_response(model, [wc])[0]
    lead = abs((1 + 1j * wc / wz) / (1 + 1j * wc / wp))
    blocks = [lead_lag(loop_gain / (abs(G[j, j]) * lead), wz, wp, spec.h) for j in range(model.n_y)]
    return diagonal_controller(blocks, spec.h)


def benchmark_controller(spec, model=None):
    if spec.controller is not None:
        return DiscreteController.from_dict(spec.controller)
    return default_controller(spec, model)


def simulate_dataset(model, spec, N, seed=None, controller=None):
    """One benchmark record: unit white excitation plus SNR-calibrated noise.

    Returns ``(dataset, x)`` with ``x = y - v`` the plant output before the
    additive noise. In closed loop the excitation is the reference and the
    noise is scaled against the output of the loop run without noise.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    g_exc, g_noise = (np.random.default_rng(c) for c in ss.spawn(2))
    h = spec.h
    exc = g_exc.standard_normal((N, model.n_u if spec.loop_mode == "open" else model.n_y))
    if spec.snr_db is not None:
        v_unit = gen_noise(N, model.n_y, spec.arma_num, spec.arma_den, seed=g_noise)
    if spec.loop_mode == "open":
        x = simulate_additive(model, exc, h)
        v = calibrate_snr(x, v_unit, spec.snr_db) if spec.snr_db is not None else 0.0
        return SampledDataset(h, exc, x + v), x
    ctrl = controller or benchmark_controller(spec, model)
    zero = np.zeros((N, model.n_y))
    u0, x0 = simulate_closed_loop(model, ctrl, exc, zero, h)
    if spec.snr_db is None:
        return SampledDataset(h, u0, x0, exc), x0
    v = calibrate_snr(x0, v_unit, spec.snr_db)
    u, y = simulate_closed_loop(model, ctrl, exc, v, h)
    return SampledDataset(h, u, y, exc), y - v


# --------------------------------------------------------------------------- Monte Carlo

PIPELINES = {
    # name: (estimator loop variant, structured weighting)
    "unstructured": ("native", None),
    "structured": ("native", "acov"),
    "structured-identity": ("native", "identity"),
    "open-on-closed": ("open", None),
    "open-on-closed-structured": ("open", "acov"),
}

# a_{i,2} and B_{i,0}(3,3) of the three modes in beta
TRACKED_PARAMS = (1, 12, 23, 10, 21, 32)


def param_name(model, idx):
    """Readable name of ``beta[idx]``: ``a<i>_<j>`` or ``B<i>_<l>[r,c]``, 1-based."""
    off = model.offsets()
    i = int(np.searchsorted(off, idx, side="right")) - 1
    s = model.subsystems[i]
    k = idx - off[i]
    if k < s.n:
        return f"a{i + 1}_{k + 1}"
    k -= s.n
    l, rem = divmod(k, s.n_y * s.n_u)
    c, r = divmod(rem, s.n_y)
    return f"B{i + 1}_{l}[{r + 1};{c + 1}]"


@dataclass
class McConfig:
    sample_sizes: tuple = (1000, 10000)
    runs: int = 50
    seed: int = 0
    init_perturbation: float = 0.025
    tracked: tuple | None = None
    pipelines: tuple = ("unstructured",)
    workers: int | None = None

    def __post_init__(self):
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        self.pipelines = tuple(self.pipelines)
        if self.runs < 1:
            raise ValidationError("runs must be >= 1", "BAD_CONFIG")
        if not self.sample_sizes or min(self.sample_sizes) < 10:
            raise ValidationError("sample sizes must be >= 10", "BAD_CONFIG")
        if not 0 <= self.init_perturbation < 1:
            raise ValidationError("init_perturbation must lie in [0, 1)", "BAD_CONFIG")
        bad = [p for p in self.pipelines if p not in PIPELINES]
        if bad or not self.pipelines:
            raise ValidationError(f"unknown pipelines {bad}; choose from {list(PIPELINES)}",
                                  "BAD_CONFIG")

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValidationError(f"unknown Monte Carlo fields {sorted(extra)}", "SCHEMA")
        return cls(**d)


@dataclass
class McResultTable:
    """Squared-error statistics of a Monte Carlo sweep.

    ``errors[(method, N)]`` holds the aligned ``beta`` errors of the
    successful runs (rows in run order), ``rhos`` the structured estimates,
    and ``failures`` the number of excluded runs.
    """

    tracked: tuple
    names: tuple
    sample_sizes: tuple
    methods: tuple
    errors: dict = field(default_factory=dict)
    rhos: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    runs: int = 0

    def mse(self, method, N):
        E = self.errors[(method, N)][:, list(self.tracked)]
        return np.sum(E**2, axis=0) / E.shape[0]

    def rows(self):
        out = []
        for method in self.methods:
            for N in self.sample_sizes:
                if self.errors.get((method, N)) is None or not len(self.errors[(method, N)]):
                    continue
                for name, v in zip(self.names, self.mse(method, N)):
                    out.append((method, N, name, float(v)))
        return out


def _estimate(ds, m0, spec, ctrl, loop):
    mode = spec.loop_mode if loop == "native" else "open"
    opts = EstimatorOptions(loop_mode=mode, controller=ctrl if mode == "closed" else None)
    return riv_solve(m0, ds, opts)


def _finish(res, truth, m0, weight):
    """Aligned ``beta`` error and, for structured pipelines, aligned ``rho``."""
    if weight is None:
        return align_submodels(res.model, truth).beta - truth.beta, None
    pmap = ModalMap.for_model(res.model)
    try:
        rho0 = modal_init(res.model).to_vector()
    except SysIdError:
        rho0 = modal_init(m0).to_vector()
    Q = res.acov if weight == "acov" else np.eye(res.acov.shape[0])
    pr = project(res.beta, Q, pmap, rho0, cov=res.acov)
    p = pr.params
    perm = alignment_permutation(modal_eval(p), truth)
    p = ModalParams(p.xi[perm], p.omega[perm], p.psi_l[perm], p.psi_r[perm])
    return modal_eval(p).beta - truth.beta, p.to_vector()


def _mc_job(args):
    spec, truth_dict, ctrl_dict, mc, size_idx, run_idx = args
    truth = AdditiveModel.from_dict(truth_dict)
    ctrl = DiscreteController.from_dict(ctrl_dict) if ctrl_dict else None
    N = mc.sample_sizes[size_idx]
    s_data, s_init = np.random.SeedSequence([mc.seed, size_idx, run_idx]).spawn(2)
    try:
        ds, _ = simulate_dataset(truth, spec, N, s_data, ctrl)
    except SysIdError as exc:
        return {k: (None, None, str(exc)) for k in mc.pipelines}
    d = mc.init_perturbation
    b0 = truth.beta * (1 + np.random.default_rng(s_init).uniform(-d, d, truth.n_params))
    m0 = AdditiveModel.from_beta(b0, truth.orders, truth.n_y, truth.n_u, check=False)
    fits, out = {}, {}
    for kind in mc.pipelines:
        loop, weight = PIPELINES[kind]
        try:
            if loop not in fits:
                try:
                    fits[loop] = _estimate(ds, m0, spec, ctrl, loop)
                except (SysIdError, np.linalg.LinAlgError) as exc:
                    fits[loop] = exc
            if isinstance(fits[loop], Exception):
                raise fits[loop]
            err, rho = _finish(fits[loop], truth, m0, weight)
            out[kind] = (err, rho, None)
        except (SysIdError, np.linalg.LinAlgError) as exc:
            out[kind] = (None, None, str(exc))
    return out


def run_monte_carlo(spec, mc, truth=None, controller=None):
    """Monte Carlo sweep over ``mc.sample_sizes`` for every pipeline in ``mc.pipelines``.

    Each run draws fresh excitation and noise from a stream seeded by
    ``(seed, size index, run index)``, starts the estimator from the truth
    perturbed uniformly by ``init_perturbation`` per parameter and aligns
    the estimate to the truth. Runs that raise are excluded and counted;
    more than 20% failures for any cell raises MC_UNRELIABLE with the
    table attached as ``exc.table``.
    """
    truth = truth or build_three_mass(spec)
    if spec.loop_mode == "closed":
        controller = controller or benchmark_controller(spec, truth)
    if any(PIPELINES[p][0] == "open" for p in mc.pipelines) and spec.loop_mode != "closed":
        raise ValidationError("open-on-closed pipelines need closed-loop data", "BAD_CONFIG")
    tracked = tuple(mc.tracked) if mc.tracked is not None else (
        TRACKED_PARAMS if truth.n_params == 33 else tuple(range(truth.n_params)))
    if max(tracked) >= truth.n_params or min(tracked) < 0:
        raise ValidationError("tracked index out of range", "BAD_CONFIG")
    ctrl_d = controller.to_dict() if controller is not None else None
    jobs = [(spec, truth.to_dict(), ctrl_d, mc, i, k)
            for i in range(len(mc.sample_sizes)) for k in range(mc.runs)]
    workers = mc.workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_mc_job(j) for j in jobs]
    table = McResultTable(tracked, tuple(param_name(truth, i) for i in tracked),
                          mc.sample_sizes, mc.pipelines, runs=mc.runs)
    worst = 0.0
    for kind in mc.pipelines:
        for i, N in enumerate(mc.sample_sizes):
            chunk = results[i * mc.runs:(i + 1) * mc.runs]
            ok = [r[kind] for r in chunk if r[kind][0] is not None]
            for r in chunk:
                if r[kind][2] is not None:
                    log.info("run failed (%s, N=%d): %s", kind, N, r[kind][2])
            table.errors[(kind, N)] = np.array([e for e, _, _ in ok]).reshape(len(ok), truth.n_params)
            if PIPELINES[kind][1] is not None:
                table.rhos[(kind, N)] = np.array([p for _, p, _ in ok])
            table.failures[(kind, N)] = mc.runs - len(ok)
            worst = max(worst, (mc.runs - len(ok)) / mc.runs)
    if worst > 0.2:
        exc = NumericError(f"{worst:.0%} of the runs failed in at least one cell", "MC_UNRELIABLE")
        exc.table = table
        raise exc
    return table


def emit_results(table, fmt, path):
    """Write ``table`` as CSV rows ``method,N,param,mse`` or as a log-log SVG."""
    rows = table.rows() if isinstance(table, McResultTable) else list(table)
    if not rows:
        raise ValidationError("nothing to emit: empty result table", "EMPTY_TABLE")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "N", "param", "mse"])
            for method, N, name, v in rows:
                w.writerow([method, N, name, repr(float(v))])
    elif fmt == "svg":
        _plot_rows(rows, path)
    else:
        raise ValidationError(f"unknown format {fmt!r}", "BAD_FORMAT")
    return path


def read_results_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["method", "N", "param", "mse"]:
            raise ValidationError(f"{path}: expected header method,N,param,mse", "SCHEMA")
        try:
            return [(m, int(n), p, float(v)) for m, n, p, v in r]
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}", "SCHEMA") from exc


def _plot_rows(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = {}
    for method, N, name, v in rows:
        series.setdefault((method, name), []).append((N, v))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (method, name), pts in series.items():
        pts.sort()
        (line,) = ax.loglog([p[0] for p in pts], [max(p[1], 1e-300) for p in pts], marker="o",
                            ls="-" if PIPELINES.get(method, (None, None))[1] else "--", label=f"{method}: {name}")
        line.set_gid(f"series:{method}:{name}")
    ax.set_xlabel("N")
    ax.set_ylabel("MSE")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
