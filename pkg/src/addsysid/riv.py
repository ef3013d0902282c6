"""Refined instrumental-variable estimation of additive MIMO models.

One iteration freezes the current model, filters the data through the
current denominators, and solves a single weighted instrumental normal
system for a block-diagonal coefficient matrix whose diagonal blocks are
the next subsystem parameters. At convergence the residual, whitened by
the sample noise covariance, is uncorrelated with the instrument.

Per-sample regressors and instruments are held transposed, as arrays of
shape ``(N, n_y, d)``; the public ``build_*`` helpers return them in the
``(N, d, n_y)`` orientation.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .closed_loop import DiscreteController, noiseless_input
from .errors import NumericError, SingularSigmaWarning, ValidationError, dim_mismatch
from .lti import (
    AdditiveModel,
    FilterBank,
    Subsystem,
    is_hurwitz,
    mirror_unstable,
    poly_from_roots,
    theta_size,
)

log = logging.getLogger(__name__)

SIGMA_RTOL = 1e-12
SIGMA_REG = 1e-10
# relative to the output power; residuals below this are rounding noise
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SampledDataset:
    """Equidistant samples ``t_k = t0 + k h``; ``r`` only for closed loop."""

    h: float
    u: np.ndarray
    y: np.ndarray
    r: np.ndarray | None = None
    t0: float = 0.0

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.u, dtype=float).reshape(len(self.u), -1))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).reshape(len(self.y), -1))
        if not self.h > 0:
            raise ValidationError("sampling step must be positive", "DIM_MISMATCH")
        if u.shape[0] != y.shape[0] or u.shape[0] < 2:
            raise dim_mismatch("u and y need the same length N >= 2")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.r is not None:
            r = np.ascontiguousarray(np.asarray(self.r, dtype=float).reshape(len(self.r), -1))
            if r.shape != y.shape:
                raise dim_mismatch("r must have the shape of y")
            object.__setattr__(self, "r", r)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValidationError("non-finite samples", "NON_FINITE")

    @property
    def N(self):
        return self.u.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    @property
    def t(self):
        return self.t0 + self.h * np.arange(self.N)


@dataclass
class EstimatorOptions:
    max_iter: int = 100
    rel_tol: float = 1e-8
    stability_margin: float = 1e-6
    loop_mode: str = "open"
    on_unstable_iterate: str = "reflect"
    controller: DiscreteController | None = None
    # leading samples left out of every sum; the data is assumed to start
    # from rest, matching the zero filter states, so 0 is the default
    transient: int = 0
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.max_iter < 1 or not self.rel_tol > 0:
            raise ValidationError("max_iter >= 1 and rel_tol > 0 required", "BAD_OPTIONS")
        if self.loop_mode not in ("open", "closed"):
            raise ValidationError(f"unknown loop_mode {self.loop_mode!r}", "BAD_OPTIONS")
        if self.on_unstable_iterate not in ("reflect", "abort"):
            raise ValidationError("on_unstable_iterate must be reflect or abort", "BAD_OPTIONS")


@dataclass
class RivResult:
    model: AdditiveModel
    sigma_hat: np.ndarray
    acov: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    n_used: int = 0

    @property
    def beta(self):
        return self.model.beta

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "sigma": self.sigma_hat.tolist(),
            "acov": self.acov.tolist(),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "n_used": int(self.n_used),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                model=AdditiveModel.from_dict(d["model"]),
                sigma_hat=np.asarray(d["sigma"], dtype=float),
                acov=np.asarray(d["acov"], dtype=float),
                iterations=int(d["iterations"]),
                converged=bool(d["converged"]),
                n_used=int(d.get("n_used", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad estimate JSON: {exc}", "SCHEMA") from exc


def _check_dims(model, ds):
    if model.n_u != ds.n_u or model.n_y != ds.n_y:
        raise dim_mismatch(
            f"model is {model.n_y}x{model.n_u}, data has {ds.n_y} outputs / {ds.n_u} inputs")


def _instrument_signal(model, ds, opts):
    if opts.loop_mode == "open":
        return ds.u
    if ds.r is None:
        raise ValidationError("closed-loop estimation needs a reference", "MISSING_REFERENCE")
    if opts.controller is None:
        raise ValidationError("closed-loop estimation needs a controller", "MISSING_CONTROLLER")
    return noiseless_input(model, opts.controller, ds.r, ds.h)


class _Frozen:
    """Filtered signals for one frozen parameter vector."""

    def __init__(self, model, ds, opts, need_regressor=True):
        _check_dims(model, ds)
        self.model, self.ds = model, ds
        h = ds.h
        self.banks = [FilterBank.build(s.den, s.n, h) for s in model.subsystems]
        self.Fu = [b.apply(ds.u) for b in self.banks]
        self.xs = [np.einsum("kcl,lrc->kr", F[:, :, : s.m + 1], s.b)
                   for F, s in zip(self.Fu, model.subsystems)]
        x = np.sum(self.xs, axis=0)
        self.eps = ds.y - x
        self.z = _instrument_signal(model, ds, opts)
        self.Fz = self.Fu if self.z is ds.u else [b.apply(self.z) for b in self.banks]
        self.Fy = None
        if need_regressor:
            self.Fy = [b.apply(self.eps + xi) for b, xi in zip(self.banks, self.xs)]

    def regressor_block(self, i):
        """Transposed regressor of subsystem i, (N, n_y, d_i)."""
        s = self.model.subsystems[i]
        return _layout(s, -self.Fy[i][:, :, 1:], self.Fu[i][:, :, : s.m + 1])

    def instrument_block(self, i):
        s = self.model.subsystems[i]
        den2 = np.convolve(s.den, s.den)
        if s.n:
            F2 = FilterBank.build(den2, s.n + s.m, self.ds.h).apply(self.z)
            # -p^j B(p) / A(p)^2 z for j = 1..n
            a_cols = -np.stack(
                [np.einsum("kcl,lrc->kr", F2[:, :, j:j + s.m + 1], s.b)
                 for j in range(1, s.n + 1)], axis=-1)
        else:
            a_cols = np.zeros((self.ds.N, s.n_y, 0))
        return _layout(s, a_cols, self.Fz[i][:, :, : s.m + 1])

    def upsilon(self):
        return np.stack([F[:, :, 0] for F in self.Fy], axis=-1)


def _layout(s, a_cols, Fb):
    """Place denominator columns and Kronecker-structured numerator columns.

    ``a_cols`` is (N, n_y, n) and ``Fb`` is (N, n_u, m + 1) holding
    ``p^l / A`` applied to each input channel.
    """
    N, n_u, mp1 = Fb.shape
    n_y = s.n_y
    out = np.zeros((N, n_y, theta_size(s.n, s.m, n_y, n_u)))
    out[:, :, : s.n] = a_cols
    o = s.n
    for l in range(mp1):
        for c in range(n_u):
            for r in range(n_y):
                out[:, r, o + c * n_y + r] = Fb[:, c, l]
        o += n_u * n_y
    return out


def residual(model, ds):
    """``y - sum_i G_i u`` on the sample grid, (N, n_y)."""
    _check_dims(model, ds)
    return _Frozen(model, ds, EstimatorOptions(), need_regressor=False).eps


def subsystem_residual_output(model, ds, i):
    """Output minus the contributions of every subsystem except ``i``."""
    fr = _Frozen(model, ds, EstimatorOptions(), need_regressor=False)
    return fr.eps + fr.xs[i]


def build_regressor(model, ds, i):
    """Regressor of subsystem ``i`` as an (N, d_i, n_y) array."""
    fr = _Frozen(model, ds, EstimatorOptions())
    return fr.regressor_block(i).transpose(0, 2, 1)


def build_instrument(model, ds, i, opts=None):
    """Instrument of subsystem ``i`` as an (N, d_i, n_y) array."""
    opts = opts or EstimatorOptions()
    fr = _Frozen(model, ds, opts, need_regressor=False)
    return fr.instrument_block(i).transpose(0, 2, 1)


def noise_covariance(eps):
    """Sample covariance ``(1/N) sum eps eps^T``; warns when near singular."""
    eps = np.asarray(eps, dtype=float)
    eps = eps.reshape(len(eps), -1)
    S = eps.T @ eps / eps.shape[0]
    if sigma_is_singular(S):
        warnings.warn("sample noise covariance is singular", SingularSigmaWarning, stacklevel=2)
    return S


def sigma_is_singular(S):
    tr = np.trace(S)
    return not tr > 0 or np.linalg.eigvalsh(S).min() < SIGMA_RTOL * tr


def _weight_factor(S, floor=0.0):
    """``L`` with ``L L^T = Sigma^-1`` after regularization.

    ``floor`` is an absolute variance added to every direction; it keeps the
    weighting bounded when residuals shrink to rounding level (exact data).
    """
    S = 0.5 * (S + S.T)
    if sigma_is_singular(S):
        tr = np.trace(S)
        S = S + SIGMA_REG * max(tr, 0.0) / S.shape[0] * np.eye(S.shape[0])
    S = S + floor * np.eye(S.shape[0])
    w, V = np.linalg.eigh(S)
    if not w.min() > 0:
        raise NumericError("noise covariance is not positive definite", "SINGULAR_SIGMA")
    return V / np.sqrt(w)


def _sigma_floor(ds):
    return SIGMA_FLOOR * float(np.mean(np.var(ds.y, axis=0)))


def _whiten(blocks, L):
    """``L^T Phi_k^T`` for every k, flattened to (N n_y, d)."""
    X = np.matmul(L.T, blocks)
    return X.reshape(-1, X.shape[-1])


def _equilibrated_solve(M, rhs, cond_limit):
    r = np.sqrt(np.sum(M * M, axis=1))
    c = np.sqrt(np.sum(M * M, axis=0))
    if np.any(r == 0) or np.any(c == 0):
        raise NumericError("normal matrix has an empty row or column", "ILL_CONDITIONED")
    Ms = M / r[:, None] / c[None, :]
    cond = np.linalg.cond(Ms)
    if not cond < cond_limit:
        raise NumericError(f"normal matrix condition number {cond:.3g}", "ILL_CONDITIONED")
    return np.linalg.solve(Ms, rhs / r[:, None]) / c[:, None]


def _stabilize(model, opts):
    subs = []
    for s in model.subsystems:
        if s.n and not is_hurwitz(s.den, opts.stability_margin):
            if opts.on_unstable_iterate == "abort":
                raise NumericError("iterate has an unstable denominator", "UNSTABLE_ITERATE")
            log.debug("reflecting unstable denominator %s", s.a)
            s = Subsystem(mirror_unstable(s.den, opts.stability_margin)[1:], s.b)
        subs.append(s)
    return AdditiveModel(tuple(subs), check=False)


def riv_step(model, ds, opts=None):
    """One refined-IV iteration; returns the next model."""
    opts = opts or EstimatorOptions()
    fr = _Frozen(model, ds, opts)
    k0 = opts.transient
    S = fr.eps[k0:].T @ fr.eps[k0:] / (ds.N - k0)
    L = _weight_factor(S, _sigma_floor(ds))
    Phi = np.concatenate([fr.regressor_block(i) for i in range(model.K)], axis=-1)[k0:]
    PhiHat = np.concatenate([fr.instrument_block(i) for i in range(model.K)], axis=-1)[k0:]
    Ups = fr.upsilon()[k0:]
    Xh = _whiten(PhiHat, L)
    X = _whiten(Phi, L)
    Yw = _whiten(Ups, L)
    M = Xh.T @ X
    rhs = Xh.T @ Yw
    Bfull = _equilibrated_solve(M, rhs, opts.cond_limit)
    off = model.offsets()
    beta = np.concatenate([Bfull[off[i]:off[i + 1], i] for i in range(model.K)])
    new = AdditiveModel.from_beta(beta, model.orders, model.n_y, model.n_u, check=False)
    return _stabilize(new, opts)


def asymptotic_covariance(model, ds, opts=None, sigma=None):
    """Estimate of ``N Cov(beta_hat)`` from the instrument Gram at ``model``."""
    opts = opts or EstimatorOptions()
    fr = _Frozen(model, ds, opts, need_regressor=False)
    k0 = opts.transient
    n = ds.N - k0
    if sigma is None:
        sigma = fr.eps[k0:].T @ fr.eps[k0:] / n
    L = _weight_factor(np.asarray(sigma, dtype=float), _sigma_floor(ds))
    PhiHat = np.concatenate([fr.instrument_block(i) for i in range(model.K)], axis=-1)[k0:]
    Xh = _whiten(PhiHat, L)
    G = Xh.T @ Xh / n
    s = np.sqrt(np.diag(G))
    if np.any(s == 0):
        raise NumericError("instrument Gram has a zero column", "ILL_CONDITIONED")
    Gs = G / s[:, None] / s[None, :]
    if not np.linalg.cond(Gs) < opts.cond_limit:
        raise NumericError("instrument Gram is ill-conditioned", "ILL_CONDITIONED")
    P = np.linalg.inv(Gs) / s[:, None] / s[None, :]
    return 0.5 * (P + P.T)


def _canonical_perm(model):
    keys = [(s.order, tuple(s.theta)) for s in model.subsystems]
    return sorted(range(model.K), key=lambda i: keys[i])


def _block_index(model, perm):
    """Indices into ``beta`` of ``model.permuted(perm)`` expressed in ``model``."""
    off = model.offsets()
    return np.concatenate([np.arange(off[i], off[i + 1]) for i in perm])


def riv_solve(model0, ds, opts=None):
    """Iterate :func:`riv_step` to convergence and attach covariance estimates.

    Subsystems are processed in a canonical order internally, so permuting
    ``model0`` permutes the output identically, bit for bit.
    """
    opts = opts or EstimatorOptions()
    _check_dims(model0, ds)
    if not model0.is_stable(0.0):
        raise ValidationError("initial model must be stable", "UNSTABLE_INIT")
    perm = _canonical_perm(model0)
    model = model0.permuted(perm)
    trace = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        new = riv_step(model, ds, opts)
        b0, b1 = model.beta, new.beta
        step = np.linalg.norm(b1 - b0) / max(np.linalg.norm(b0), np.finfo(float).tiny)
        trace.append(float(step))
        model = new
        if not np.all(np.isfinite(b1)):
            raise NumericError("iterate diverged to non-finite values", "NUMERIC_FAIL")
        if step < opts.rel_tol:
            converged = True
            break
    fr = _Frozen(model, ds, opts, need_regressor=False)
    k0 = opts.transient
    sigma = fr.eps[k0:].T @ fr.eps[k0:] / (ds.N - k0)
    acov = asymptotic_covariance(model, ds, opts, sigma=sigma)
    inv = np.argsort(perm)
    out = model.permuted(inv)
    idx = _block_index(model, inv)
    acov = acov[np.ix_(idx, idx)]
    return RivResult(AdditiveModel(out.subsystems, check=False), sigma, acov, it,
                     converged, trace, ds.N - k0)


def alignment_permutation(est, ref):
    """Permutation ``perm`` such that ``est.permuted(perm)`` is closest to ``ref``.

    Only subsystems whose orders agree are exchanged. Exhaustive search for
    groups of up to 8 subsystems, optimal assignment above that.
    """
    if est.K != ref.K:
        return list(range(est.K))
    groups = {}
    for i, (oe, orf) in enumerate(zip(est.orders, ref.orders)):
        if oe == orf:
            groups.setdefault(oe, []).append(i)
    perm = list(range(est.K))
    th_e = [s.theta for s in est.subsystems]
    th_r = [s.theta for s in ref.subsystems]
    for idx in groups.values():
        cost = np.array([[np.sum((th_e[a] - th_r[b]) ** 2) for a in idx] for b in idx])
        if len(idx) <= 8:
            best = min(itertools.permutations(range(len(idx))),
                       key=lambda p: sum(cost[b, p[b]] for b in range(len(idx))))
        else:
            _, best = linear_sum_assignment(cost)
        for b, a in enumerate(best):
            perm[idx[b]] = idx[a]
    return perm


def align_submodels(est, ref):
    """``est`` with subsystems reordered to best match ``ref``."""
    return est.permuted(alignment_permutation(est, ref))


def arx_poles(ds, order, h=None):
    """Continuous-time poles of a least-squares MIMO ARX fit of the given order.

    ``y(k) + sum_j A_j y(k-j) = sum_j B_j u(k-j)`` is solved jointly for all
    outputs; the eigenvalues of the block companion matrix are mapped through
    ``s = log(z) / h``. Poles on or outside the unit circle are dropped.
    """
    h = h or ds.h
    y, u = ds.y, ds.u
    N = ds.N
    if N <= 4 * order * (ds.n_y + ds.n_u):
        return np.empty(0, dtype=complex)
    lag = lambda x, j: x[order - j:N - j]  # noqa: E731
    X = np.hstack([-lag(y, j) for j in range(1, order + 1)] +
                  [lag(u, j) for j in range(1, order + 1)])
    coef, *_ = np.linalg.lstsq(X, y[order:], rcond=None)
    ny = ds.n_y
    Acomp = np.zeros((ny * order, ny * order))
    for j in range(order):
        Acomp[:ny, j * ny:(j + 1) * ny] = -coef[j * ny:(j + 1) * ny].T
    Acomp[ny:, :-ny] = np.eye(ny * (order - 1))
    z = np.linalg.eigvals(Acomp)
    z = z[(np.abs(z) < 1 - 1e-9) & (np.abs(z) > 1e-9)]
    # negative real z has no real-rational continuous equivalent
    z = z[~((np.abs(z.imag) < 1e-12) & (z.real < 0))]
    return np.log(z.astype(complex)) / h


def _split_poles(poles, orders):
    """Distribute poles over subsystems; returns one root array per subsystem or None."""
    need = sum(n for n, _ in orders)
    # conjugate pairs stay together; lightly damped (near the axis) first
    ups = [p for p in poles if p.imag > 1e-9 * abs(p)]
    reals = [complex(p.real, 0) for p in poles if abs(p.imag) <= 1e-9 * abs(p)]
    groups = [[p, np.conj(p)] for p in ups] + [[p] for p in reals]
    groups.sort(key=lambda g: -g[0].real / abs(g[0]))
    chosen, count = [], 0
    for g in groups:
        if count + len(g) <= need:
            chosen.append(g)
            count += len(g)
    if count < need:
        return None
    flat = [p for g in sorted(chosen, key=lambda g: abs(g[0])) for p in g]
    out, k = [], 0
    for n, _ in orders:
        r = np.array(flat[k:k + n], dtype=complex)
        k += n
        if n and (abs(np.sum(r).imag) > 1e-9 * np.sum(np.abs(r)) or
                  abs(np.prod(r).imag) > 1e-9 * np.prod(np.abs(r))):
            r = -np.abs(r)  # broken pair: use real poles of the same magnitudes
        out.append(r)
    return out


def _cap_damping(poles, zmax):
    w = np.abs(poles)
    z = np.minimum(-poles.real / w, zmax)
    capped = -z * w + 1j * np.sign(poles.imag) * w * np.sqrt(1 - z**2)
    return np.where(np.abs(poles.imag) > 0, capped, poles)


def init_from_orders(ds, orders, h=None, damping=0.3, arx=True, max_damping=0.1):
    """Stable starting model for given ``(n_i, m_i)`` orders.

    Poles come from a MIMO ARX fit when it yields enough stable ones. ARX is
    biased towards heavy damping under colored noise, so complex poles have
    their damping ratio capped at ``max_damping``. Otherwise Butterworth-like poles are spread logarithmically across the
    band the record can resolve. Numerators then follow from linear least
    squares with the denominators held fixed.
    """
    h = h or ds.h
    K = len(orders)
    need = sum(n for n, _ in orders)
    roots_per = None
    if arx and need:
        na = max(1, -(-need // ds.n_y))
        roots_per = _split_poles(_cap_damping(arx_poles(ds, na, h), max_damping), orders)
    w_lo = 2 * np.pi * 10.0 / (ds.N * h)
    w_hi = 0.3 * np.pi / h
    ws = np.geomspace(w_lo, w_hi, K + 2)[1:-1] if K > 1 else [np.sqrt(w_lo * w_hi)]
    subs = []
    for i, ((n, m), w) in enumerate(zip(orders, ws)):
        if n and roots_per is not None:
            a = poly_from_roots(roots_per[i])[1:]
        elif n:
            k = np.arange(n)
            ang = np.pi / 2 + np.pi * (2 * k + 1) / (2 * n)
            roots = w * np.exp(1j * ang)
            if n == 2:
                roots = w * np.array([-damping + 1j * np.sqrt(1 - damping**2),
                                      -damping - 1j * np.sqrt(1 - damping**2)])
            a = poly_from_roots(roots)[1:]
        else:
            a = np.empty(0)
        subs.append(Subsystem(a, np.zeros((m + 1, ds.n_y, ds.n_u))))
    model = AdditiveModel(tuple(subs), check=False)
    fr = _Frozen(model, ds, EstimatorOptions())
    cols, which = [], []
    for i, s in enumerate(model.subsystems):
        blk = _layout(s, np.zeros((ds.N, ds.n_y, s.n)), fr.Fu[i][:, :, : s.m + 1])
        cols.append(blk[:, :, s.n:])
    X = np.concatenate(cols, axis=-1).reshape(-1, sum(c.shape[-1] for c in cols))
    coef, *_ = np.linalg.lstsq(X, ds.y.reshape(-1), rcond=None)
    beta, o = [], 0
    for s in model.subsystems:
        nb = (s.m + 1) * ds.n_y * ds.n_u
        beta.extend(s.a)
        beta.extend(coef[o:o + nb])
        o += nb
    return AdditiveModel.from_beta(np.array(beta), model.orders, ds.n_y, ds.n_u, check=False)
