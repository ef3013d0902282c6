"""Second-stage projection of an additive estimate onto a structured model.

The structured parameters ``rho`` enter through a smooth map ``f(rho) = beta``.
Given an unstructured estimate ``beta_hat`` and its asymptotic covariance
``P``, the projection minimizes ``0.5 |beta_hat - f(rho)|^2`` in the norm
induced by ``Q^-1``; ``Q = P`` gives the smallest asymptotic covariance.

The built-in :class:`ModalMap` describes sums of lightly damped modes with
rank-one residues ``psi_l psi_r^T / (1 + 2 (xi/w) p + p^2/w^2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, SingularJacobianWarning, ValidationError
from .lti import AdditiveModel, Subsystem

RANK_RTOL = 1e-10


class ParameterMap:
    """Interface for ``f(rho) = beta``.

    Subclasses implement :meth:`eval` and :meth:`jacobian`. Maps with a
    gauge (a manifold of ``rho`` giving the same ``beta``) also override
    :meth:`normalize` and :meth:`tangent`; the optimizer then moves only
    along the tangent directions and re-normalizes after each step.
    """

    name = "generic"
    dim_rho = 0
    dim_beta = 0

    def eval(self, rho):
        raise NotImplementedError

    def jacobian(self, rho):
        raise NotImplementedError

    def normalize(self, rho):
        return np.asarray(rho, dtype=float)

    def tangent(self, rho):
        return np.eye(self.dim_rho)


@dataclass
class ModalParams:
    xi: np.ndarray
    omega: np.ndarray
    psi_l: np.ndarray
    psi_r: np.ndarray

    def __post_init__(self):
        self.xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        self.psi_l = np.atleast_2d(np.asarray(self.psi_l, dtype=float))
        self.psi_r = np.atleast_2d(np.asarray(self.psi_r, dtype=float))
        K = self.xi.size
        if not (self.omega.size == K and len(self.psi_l) == K and len(self.psi_r) == K):
            raise ValidationError("modal parameter arrays disagree on the mode count",
                                  "DIM_MISMATCH")
        if np.any(self.omega <= 0):
            raise ValidationError("natural frequencies must be positive", "BAD_MODE")

    @property
    def K(self):
        return self.xi.size

    def to_vector(self):
        return np.concatenate([np.r_[self.xi[i], self.omega[i], self.psi_l[i], self.psi_r[i]]
                               for i in range(self.K)])

    @classmethod
    def from_vector(cls, rho, n_y, n_u):
        rho = np.asarray(rho, dtype=float)
        w = 2 + n_y + n_u
        blocks = rho.reshape(-1, w)
        return cls(blocks[:, 0], blocks[:, 1], blocks[:, 2:2 + n_y], blocks[:, 2 + n_y:])

    def normalized(self):
        pl, pr = self.psi_l.copy(), self.psi_r.copy()
        for i in range(self.K):
            c = np.linalg.norm(pr[i])
            if c == 0:
                continue
            nz = np.flatnonzero(pr[i])
            if pr[i, nz[0]] < 0:
                c = -c
            pr[i] /= c
            pl[i] *= c
        return ModalParams(self.xi.copy(), self.omega.copy(), pl, pr)

    def to_dict(self):
        return [{"xi": float(self.xi[i]), "omega": float(self.omega[i]),
                 "psi_l": self.psi_l[i].tolist(), "psi_r": self.psi_r[i].tolist()}
                for i in range(self.K)]

    @classmethod
    def from_dict(cls, modes):
        return cls([m["xi"] for m in modes], [m["omega"] for m in modes],
                   [m["psi_l"] for m in modes], [m["psi_r"] for m in modes])


def modal_eval(params):
    """Additive model of the modes; denominators ``1 + (2 xi/w) p + p^2/w^2``."""
    subs = []
    for i in range(params.K):
        xi, w = params.xi[i], params.omega[i]
        a = np.array([2 * xi / w, 1 / w**2])
        subs.append(Subsystem(a, np.outer(params.psi_l[i], params.psi_r[i])[None]))
    return AdditiveModel(tuple(subs), check=False)


def modal_jacobian(params):
    """Analytic ``d beta / d rho`` with the stacking of :meth:`ModalParams.to_vector`."""
    K = params.K
    n_y, n_u = params.psi_l.shape[1], params.psi_r.shape[1]
    db, dr = 2 + n_y * n_u, 2 + n_y + n_u
    J = np.zeros((K * db, K * dr))
    for i in range(K):
        xi, w = params.xi[i], params.omega[i]
        pl, pr = params.psi_l[i], params.psi_r[i]
        blk = np.zeros((db, dr))
        blk[0, 0] = 2 / w
        blk[0, 1] = -2 * xi / w**2
        blk[1, 1] = -2 / w**3
        blk[2:, 2:2 + n_y] = np.kron(pr[:, None], np.eye(n_y))
        blk[2:, 2 + n_y:] = np.kron(np.eye(n_u), pl[:, None])
        J[i * db:(i + 1) * db, i * dr:(i + 1) * dr] = blk
    return J


def modal_init(model):
    """Modal parameters from an unstructured model with one mode per subsystem.

    The residue matrix is replaced by its best rank-one approximation.
    """
    xi, om, pls, prs = [], [], [], []
    for s in model.subsystems:
        if s.n != 2 or s.m != 0:
            raise ValidationError("modal_init needs n_i = 2, m_i = 0", "DIM_MISMATCH")
        a1, a2 = s.a
        if not (a2 > 0 and a1 > 0 and a1**2 < 4 * a2):
            raise NumericError(f"denominator {s.den} has no stable complex pole pair",
                               "NOT_OSCILLATORY")
        w = 1 / np.sqrt(a2)
        U, sv, Vt = np.linalg.svd(s.b[0])
        if sv[0] == 0:
            raise NumericError("zero residue matrix", "DEGENERATE_MODE")
        xi.append(a1 * w / 2)
        om.append(w)
        pls.append(sv[0] * U[:, 0])
        prs.append(Vt[0])
    return ModalParams(xi, om, pls, prs).normalized()


class ModalMap(ParameterMap):
    """Modal chart; the residue scale gauge is fixed by ``|psi_r| = 1``."""

    name = "modal"

    def __init__(self, K, n_y, n_u):
        self.K, self.n_y, self.n_u = K, n_y, n_u
        self.dim_rho = K * (2 + n_y + n_u)
        self.dim_beta = K * (2 + n_y * n_u)

    def unpack(self, rho):
        return ModalParams.from_vector(rho, self.n_y, self.n_u)

    def to_model(self, rho):
        return modal_eval(self.unpack(rho))

    def eval(self, rho):
        return self.to_model(rho).beta

    def jacobian(self, rho):
        return modal_jacobian(self.unpack(rho))

    def normalize(self, rho):
        return self.unpack(rho).normalized().to_vector()

    def tangent(self, rho):
        p = self.unpack(rho)
        blocks = []
        for i in range(self.K):
            T = np.zeros((2 + self.n_y + self.n_u, 2 + self.n_y + self.n_u - 1))
            T[:2 + self.n_y, :2 + self.n_y] = np.eye(2 + self.n_y)
            T[2 + self.n_y:, 2 + self.n_y:] = scipy.linalg.null_space(p.psi_r[i][None, :])
            blocks.append(T)
        return scipy.linalg.block_diag(*blocks)

    @classmethod
    def for_model(cls, model):
        return cls(model.K, model.n_y, model.n_u)


@dataclass
class ProjectionResult:
    rho_hat: np.ndarray
    ps: np.ndarray
    cost: float
    converged: bool
    iterations: int
    singular_jacobian: bool = False
    pmap: ParameterMap | None = None
    costs: list | None = None

    @property
    def params(self):
        return self.pmap.unpack(self.rho_hat)

    @property
    def beta(self):
        return self.pmap.eval(self.rho_hat)

    def to_dict(self):
        d = {"ps": self.ps.tolist(), "cost": float(self.cost),
             "converged": bool(self.converged), "iterations": int(self.iterations),
             "map": self.pmap.name if self.pmap is not None else None}
        if isinstance(self.pmap, ModalMap):
            d["modes"] = self.params.to_dict()
        else:
            d["rho"] = self.rho_hat.tolist()
        return d


def _chol_pd(Q, what="weighting"):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, rtol=1e-8,
                                                                  atol=1e-14 * np.abs(Q).max()):
        raise NumericError(f"{what} matrix must be symmetric", "NOT_PD_WEIGHT")
    try:
        return np.linalg.cholesky(0.5 * (Q + Q.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{what} matrix is not positive definite", "NOT_PD_WEIGHT") from exc


def _full_rank(J):
    sv = np.linalg.svd(J, compute_uv=False)
    return sv.size == 0 or sv[-1] > RANK_RTOL * sv[0]


def general_covariance(J, Q, P):
    """Sandwich ``(J'Q^-1 J)^-1 J'Q^-1 P Q^-1 J (J'Q^-1 J)^-1``."""
    J = np.asarray(J, dtype=float)
    if not _full_rank(J):
        raise NumericError("Jacobian is rank deficient", "SINGULAR_JACOBIAN")
    Lq = _chol_pd(Q)
    A = scipy.linalg.solve_triangular(Lq, J, lower=True)  # Lq^-1 J
    H = A.T @ A
    G = scipy.linalg.cho_solve((Lq, True), J)  # Q^-1 J
    Hinv = np.linalg.inv(H)
    S = Hinv @ (G.T @ np.asarray(P, dtype=float) @ G) @ Hinv
    return 0.5 * (S + S.T)


def project(beta_hat, weight, pmap, rho0, cov=None, max_iter=200, lam0=1e-3):
    """Weighted Levenberg-Marquardt fit of ``f(rho)`` to ``beta_hat``.

    ``weight`` is ``Q`` (typically the asymptotic covariance of
    ``beta_hat``); ``cov`` is the covariance used for ``P_S`` and defaults to
    ``Q``, in which case ``P_S = (J'Q^-1 J)^-1`` in the gauge-fixed chart.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    Lq = _chol_pd(weight)
    whiten = lambda v: scipy.linalg.solve_triangular(Lq, v, lower=True)  # noqa: E731

    def cost_of(rho):
        r = whiten(beta_hat - pmap.eval(rho))
        return r, 0.5 * float(r @ r)

    rho = pmap.normalize(np.asarray(rho0, dtype=float))
    r, cost = cost_of(rho)
    lam = lam0
    converged = False
    costs = [cost]
    it = 0
    for it in range(1, max_iter + 1):
        T = pmap.tangent(rho)
        Jr = -whiten(pmap.jacobian(rho) @ T)
        g = Jr.T @ r
        H = Jr.T @ Jr
        if cost == 0.0 or np.linalg.norm(g) < 1e-10 * (1 + cost):
            converged = True
            break
        dh = np.diag(H).copy()
        dh[dh == 0] = 1.0
        dH = np.diag(dh)
        accepted = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(H + lam * dH, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pmap.normalize(rho + T @ delta)
            r_c, c_c = cost_of(cand)
            if np.isfinite(c_c) and c_c < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        step = np.linalg.norm(cand - rho)
        rho, r, cost = cand, r_c, c_c
        costs.append(cost)
        lam = max(lam / 10, 1e-12)
        if step < 1e-12:
            converged = True
            break
    T = pmap.tangent(rho)
    Jt = pmap.jacobian(rho) @ T
    singular = not _full_rank(Jt)
    P = weight if cov is None else cov
    if singular:
        warnings.warn("structured-map Jacobian is rank deficient at the solution",
                      SingularJacobianWarning, stacklevel=2)
        Qi = np.linalg.inv(np.asarray(weight, dtype=float))
        H = np.linalg.pinv(Jt.T @ Qi @ Jt)
        ps_t = H @ Jt.T @ Qi @ P @ Qi @ Jt @ H
    else:
        ps_t = general_covariance(Jt, weight, P)
    ps = T @ ps_t @ T.T
    return ProjectionResult(rho, 0.5 * (ps + ps.T), cost, converged, it, singular, pmap, costs)
