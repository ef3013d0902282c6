"""Slow, independent reference computations used to cross-check the main code.

Nothing here shares a numerical path with the estimator: simulation goes
through ``scipy.signal.cont2discrete`` and ``lfilter`` on polynomial
transfer functions, derivatives are finite differences, and loops are
written out plainly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .errors import NumericError


@dataclass(frozen=True)
class FdSpec:
    rel_step: float = 1e-6

    def __post_init__(self):
        if not self.rel_step > 0:
            raise ValueError("step must be positive")

    def step(self, x):
        return self.rel_step * (1.0 + np.abs(x))


def fd_jacobian(f, x, spec=FdSpec()):
    """Central-difference Jacobian of ``f`` at ``x``; rows index outputs."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.empty((f0.size, x.size))
    hs = spec.step(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = hs[j]
        fp = np.atleast_1d(np.asarray(f(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(x - e), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericError(f"non-finite evaluation along coordinate {j}", "NUMERIC_FAIL")
        J[:, j] = (fp - fm) / (2 * hs[j])
    return J


def lsim_oracle(ss_d, x):
    """Plain state recursion ``s+ = A s + B x``, ``y = C s + D x`` from rest."""
    A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (ss_d.A, ss_d.B, ss_d.C, ss_d.D))
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    n = A.shape[0] if A.size else 0
    s = np.zeros(n)
    out = np.zeros((x.shape[0], D.shape[0]))
    for k in range(x.shape[0]):
        if n:
            out[k] = C @ s + D @ x[k]
            s = A @ s + B @ x[k]
        else:
            out[k] = D @ x[k]
    return out


def ct_filter(num, den, x, h):
    """ZOH-sample the continuous filter ``num(p)/den(p)`` (ascending powers) and run it on ``x``."""
    num = np.asarray(num, dtype=float)[::-1]
    den = np.asarray(den, dtype=float)[::-1]
    bd, ad, _ = scipy.signal.cont2discrete((num, den), h, method="zoh")
    bd = np.atleast_1d(np.squeeze(bd))
    return scipy.signal.lfilter(bd, ad, np.asarray(x, dtype=float), axis=0)


def simulate_tf_oracle(model, u, h):
    """Additive model output through one scalar transfer function per entry."""
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.zeros((u.shape[0], model.n_y))
    for s in model.subsystems:
        den = np.concatenate([[1.0], s.a])
        for r in range(s.n_y):
            for c in range(s.n_u):
                num = s.b[:, r, c]
                if np.any(num):
                    y[:, r] += ct_filter(num, den, u[:, c], h)
    return y


def srivc_reference_step(a, b, u, y, h):
    """One textbook SRIVC update for ``B(p)/A(p)``, ``A = 1 + a_1 p + ...``.

    ``a`` holds ``a_1..a_n`` and ``b`` holds ``b_0..b_m`` (ascending). Returns
    the updated ``(a, b)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = a.size, b.size - 1
    A = np.concatenate([[1.0], a])
    A2 = np.polynomial.polynomial.polymul(A, A)
    cols_phi, cols_zeta = [], []
    for j in range(1, n + 1):
        pj = np.zeros(j + 1)
        pj[j] = 1.0
        cols_phi.append(-ct_filter(pj, A, y, h))
        cols_zeta.append(-ct_filter(np.polynomial.polynomial.polymul(pj, b), A2, u, h))
    for l in range(m + 1):
        pl = np.zeros(l + 1)
        pl[l] = 1.0
        f = ct_filter(pl, A, u, h)
        cols_phi.append(f)
        cols_zeta.append(f)
    Phi = np.column_stack(cols_phi)
    Zeta = np.column_stack(cols_zeta)
    yf = ct_filter([1.0], A, y, h)
    theta = np.linalg.solve(Zeta.T @ Phi, Zeta.T @ yf)
    return theta[:n], theta[n:]


def fisher_numeric(model, u, h, sigma0, spec=FdSpec()):
    """Average information ``(1/N) sum_k J_k' Sigma0^-1 J_k`` of the output-error residual.

    ``J_k`` is the finite-difference Jacobian of the noise-free model output
    at sample ``k`` with respect to ``beta``, computed by the transfer-function
    simulator :func:`simulate_tf_oracle`.
    """
    from .lti import AdditiveModel

    beta = model.beta
    orders, n_y, n_u = model.orders, model.n_y, model.n_u

    def out(bv):
        m = AdditiveModel.from_beta(bv, orders, n_y, n_u, check=False)
        return simulate_tf_oracle(m, u, h).ravel()

    J = fd_jacobian(out, beta, spec)  # (N*n_y, d)
    N = J.shape[0] // n_y
    J = J.reshape(N, n_y, -1)
    Si = np.linalg.inv(np.atleast_2d(np.asarray(sigma0, dtype=float)))
    F = np.einsum("kri,rs,ksj->ij", J, Si, J) / N
    if not np.all(np.isfinite(F)):
        raise NumericError("non-finite Fisher information", "NUMERIC_FAIL")
    return 0.5 * (F + F.T)


def empirical_covariance(samples):
    """Sample covariance of rows, normalized by ``M - 1``."""
    X = np.asarray(samples, dtype=float)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / (X.shape[0] - 1)


def relative_diag_error(C, C_ref):
    """``|diag(C) / diag(C_ref) - 1|`` elementwise."""
    return np.abs(np.diag(C) / np.diag(C_ref) - 1.0)
