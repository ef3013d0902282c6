"""Discrete controllers, control sensitivity and closed-loop simulation.

The loop is ``u = C_d (r - y)``, ``y = G_d u + v`` with ``G_d`` the ZOH
equivalent of the additive plant. Everything is realized by state
augmentation; no transfer matrices are inverted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .errors import NumericError, ValidationError, dim_mismatch
from .lti import StateSpace, simulate_additive, zoh_equivalent_dtf

CL_RADIUS = 1.0 - 1e-6


@dataclass(frozen=True, eq=False)
class DiscreteController:
    """Discrete state-space controller mapping ``n_y`` errors to ``n_u`` inputs."""

    ss: StateSpace

    def __post_init__(self):
        if not self.ss.is_discrete:
            raise ValidationError("controller must be discrete-time", "DIM_MISMATCH")
        if _is_zero_transfer(self.ss):
            raise ValidationError("controller transfer is identically zero", "ZERO_CONTROLLER")

    @property
    def h(self):
        return self.ss.dt

    @classmethod
    def from_matrices(cls, A, B, C, D, h):
        return cls(StateSpace(A, B, C, D, dt=float(h)))

    @classmethod
    def static(cls, K, h):
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return cls(StateSpace(np.zeros((0, 0)), np.zeros((0, K.shape[1])),
                              np.zeros((K.shape[0], 0)), K, dt=float(h)))

    def to_dict(self):
        s = self.ss
        return {"A": s.A.tolist(), "B": s.B.tolist(), "C": s.C.tolist(),
                "D": s.D.tolist(), "h": s.dt}

    @classmethod
    def from_dict(cls, d):
        try:
            D = np.atleast_2d(np.asarray(d["D"], dtype=float))
            n = len(d["A"])
            A = np.asarray(d["A"], dtype=float).reshape(n, n)
            B = np.asarray(d["B"], dtype=float).reshape(n, D.shape[1])
            C = np.asarray(d["C"], dtype=float).reshape(D.shape[0], n)
            return cls.from_matrices(A, B, C, D, float(d["h"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad controller JSON: {exc}", "SCHEMA") from exc

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _is_zero_transfer(ss):
    if np.any(ss.D != 0):
        return False
    M = ss.B
    for _ in range(max(ss.n_states, 1)):
        if np.any(np.abs(ss.C @ M) > 0):
            return False
        M = ss.A @ M
    return True


def _check_h(ctrl, h):
    if not np.isclose(ctrl.h, h, rtol=1e-12, atol=0):
        raise dim_mismatch(f"controller step {ctrl.h} differs from data step {h}")


def closed_loop_system(model, ctrl, h):
    """Augmented loop with inputs ``[r; v]`` and outputs ``[u; y; x]``.

    Raises ALGEBRAIC_LOOP if ``I + D_C D_G`` is singular and CL_UNSTABLE if a
    closed-loop pole lies outside radius ``1 - 1e-6``.
    """
    _check_h(ctrl, h)
    G = zoh_equivalent_dtf(model, h)
    Cd = ctrl.ss
    n_u, n_y = model.n_u, model.n_y
    if Cd.n_inputs != n_y or Cd.n_outputs != n_u:
        raise dim_mismatch(f"controller must map {n_y} errors to {n_u} inputs")
    W = np.eye(n_u) + Cd.D @ G.D
    if np.linalg.cond(W) > 1e12:
        raise NumericError("I + D_C D_G is singular", "ALGEBRAIC_LOOP")
    M = np.linalg.inv(W)
    nG, nC = G.n_states, Cd.n_states
    # u = Cu s + Dur r + Duv v
    Cu = M @ np.hstack([-Cd.D @ G.C, Cd.C])
    Dur = M @ Cd.D
    Duv = -Dur
    # y = Cy s + D_G u + v ; x = y - v
    Cx = np.hstack([G.C, np.zeros((n_y, nC))]) + G.D @ Cu
    Dxr = G.D @ Dur
    Dxv = G.D @ Duv
    A0 = np.block([[G.A, np.zeros((nG, nC))],
                   [-Cd.B @ G.C, Cd.A]])
    Bu = np.vstack([G.B, -Cd.B @ G.D])
    Br = np.vstack([np.zeros((nG, n_y)), Cd.B])
    Bv = -Br
    A = A0 + Bu @ Cu
    B = np.hstack([Br + Bu @ Dur, Bv + Bu @ Duv])
    C = np.vstack([Cu, Cx, Cx])
    D = np.block([[Dur, Duv],
                  [Dxr, Dxv + np.eye(n_y)],
                  [Dxr, Dxv]])
    loop = StateSpace(A, B, C, D, dt=float(h))
    if loop.n_states:
        rho = np.abs(np.linalg.eigvals(A)).max()
        if rho >= CL_RADIUS:
            raise NumericError(f"closed loop unstable (spectral radius {rho:.8f})", "CL_UNSTABLE")
    return loop


def control_sensitivity(model, ctrl, h):
    """``C_d (I + G_d C_d)^-1`` as a discrete state-space (r -> u)."""
    loop = closed_loop_system(model, ctrl, h)
    n_u, n_y = model.n_u, model.n_y
    return StateSpace(loop.A, loop.B[:, :n_y], loop.C[:n_u], loop.D[:n_u, :n_y], dt=float(h))


def noiseless_input(model, ctrl, r, h):
    """Plant input the loop would produce from ``r`` alone under ``model``."""
    r = np.asarray(r, dtype=float).reshape(len(r), -1)
    if r.shape[1] != model.n_y:
        raise dim_mismatch(f"reference needs {model.n_y} channels")
    return control_sensitivity(model, ctrl, h).simulate(r)


def simulate_closed_loop(model, ctrl, r, v, h):
    """Returns ``(u, y)`` for reference ``r`` and output noise ``v`` (both N x n_y)."""
    r = np.asarray(r, dtype=float).reshape(len(r), -1)
    v = np.asarray(v, dtype=float).reshape(len(v), -1)
    if r.shape != v.shape or r.shape[1] != model.n_y:
        raise dim_mismatch("r and v must both be N x n_y")
    loop = closed_loop_system(model, ctrl, h)
    out = loop.simulate(np.hstack([r, v]))
    n_u, n_y = model.n_u, model.n_y
    u = out[:, :n_u]
    # the plant output is re-simulated from u so that y - v matches the
    # open-loop simulator on the logged input sample-for-sample
    x = simulate_additive(model, u, h)
    return u, x + v


def lead_lag(gain, w_zero, w_pole, h):
    """SISO lead-lag ``gain (1 + s/w_zero)/(1 + s/w_pole)`` discretized by Tustin."""
    num, den = [gain / w_zero, gain], [1.0 / w_pole, 1.0]
    bz, az = scipy.signal.bilinear(num, den, fs=1.0 / h)
    A, B, C, D = scipy.signal.tf2ss(bz, az)
    return A, B, C, D


def diagonal_controller(blocks, h):
    """Block-diagonal controller from per-channel SISO ``(A, B, C, D)`` tuples."""
    import scipy.linalg

    A = scipy.linalg.block_diag(*[b[0] for b in blocks])
    B = scipy.linalg.block_diag(*[b[1] for b in blocks])
    C = scipy.linalg.block_diag(*[b[2] for b in blocks])
    D = scipy.linalg.block_diag(*[b[3] for b in blocks])
    return DiscreteController.from_matrices(A, B, C, D, h)
