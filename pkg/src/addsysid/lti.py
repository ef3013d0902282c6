"""Polynomials, additive MIMO transfer functions and ZOH simulation.

Conventions used throughout the package:

* Polynomials in the differentiation operator ``p`` are stored in
  ascending degree. Denominators carry a constant coefficient of exactly 1,
  so only ``a_1 .. a_n`` are stored.
* A numerator matrix polynomial is a ``(m + 1, n_y, n_u)`` array.
* ``vec`` is column-major; the parameter vector of a subsystem is
  ``[a_1 .. a_n, vec(B_0), .., vec(B_m)]`` and the model vector stacks the
  subsystems in order.
* A continuous-time filter acting on a sampled signal means: hold the
  samples constant between grid points, filter in continuous time, read
  the output on the grid. All filter states start at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg

from ._kernels import lsim_kernel, siso_bank_kernel
from .errors import ValidationError, dim_mismatch, improper_filter

COPRIME_RTOL = 1e-6


def _trim(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return c[:1] * 0.0
    return c[: nz[-1] + 1]


def poly_roots(coeffs):
    """Roots of an ascending-degree polynomial (empty for constants)."""
    c = _trim(coeffs)
    if c.size <= 1:
        return np.empty(0, dtype=complex)
    return np.roots(c[::-1]).astype(complex)


def is_hurwitz(coeffs, margin=0.0):
    """True iff every root has real part strictly below ``-margin``."""
    r = poly_roots(coeffs)
    return bool(np.all(r.real < -margin))


def poly_from_roots(roots):
    """Real ascending polynomial with constant term 1 and the given roots.

    Roots must be nonzero and closed under conjugation.
    """
    c = np.array([1.0])
    for s in roots:
        c = np.convolve(c, [1.0, -1.0 / s])
    return np.real_if_close(c, tol=1e6).real.astype(float)


def mirror_unstable(coeffs, margin=1e-6):
    """Reflect roots with real part >= -margin into the left half-plane."""
    r = poly_roots(coeffs)
    if r.size == 0 or np.all(r.real < -margin):
        return np.asarray(coeffs, dtype=float)
    re = -np.maximum(np.abs(r.real), 2 * margin)
    return poly_from_roots(re + 1j * r.imag)


def _shared_root(r1, r2, rtol=COPRIME_RTOL):
    for s in r1:
        if np.any(np.abs(r2 - s) < rtol * (1 + abs(s))):
            return True
    return False


def _deflate(c, s):
    """Divide ascending polynomial ``c`` by the real factor carrying root s."""
    desc = c[::-1]
    if abs(s.imag) > 0:
        fac = np.array([1.0, -2 * s.real, abs(s) ** 2])
    else:
        fac = np.array([1.0, -s.real])
    q, _ = np.polydiv(desc, fac)
    return q[::-1]


def cancel_common_roots(num, den, rtol=1e-9):
    """Remove pole/zero pairs that coincide to ``rtol`` (relative)."""
    num, den = _trim(num), _trim(den)
    while num.size > 1 and den.size > 1:
        rn, rd = poly_roots(num), poly_roots(den)
        hit = None
        for s in rd:
            if s.imag < 0:
                continue
            if np.any(np.abs(rn - s) < rtol * (1 + abs(s))):
                hit = s
                break
        if hit is None:
            break
        num, den = _deflate(num, hit), _deflate(den, hit)
    return num, den


@dataclass(frozen=True, eq=False)
class StateSpace:
    """``(A, B, C, D)``; ``dt is None`` for continuous time, else the step."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = A.shape[0] if A.size else 0
        p, m = D.shape
        A = A.reshape(n, n)
        B = np.asarray(self.B, dtype=float).reshape(n, m)
        C = np.asarray(self.C, dtype=float).reshape(p, n)
        if self.dt is not None and not self.dt > 0:
            raise ValidationError("discrete system needs dt > 0", "DIM_MISMATCH")
        for name, val in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, np.ascontiguousarray(val))

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.D.shape[1]

    @property
    def n_outputs(self):
        return self.D.shape[0]

    @property
    def is_discrete(self):
        return self.dt is not None

    def poles(self):
        return np.linalg.eigvals(self.A) if self.n_states else np.empty(0, complex)

    def evalfr(self, omega):
        """Frequency response at ``omega`` rad/s."""
        z = np.exp(1j * omega * self.dt) if self.is_discrete else 1j * omega
        if self.n_states == 0:
            return self.D.astype(complex)
        X = np.linalg.solve(z * np.eye(self.n_states) - self.A, self.B)
        return self.C @ X + self.D

    def simulate(self, U):
        """Zero-initial-state recursion of a discrete system, ``U`` is (N, m)."""
        if not self.is_discrete:
            raise ValidationError("simulate() needs a discrete system", "DIM_MISMATCH")
        U = np.ascontiguousarray(np.asarray(U, dtype=float).reshape(len(U), -1))
        if U.shape[1] != self.n_inputs:
            raise dim_mismatch(f"expected {self.n_inputs} input channels, got {U.shape[1]}")
        return lsim_kernel(self.A, self.B, self.C, self.D, U)


def _bank_ct(den, kmax):
    """Continuous realization of ``[p^k / den(p)]`` for ``k = 0..kmax``.

    Single input, ``kmax + 1`` outputs; states are ``p^j w`` with ``w = u/den``.
    """
    den = _trim(den)
    n = den.size - 1
    if kmax > n:
        raise improper_filter(f"p^{kmax}/den is improper (deg den = {n})")
    lead = den[-1]
    A = np.zeros((n, n))
    if n:
        A[:-1, 1:] = np.eye(n - 1)
        A[-1, :] = -den[:n] / lead
    b = np.zeros(n)
    if n:
        b[-1] = 1.0 / lead
    C = np.zeros((kmax + 1, n))
    d = np.zeros(kmax + 1)
    for k in range(kmax + 1):
        if k < n:
            C[k, k] = 1.0
        else:
            C[k] = -den[:n] / lead
            d[k] = 1.0 / lead
    return A, b, C, d


def _zoh_pair(A, B, h):
    n, m = B.shape
    if n == 0:
        return np.zeros((0, 0)), np.zeros((0, m))
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = scipy.linalg.expm(M * h)
    return E[:n, :n], E[:n, n:]


@dataclass(frozen=True, eq=False)
class FilterBank:
    """ZOH-discretized bank ``[p^k / den(p)]``, ``k = 0..kmax``."""

    Ad: np.ndarray
    bd: np.ndarray
    C: np.ndarray
    d: np.ndarray

    @classmethod
    def build(cls, den, kmax, h):
        A, b, C, d = _bank_ct(den, kmax)
        Ad, Bd = _zoh_pair(A, b[:, None], h)
        return cls(np.ascontiguousarray(Ad), np.ascontiguousarray(Bd[:, 0]),
                   np.ascontiguousarray(C), np.ascontiguousarray(d))

    def apply(self, X):
        """``X`` is (N, ch); returns (N, ch, kmax + 1)."""
        X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(len(X), -1))
        return siso_bank_kernel(self.Ad, self.bd, self.C, self.d, X)


def siso_tf_to_ss(num, den):
    """Controllable canonical realization of ``num(p)/den(p)``.

    ``den`` must have constant coefficient 1. Coinciding pole/zero pairs are
    cancelled first, so ``(1+p)/(1+p)`` becomes a pure feedthrough.
    """
    num, den = _trim(num), _trim(den)
    if den[0] != 1.0:
        raise ValidationError("denominator constant coefficient must be 1", "IMPROPER_FILTER")
    if np.any(num != 0) and num.size > den.size:
        raise improper_filter("numerator degree exceeds denominator degree")
    num, den = cancel_common_roots(num, den)
    num, den = num / den[0], den / den[0]
    n = den.size - 1
    A, b, Cb, db = _bank_ct(den, n)
    w = np.zeros(n + 1)
    w[: num.size] = num
    C = w @ Cb
    D = np.array([[w @ db]])
    return StateSpace(A, b[:, None], C[None, :], D)


def zoh_discretize(ss, h):
    """Exact ZOH equivalent via one augmented matrix exponential."""
    if not h > 0:
        raise ValidationError("sampling step must be positive", "DIM_MISMATCH")
    Ad, Bd = _zoh_pair(ss.A, ss.B, h)
    return StateSpace(Ad, Bd, ss.C, ss.D, dt=float(h))


def _as_channels(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1), x.ndim == 1


def filter_sampled(f_num, f_den, x, h):
    """Apply a continuous-time filter to sampled channels (held between samples)."""
    X, squeeze = _as_channels(x)
    ss = zoh_discretize(siso_tf_to_ss(f_num, f_den), h)
    Y = siso_bank_kernel(ss.A, np.ascontiguousarray(ss.B[:, 0]), ss.C,
                         np.ascontiguousarray(ss.D[:, 0]), np.ascontiguousarray(X))[:, :, 0]
    return Y[:, 0] if squeeze else Y


@dataclass(frozen=True, eq=False)
class Subsystem:
    """``B(p)/A(p)`` with ``A = 1 + a_1 p + .. + a_n p^n``, ``B`` of shape (m+1, n_y, n_u)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float)).ravel()
        b = np.asarray(self.b, dtype=float)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3:
            raise dim_mismatch("numerator must be a stack of matrices")
        if b.shape[0] - 1 > a.size:
            raise improper_filter("numerator order exceeds denominator order")
        if a.size and a[-1] == 0.0:
            raise ValidationError("leading denominator coefficient is zero", "DIM_MISMATCH")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self):
        return self.a.size

    @property
    def m(self):
        return self.b.shape[0] - 1

    @property
    def den(self):
        return np.concatenate([[1.0], self.a])

    @property
    def n_y(self):
        return self.b.shape[1]

    @property
    def n_u(self):
        return self.b.shape[2]

    @property
    def biproper(self):
        return self.m == self.n

    @property
    def theta(self):
        return np.concatenate([self.a] + [bl.ravel(order="F") for bl in self.b])

    @property
    def order(self):
        return (self.n, self.m)

    def poles(self):
        return poly_roots(self.den)

    def freq_response(self, omegas):
        s = 1j * np.atleast_1d(np.asarray(omegas, dtype=float))
        num = np.polynomial.polynomial.polyval(s, self.b)  # (n_y, n_u, W)
        den = np.polynomial.polynomial.polyval(s, self.den)
        return np.moveaxis(num / den, -1, 0)


@dataclass(frozen=True, eq=False)
class AdditiveModel:
    """Sum of subsystems sharing ``n_y`` outputs and ``n_u`` inputs."""

    subsystems: tuple
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        subs = tuple(self.subsystems)
        if not subs:
            raise ValidationError("model needs at least one subsystem", "DIM_MISMATCH")
        object.__setattr__(self, "subsystems", subs)
        shapes = {s.b.shape[1:] for s in subs}
        if len(shapes) != 1:
            raise dim_mismatch("subsystems disagree on (n_y, n_u)")
        if self.check:
            if sum(s.biproper for s in subs) > 1:
                raise ValidationError("at most one subsystem may be biproper", "IMPROPER_FILTER")
            self._check_coprime()

    def _check_coprime(self):
        roots = [s.poles() for s in self.subsystems]
        for i, j in combinations(range(len(roots)), 2):
            if _shared_root(roots[i], roots[j]):
                raise ValidationError(f"denominators {i} and {j} share a root", "NOT_COPRIME")
        for s, r in zip(self.subsystems, roots):
            scale = np.abs(s.b).max()
            for root in r:
                val = np.polynomial.polynomial.polyval(root, s.b)
                if np.abs(val).max() <= 1e-10 * max(scale, 1e-300):
                    raise ValidationError("numerator vanishes at a pole", "NOT_COPRIME")

    @property
    def K(self):
        return len(self.subsystems)

    @property
    def n_y(self):
        return self.subsystems[0].n_y

    @property
    def n_u(self):
        return self.subsystems[0].n_u

    @property
    def orders(self):
        return tuple(s.order for s in self.subsystems)

    @property
    def beta(self):
        return np.concatenate([s.theta for s in self.subsystems])

    @property
    def n_params(self):
        return self.beta.size

    def offsets(self):
        """Start index of each subsystem's block in ``beta``."""
        sizes = [theta_size(n, m, self.n_y, self.n_u) for n, m in self.orders]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @classmethod
    def from_beta(cls, beta, orders, n_y, n_u, check=True):
        beta = np.asarray(beta, dtype=float).ravel()
        subs, o = [], 0
        for n, m in orders:
            a = beta[o:o + n]
            o += n
            nb = (m + 1) * n_y * n_u
            blk = beta[o:o + nb].reshape(m + 1, n_u, n_y).transpose(0, 2, 1)
            o += nb
            subs.append(Subsystem(a.copy(), blk.copy()))
        if o != beta.size:
            raise dim_mismatch(f"beta has {beta.size} entries, orders need {o}")
        return cls(tuple(subs), check=check)

    def permuted(self, perm):
        return AdditiveModel(tuple(self.subsystems[i] for i in perm), check=False)

    def is_stable(self, margin=0.0):
        return all(is_hurwitz(s.den, margin) for s in self.subsystems if s.n)

    def to_dict(self):
        return {
            "n_u": self.n_u,
            "n_y": self.n_y,
            "subsystems": [{"a": s.a.tolist(), "b": s.b.tolist()} for s in self.subsystems],
        }

    @classmethod
    def from_dict(cls, d, check=True):
        try:
            n_u, n_y = int(d["n_u"]), int(d["n_y"])
            subs = []
            for sd in d["subsystems"]:
                b = np.asarray(sd["b"], dtype=float).reshape(-1, n_y, n_u)
                subs.append(Subsystem(np.asarray(sd.get("a", []), dtype=float), b))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad model JSON: {exc}", "SCHEMA") from exc
        return cls(tuple(subs), check=check)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def theta_size(n, m, n_y, n_u):
    return n + (m + 1) * n_y * n_u


def static_gain(G):
    """Single-subsystem model ``G`` with no dynamics."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return AdditiveModel((Subsystem(np.empty(0), G[None]),))


def simulate_additive(model, u, h):
    """Noise-free sampled output of the additive model under held input."""
    U, squeeze = _as_channels(u)
    if U.shape[1] != model.n_u:
        raise dim_mismatch(f"model has {model.n_u} inputs, signal has {U.shape[1]}")
    y = np.zeros((U.shape[0], model.n_y))
    for s in model.subsystems:
        y += subsystem_output(s, U, h)
    return y


def subsystem_output(sub, U, h, bank=None):
    bank = bank or FilterBank.build(sub.den, sub.m, h)
    F = bank.apply(U)  # (N, n_u, m+1)
    return np.einsum("kcl,lrc->kr", F, sub.b)


def zoh_equivalent_dtf(model, h):
    """Discrete state-space of the ZOH-sampled total plant."""
    n_u, n_y = model.n_u, model.n_y
    blocks_A, blocks_B, blocks_C = [], [], []
    D = np.zeros((n_y, n_u))
    for s in model.subsystems:
        A, b, Cb, db = _bank_ct(s.den, s.m)
        # one copy of the scalar bank per input channel
        blocks_A.append(np.kron(np.eye(n_u), A))
        blocks_B.append(np.kron(np.eye(n_u), b[:, None]))
        Cs = np.zeros((n_y, n_u * s.n))
        for c in range(n_u):
            Cs[:, c * s.n:(c + 1) * s.n] = s.b[:, :, c].T @ Cb
        blocks_C.append(Cs)
        D += np.einsum("lrc,l->rc", s.b, db)
    A = scipy.linalg.block_diag(*blocks_A) if blocks_A else np.zeros((0, 0))
    B = np.vstack(blocks_B)
    C = np.hstack(blocks_C)
    Ad, Bd = _zoh_pair(A, B, h)
    return StateSpace(Ad, Bd, C, D, dt=float(h))


def freq_response(model, omegas):
    """Complex ``(W, n_y, n_u)`` array of the summed subsystem responses."""
    return sum(s.freq_response(omegas) for s in model.subsystems)


def slowest_time_constant(model):
    tc = [1.0 / -r.real for s in model.subsystems for r in s.poles() if r.real < 0]
    return max(tc, default=0.0)
