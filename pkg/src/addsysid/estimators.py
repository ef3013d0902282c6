"""scikit-learn style front ends for the two estimation stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .closed_loop import DiscreteController
from .errors import ValidationError
from .lti import simulate_additive
from .riv import EstimatorOptions, RivResult, SampledDataset, init_from_orders, riv_solve
from .structured import ModalMap, modal_eval, modal_init, project


def check_signals(u, y=None, r=None):
    """Validate sample-major signal arrays; 1-D inputs become single channels."""

    def _one(x, name):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return check_array(x, dtype=float, ensure_min_samples=2, input_name=name)

    try:
        u = _one(u, "u")
        y = None if y is None else _one(y, "y")
        r = None if r is None else _one(r, "r")
    except ValueError as exc:
        raise ValidationError(str(exc), "BAD_INPUT") from exc
    for name, x in (("y", y), ("r", r)):
        if x is not None and len(x) != len(u):
            raise ValidationError(f"{name} has {len(x)} samples, u has {len(u)}", "DIM_MISMATCH")
    return u, y, r


class RivEstimator(BaseEstimator):
    """Refined instrumental-variable estimator of an additive model.

    Parameters
    ----------
    orders : list of (n_i, m_i)
        Denominator and numerator degree of each subsystem.
    h : float
        Sampling step in seconds.
    loop : {"open", "closed"}
    controller : DiscreteController or dict, optional
        Required for ``loop="closed"``.
    init : AdditiveModel, optional
        Starting model; a crude stable guess is built from ``orders`` if absent.
    max_iter, rel_tol, transient : see :class:`EstimatorOptions`.
    """

    def __init__(self, orders=None, h=1.0, loop="open", controller=None, init=None,
                 max_iter=100, rel_tol=1e-8, transient=0):
        self.orders = orders
        self.h = h
        self.loop = loop
        self.controller = controller
        self.init = init
        self.max_iter = max_iter
        self.rel_tol = rel_tol
        self.transient = transient

    def _options(self):
        ctrl = self.controller
        if isinstance(ctrl, dict):
            ctrl = DiscreteController.from_dict(ctrl)
        if self.loop == "closed" and ctrl is None:
            raise ValidationError("closed-loop estimation needs a controller", "MISSING_CONTROLLER")
        return EstimatorOptions(max_iter=self.max_iter, rel_tol=self.rel_tol, loop_mode=self.loop,
                                controller=ctrl, transient=self.transient)

    def fit(self, u, y, r=None):
        u, y, r = check_signals(u, y, r)
        opts = self._options()
        if self.loop == "closed" and r is None:
            raise ValidationError("closed-loop estimation needs the reference r", "MISSING_REFERENCE")
        ds = SampledDataset(float(self.h), u, y, r if self.loop == "closed" else None)
        if self.init is not None:
            model0 = self.init
        elif self.orders is not None:
            model0 = init_from_orders(ds, [tuple(o) for o in self.orders])
        else:
            raise ValidationError("either orders or init is required", "BAD_OPTIONS")
        res = riv_solve(model0, ds, opts)
        self.result_ = res
        self.model_ = res.model
        self.sigma_ = res.sigma_hat
        self.acov_ = res.acov
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        self.n_samples_ = ds.N
        return self

    @property
    def beta_(self):
        check_is_fitted(self, "model_")
        return self.model_.beta

    def param_cov(self):
        """Covariance of ``beta_`` for the fitted record length, ``acov / N``."""
        check_is_fitted(self, "acov_")
        return self.acov_ / self.n_samples_

    def predict(self, u):
        """Noise-free model output for input ``u``."""
        check_is_fitted(self, "model_")
        u, _, _ = check_signals(u)
        if u.shape[1] != self.model_.n_u:
            raise ValidationError(f"u needs {self.model_.n_u} channels", "DIM_MISMATCH")
        return simulate_additive(self.model_, u, float(self.h))


class ModalProjector(BaseEstimator):
    """Projection of an unstructured estimate onto the modal structure.

    Parameters
    ----------
    weighting : {"acov", "identity"}
        ``Q`` in the projection norm. ``"acov"`` uses the asymptotic
        covariance of the unstructured estimate.
    max_iter : int
    """

    def __init__(self, weighting="acov", max_iter=200):
        self.weighting = weighting
        self.max_iter = max_iter

    def fit(self, estimate, rho0=None):
        """``estimate`` is a fitted :class:`RivEstimator` or a :class:`RivResult`."""
        if isinstance(estimate, RivEstimator):
            check_is_fitted(estimate, "result_")
            estimate = estimate.result_
        if not isinstance(estimate, RivResult):
            raise ValidationError("expected a RivResult or fitted RivEstimator", "BAD_INPUT")
        if self.weighting not in ("acov", "identity"):
            raise ValidationError(f"unknown weighting {self.weighting!r}", "BAD_OPTIONS")
        model = estimate.model
        pmap = ModalMap.for_model(model)
        if rho0 is None:
            rho0 = modal_init(model).to_vector()
        Q = estimate.acov if self.weighting == "acov" else np.eye(model.n_params)
        res = project(model.beta, Q, pmap, rho0, cov=estimate.acov, max_iter=self.max_iter)
        self.result_ = res
        self.params_ = res.params
        self.ps_ = res.ps
        self.cost_ = res.cost
        self.converged_ = res.converged
        self.model_ = modal_eval(res.params)
        return self

    def predict(self, u, h):
        check_is_fitted(self, "model_")
        u, _, _ = check_signals(u)
        return simulate_additive(self.model_, u, float(h))


__all__ = ["RivEstimator", "ModalProjector", "check_signals"]
