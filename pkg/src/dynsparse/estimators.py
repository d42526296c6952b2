"""scikit-learn style wrappers around the recovery solvers.

``X`` is the effective sensing matrix (m x G) and ``y`` the sketch; the
fitted ``coef_`` is the recovered coefficient vector, so ``predict(X)``
re-synthesizes a sketch from it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dictionary import FeasibleFamily
from .recovery import ErrorCurve, RecoveryConfig, omp_structured, prox_group_lasso

__all__ = ["StructuredOMP", "GroupLassoRecovery", "ErrorCurve"]


class _SparseRecoveryBase(RegressorMixin, BaseEstimator):
    def _set_result(self, result):
        self.result_ = result
        self.coef_ = result.alpha_hat
        self.support_ = result.support
        self.n_iter_ = result.iterations
        self.n_features_in_ = self.coef_.shape[0]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        return X @ self.coef_


class StructuredOMP(_SparseRecoveryBase):
    """Orthogonal matching pursuit restricted to a feasible family.

    Parameters
    ----------
    k_max : int
        Maximum number of selected atoms.
    family : FeasibleFamily or None
        Admissible supports; ``None`` means unconstrained top-``k_max``.
    """

    def __init__(self, k_max=1, family=None):
        self.k_max = k_max
        self.family = family

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        family = self.family if self.family is not None \
            else FeasibleFamily.unconstrained_k(self.k_max)
        return self._set_result(omp_structured(y, X, self.k_max, family))


class GroupLassoRecovery(_SparseRecoveryBase):
    """Sparse-group-lasso recovery by monotone accelerated proximal gradient."""

    def __init__(self, lambda1=0.1, lambda_group=0.0, tau=0.0, family=None, groups=None,
                 max_iterations=500, tolerance=1e-8):
        self.lambda1 = lambda1
        self.lambda_group = lambda_group
        self.tau = tau
        self.family = family
        self.groups = groups
        self.max_iterations = max_iterations
        self.tolerance = tolerance

    def fit(self, X, y, warm_start=None):
        X, y = check_X_y(X, y, y_numeric=True)
        config = RecoveryConfig(lambda1=self.lambda1, lambda_group=self.lambda_group,
                                tau=self.tau, family=self.family,
                                groups=None if self.groups is None else tuple(map(tuple, self.groups)),
                                max_iterations=self.max_iterations, tolerance=self.tolerance)
        start = None if warm_start is None else np.asarray(warm_start, dtype=float)
        return self._set_result(prox_group_lasso(y, X, config, warm_start=start))
