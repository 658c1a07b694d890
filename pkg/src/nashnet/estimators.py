"""scikit-learn style wrappers around the trainer and the Gram-Schmidt network."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .gram_schmidt import gs_network_run
from .training import TrainingProblem, train


class LayerwiseRegressor(RegressorMixin, BaseEstimator):
    """Single-layer ``y = r(W x + b)`` fitted by the layerwise residual iteration.

    Parameters
    ----------
    activation : str
        Catalog name of the output activation.
    gamma : float
        Step parameter in (0, 1).
    tol : float
        Stop when the VI residual falls below this value.
    max_epochs : int
    """

    def __init__(self, activation="identity", gamma=0.5, tol=1e-8, max_epochs=100_000):
        self.activation = activation
        self.gamma = gamma
        self.tol = tol
        self.max_epochs = max_epochs

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._y_1d = y.ndim == 1
        Y = y[:, None] if self._y_1d else y
        self.problem_ = TrainingProblem(X, Y, [self.activation], y_layers=[Y])
        state, self.report_ = train(self.problem_, gamma=self.gamma, tol=self.tol, max_steps=self.max_epochs)
        self.coef_, self.intercept_ = state.theta[0]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        out = self.problem_.predict([(self.coef_, self.intercept_)], X)
        return out[:, 0] if self._y_1d else out


class GramSchmidtTransformer(TransformerMixin, BaseEstimator):
    """Maps columns to an orthonormal family under the empirical inner product.

    With ``center=True`` the constant is put first in the family, so the
    outputs are centred, uncorrelated and have unit second moment.
    """

    def __init__(self, center=True):
        self.center = center

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        cols = ([np.ones((X.shape[0], 1))] if self.center else []) + [X[:, [k]] for k in range(X.shape[1])]
        _, R = gs_network_run(cols, return_coefficients=True)
        self.coefficients_ = R
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "coefficients_")
        X = check_array(X)
        F = np.hstack([np.ones((X.shape[0], 1)), X]) if self.center else X
        out = F @ self.coefficients_.T
        return out[:, 1:] if self.center else out
