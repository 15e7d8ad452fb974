"""scikit-learn style wrappers around the forecasters and FedAvg training.

Both estimators take window tensors ``X`` of shape ``(n, W, F)`` and
targets ``y`` of shape ``(n,)`` or ``(n, H)``. Inputs are used as given;
standardise them first (e.g. with :class:`~fedload.dataset.WindowScaler`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import ClientData, SampleSet, WindowScaler
from .fedcore import Federation, FederationConfig, local_clients
from .model import ModelArch, init_params, local_train, predict
from .privacy import PrivacyConfig


def _check_xy(X, y=None):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected (n, W, F) windows, got shape {X.shape}")
    if y is None:
        return X, None
    y = check_array(y, ensure_2d=False, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != X.shape[0]:
        raise ValueError(f"y has shape {y.shape}; expected ({X.shape[0]},) or ({X.shape[0]}, H)")
    return X, y


def _identity_scaler(n_features):
    return WindowScaler.from_dict({"mean": [0.0] * n_features, "scale": [1.0] * n_features, "degenerate": [False] * n_features})


class _ForecasterBase(RegressorMixin, BaseEstimator):
    def _arch(self, X, y):
        _, w, f = X.shape
        return ModelArch(kind=self.model, n_features=f, window=w, horizon=y.shape[1], hidden=self.hidden)

    def predict(self, X):
        check_is_fitted(self, "params_")
        X, _ = _check_xy(X)
        if X.shape[1:] != (self.arch_.window, self.n_features_in_):
            raise ValueError(f"fitted on windows of shape {(self.arch_.window, self.n_features_in_)}, got {X.shape[1:]}")
        out = predict(self.arch_, self.params_, X)
        return out[:, 0] if self._ravel else out


class LoadForecaster(_ForecasterBase):
    """Centralized training of a linear or LSTM forecaster with minibatch SGD."""

    def __init__(self, model="linear", hidden=32, epochs=10, batch_size=32, lr=0.01, seed=0):
        self.model = model
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        self._ravel = np.ndim(y) == 1
        X, y = _check_xy(X, y)
        self.arch_ = self._arch(X, y)
        start = init_params(self.arch_, self.seed)
        data = SampleSet(X, y, np.zeros(X.shape[0], dtype=np.int64))
        upd = local_train(self.arch_, start, data, self.epochs, self.batch_size, self.lr, seed=self.seed)
        self.params_ = start + upd.delta
        self.n_features_in_ = X.shape[2]
        return self


class FederatedForecaster(_ForecasterBase):
    """FedAvg over clients defined by ``groups``; one client per distinct group label.

    Clients are numbered in sorted group order. The per-round history is kept
    in ``history_``.
    """

    def __init__(
        self,
        model="linear",
        hidden=32,
        rounds=10,
        fraction=1.0,
        local_epochs=3,
        batch_size=32,
        lr=0.01,
        seed=0,
        clip_norm=None,
        noise_multiplier=0.0,
        topk_ratio=None,
        secure_agg=False,
    ):
        self.model = model
        self.hidden = hidden
        self.rounds = rounds
        self.fraction = fraction
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.topk_ratio = topk_ratio
        self.secure_agg = secure_agg

    def fit(self, X, y, groups):
        self._ravel = np.ndim(y) == 1
        X, y = _check_xy(X, y)
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must give one label per sample")
        self.arch_ = self._arch(X, y)
        cfg = FederationConfig(
            arch=self.arch_,
            fraction=self.fraction,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            rounds_max=self.rounds,
            seed=self.seed,
            privacy=PrivacyConfig(self.clip_norm, self.noise_multiplier, self.secure_agg, self.topk_ratio),
        )
        scaler = _identity_scaler(X.shape[2])
        empty = SampleSet.empty(X.shape[1], y.shape[1], X.shape[2])
        self.groups_ = np.unique(groups)
        clients = []
        for cid, g in enumerate(self.groups_):
            rows = np.flatnonzero(groups == g)
            train = SampleSet(X[rows], y[rows], rows.astype(np.int64))
            clients.append(ClientData(cid, str(g), train, empty, empty, scaler))
        fed = Federation(cfg, local_clients(clients, cfg))
        self.history_ = fed.run()
        self.params_ = fed.global_params
        self.n_features_in_ = X.shape[2]
        return self

