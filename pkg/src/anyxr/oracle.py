"""In-domain image classifier: the factual-correctness judge and the
in-domain FID feature backbone."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import Module
from .synth import CONDITIONS
from .tensor import Tensor


class OracleNet(Module):
    def __init__(self, rng: np.random.Generator, image_size: int = 32, n_classes: int = len(CONDITIONS),
                 width: int = 16, d_feat: int = 64):
        self.c1 = nn.Conv2d(1, width, 3, rng, stride=2, pad=1)
        self.c2 = nn.Conv2d(width, 2 * width, 3, rng, stride=2, pad=1)
        self.c3 = nn.Conv2d(2 * width, 2 * width, 3, rng, stride=2, pad=1)
        side = image_size // 8
        self.fc = nn.Linear(2 * width * side * side, d_feat, rng)
        self.head = nn.Linear(d_feat, n_classes, rng)

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        h = T.silu(self.c1(x))
        h = T.silu(self.c2(h))
        h = T.silu(self.c3(h))
        return T.silu(self.fc(h.reshape(h.shape[0], -1)))

    def __call__(self, x) -> Tensor:
        return self.head(self.features(x))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    y = Tensor(np.asarray(targets, dtype=logits.dtype))
    return (T.softplus(logits) - y * logits).mean()


class OracleClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label condition classifier over ``[n, 1, S, S]`` images.

    ``predict_proba`` returns per-condition probabilities ``[n, K]``;
    ``transform`` returns the penultimate features used for FID.
    """

    threshold = 0.5

    def __init__(self, width: int = 16, d_feat: int = 64, lr: float = 2e-3, weight_decay: float = 1e-4,
                 epochs: int = 15, batch_size: int = 32, seed: int = 0):
        self.width = width
        self.d_feat = d_feat
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _build(self, image_size: int, n_classes: int) -> None:
        self.net_ = OracleNet(nn.component_rng(self.seed, "oracle"), image_size, n_classes,
                              self.width, self.d_feat)
        self.n_classes_ = n_classes
        self.image_size_ = image_size
        self.classes_ = np.arange(n_classes)

    def fit(self, X, Y):
        from .training import OptimConfig, run_epochs

        X = np.asarray(X, dtype=np.float32)
        Y = np.asarray(Y, dtype=np.float32)
        if X.ndim != 4 or len(X) != len(Y) or Y.ndim != 2:
            raise ContractError("expected images [n, 1, S, S] and labels [n, K]")
        if np.isnan(Y).any():
            raise ContractError("oracle labels must be fully observed")
        self._build(X.shape[-1], Y.shape[1])
        store = nn.ParamStore.from_module(self.net_)
        opt = OptimConfig(self.lr, self.weight_decay, epochs=self.epochs, batch_size=self.batch_size)
        self.loss_history_ = run_epochs(
            store, len(X), lambda idx, rng: bce_with_logits(self.net_(X[idx]), Y[idx]),
            opt, self.seed, "oracle")
        return self

    def _batched(self, fn, X, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4 or X.shape[1:] != (1, self.image_size_, self.image_size_):
            raise ShapeError(f"expected images [n, 1, {self.image_size_}, {self.image_size_}], got {X.shape}")
        return np.concatenate([fn(X[i:i + batch_size]).data for i in range(0, len(X), batch_size)])

    def decision_function(self, X) -> np.ndarray:
        return self._batched(self.net_, X)

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(int)

    def transform(self, X) -> np.ndarray:
        return self._batched(self.net_.features, X).astype(np.float64)

    def save(self, path) -> None:
        from .checkpoint import checkpoint_save

        check_is_fitted(self, "net_")
        state = {n: p.data for n, p in self.net_.named_parameters()}
        checkpoint_save(state, path, {"stage": "oracle", "params": self.get_params(),
                                      "image_size": self.image_size_, "n_classes": self.n_classes_})

    @classmethod
    def load(cls, path) -> OracleClassifier:
        from .checkpoint import checkpoint_load

        tensors, meta = checkpoint_load(path)
        if meta.get("stage") != "oracle":
            raise ContractError(f"{path} is not an oracle checkpoint")
        est = cls(**meta["params"])
        est._build(meta["image_size"], meta["n_classes"])
        store = nn.ParamStore.from_module(est.net_)
        store.load_state_dict(tensors)
        return est


def oracle_training_set(frontal: np.ndarray, lateral: np.ndarray, factors) -> tuple[np.ndarray, np.ndarray]:
    """Both views stacked, labelled with what is drawn (unmentioned counts as absent)."""
    from .synth import presence

    y = np.stack([presence(f) for f in factors])
    return np.concatenate([frontal, lateral]), np.concatenate([y, y])
