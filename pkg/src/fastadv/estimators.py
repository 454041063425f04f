"""scikit-learn style estimator wrapping the adversarial training loops."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackSpec
from .autodiff import FLOAT_DTYPES
from .data import Dataset
from .models import build_linear, build_mnist_cnn, init_parameters
from .training import DetectorSpec, TrainSpec, train


class AdversarialClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained to be robust inside an l-infinity ball.

    ``fit`` runs one of the four training loops (standard minibatch SGD or
    FGSM / PGD / free adversarial training) with a triangular cyclic
    learning rate; ``predict`` returns argmax logits.

    Parameters mirror TrainSpec / AttackSpec. ``model`` selects the
    architecture: "linear" for flat feature vectors, "mnist_cnn" for
    [n, 1, 28, 28] image batches, or "auto" to pick by input rank.
    """

    def __init__(self, method="fgsm", epsilon=0.3, alpha=None, steps=None,
                 init="uniform", clamp_image=False, epochs=10, batch_size=128,
                 max_lr=0.2, momentum=0.9, weight_decay=5e-4, replay=4,
                 early_stop=False, model="auto", precision=32, seed=0):
        self.method = method
        self.epsilon = epsilon
        self.alpha = alpha
        self.steps = steps
        self.init = init
        self.clamp_image = clamp_image
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.replay = replay
        self.early_stop = early_stop
        self.model = model
        self.precision = precision
        self.seed = seed

    # -- internals ---------------------------------------------------------

    def _attack_spec(self):
        if self.method == "standard":
            return None
        steps = self.steps
        alpha = self.alpha
        if self.method in ("fgsm", "free"):
            steps = 1
            alpha = self.epsilon if alpha is None else alpha
        elif self.method == "pgd":
            steps = 7 if steps is None else steps
            alpha = 2.5 * self.epsilon / steps if alpha is None else alpha
        return AttackSpec(epsilon=self.epsilon, alpha=alpha, steps=steps,
                          init=self.init, clamp_image=self.clamp_image)

    def _train_spec(self):
        return TrainSpec(
            method=self.method,
            epochs=self.epochs,
            batch_size=self.batch_size,
            max_lr=self.max_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            attack=self._attack_spec(),
            replay=self.replay if self.method == "free" else 1,
            early_stop=DetectorSpec() if self.early_stop else None,
            seed=self.seed,
        )

    def _resolve_model(self, X, n_classes, dtype):
        kind = self.model
        if kind == "auto":
            kind = "mnist_cnn" if X.ndim == 4 else "linear"
        if kind == "mnist_cnn":
            if X.shape[1:] != (1, 28, 28):
                raise ValueError("mnist_cnn expects inputs shaped [n, 1, 28, 28]")
            net = build_mnist_cnn(dtype=dtype)
        elif kind == "linear":
            net = build_linear(X.shape[1], n_classes, dtype=dtype)
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        return init_parameters(net, np.random.default_rng(self.seed))

    def _validate_X(self, X, reset=False):
        if np.asarray(X).ndim == 4:
            X = np.asarray(X, dtype=float)
            if not np.all(np.isfinite(X)):
                raise ValueError("non-finite values in X")
            return X
        return check_array(X)

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y):
        if np.asarray(X).ndim == 4:
            X = self._validate_X(X)
            y = np.asarray(y)
            if len(X) != len(y):
                raise ValueError("X and y length mismatch")
        else:
            X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        dtype = FLOAT_DTYPES[self.precision]
        X = X.astype(dtype)
        net = self._resolve_model(X, len(self.classes_), dtype)
        dataset = Dataset(X, y_idx.astype(np.int64))
        net, record = train(self._train_spec(), net, dataset)
        self.net_ = net
        self.run_record_ = record
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = self._validate_X(X)
        return self.net_.logits(X.astype(FLOAT_DTYPES[self.precision]))

    def predict_proba(self, X):
        from .autodiff import softmax

        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
