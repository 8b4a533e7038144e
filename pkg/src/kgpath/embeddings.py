"""Entity, patient and relation representations.

Entities are embedded as rows of an RBM weight matrix trained on patient
character vectors; patients are encoded by a tied-weight sigmoid
autoencoder over scaled feature vectors; relations are one-hot.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .nn import DenseLayer, GradientTape, Optimizer, apply_update, sigmoid

logger = logging.getLogger(__name__)

_EPS = 1e-12


def _bce(target, prob):
    prob = np.clip(prob, _EPS, 1 - _EPS)
    return float(-np.mean(target * np.log(prob) + (1 - target) * np.log(1 - prob)))


def cd_statistics(W, a, b, V, H0, cd_steps: int = 1, rng=None):
    """Positive- and negative-phase statistics of one CD-k update.

    ``H0`` is the binary hidden sample drawn from ``p(h | V)``. The
    reconstruction uses visible probabilities; for ``cd_steps > 1`` the
    intermediate hidden layers are resampled with ``rng``. Returns a
    dict of batch-averaged terms; the gradient is ``pos_* - neg_*``.
    """
    n = V.shape[0]
    hp0 = sigmoid(V @ W + b)
    h = H0
    for step in range(cd_steps):
        v = sigmoid(h @ W.T + a)
        hp = sigmoid(v @ W + b)
        if step + 1 < cd_steps:
            h = (rng.random(hp.shape) < hp).astype(np.float64)
    return {
        "pos_W": V.T @ hp0 / n,
        "neg_W": v.T @ hp / n,
        "pos_a": V.mean(axis=0),
        "neg_a": v.mean(axis=0),
        "pos_b": hp0.mean(axis=0),
        "neg_b": hp.mean(axis=0),
    }


class RBMEmbedding(TransformerMixin, BaseEstimator):
    """Bernoulli RBM over patient character vectors.

    Parameters
    ----------
    n_components : int, default=32
        Number of binary hidden units; also the entity embedding width.
    learning_rate : float, default=1e-3
    n_iter : int, default=100
        Passes over the training set.
    batch_size : int, default=32
    cd_steps : int, default=1
        Gibbs steps per contrastive-divergence update.
    optimizer : {"adam", "sgd"}, default="adam"
    random_state : int or None

    Attributes
    ----------
    weights_ : ndarray of shape (n_features, n_components)
        Row ``i`` is the embedding of entity ``i``.
    visible_bias_, hidden_bias_ : ndarray
    history_ : list of float
        Mean reconstruction cross-entropy after each epoch.
    """

    def __init__(self, n_components=32, learning_rate=1e-3, n_iter=100, batch_size=32,
                 cd_steps=1, optimizer="adam", random_state=None):
        self.n_components = n_components
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.cd_steps = cd_steps
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise ValueError("empty training set")
        if not np.isin(X, (0.0, 1.0)).all():
            raise ValueError("RBM input must be binary")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        rng = np.random.default_rng(self.random_state)
        n, m = X.shape
        params = {
            "W": rng.normal(0.0, 0.01, size=(m, self.n_components)),
            "a": np.zeros(m),
            "b": np.zeros(self.n_components),
        }
        opt = Optimizer(lr=self.learning_rate, kind=self.optimizer)
        self.history_ = []
        for epoch in range(self.n_iter):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                V = X[order[start:start + self.batch_size]]
                hp0 = sigmoid(V @ params["W"] + params["b"])
                H0 = (rng.random(hp0.shape) < hp0).astype(np.float64)
                st = cd_statistics(params["W"], params["a"], params["b"], V, H0, self.cd_steps, rng)
                grads = {k: st[f"pos_{k}"] - st[f"neg_{k}"] for k in ("W", "a", "b")}
                params = apply_update(opt, params, grads, "ascend")
            self.weights_, self.visible_bias_, self.hidden_bias_ = params["W"], params["a"], params["b"]
            self.history_.append(self.reconstruction_error(X))
            logger.debug("rbm epoch %d recon-ce %.5f", epoch, self.history_[-1])
        self.n_features_in_ = m
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return sigmoid(X @ self.weights_ + self.hidden_bias_)

    def reconstruct(self, X):
        return sigmoid(self.transform(X) @ self.weights_.T + self.visible_bias_)

    def reconstruction_error(self, X) -> float:
        X = np.asarray(X, dtype=np.float64)
        return _bce(X, self.reconstruct(X))

    def embedding(self, i: int) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return entity_embedding(self.weights_, i)


class PatientAutoencoder(TransformerMixin, BaseEstimator):
    """Two-layer sigmoid autoencoder with tied decoder weights.

    The code is ``f(f(x W1 + b1) W2 + b2)``; the reconstruction is
    ``f(f(code W2.T + c2) W1.T + c1)`` and training minimises binary
    cross-entropy, so inputs must lie in ``[0, 1]``.
    """

    def __init__(self, hidden_dim=64, code_dim=32, learning_rate=1e-3, n_iter=100,
                 batch_size=32, optimizer="adam", random_state=None):
        self.hidden_dim = hidden_dim
        self.code_dim = code_dim
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def _check_unit(self, X):
        X = check_array(X, dtype=np.float64)
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError(
                "autoencoder features must lie in [0, 1]; min-max scale them first "
                "(see kgpath.cohort.preprocess)"
            )
        return X

    def fit(self, X, y=None):
        X = self._check_unit(X)
        if X.shape[0] == 0:
            raise ValueError("empty training set")
        rng = np.random.default_rng(self.random_state)
        n, l = X.shape
        params = {
            "enc1.weights": DenseLayer.glorot(l, self.hidden_dim, rng).weights,
            "enc1.bias": np.zeros(self.hidden_dim),
            "enc2.weights": DenseLayer.glorot(self.hidden_dim, self.code_dim, rng).weights,
            "enc2.bias": np.zeros(self.code_dim),
            "dec1.bias": np.zeros(self.hidden_dim),
            "dec2.bias": np.zeros(l),
        }
        opt = Optimizer(lr=self.learning_rate, kind=self.optimizer)
        self.params_ = params
        self.history_ = []
        for _ in range(self.n_iter):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                _, grads = autoencoder_loss(params, X[order[start:start + self.batch_size]])
                params = apply_update(opt, params, grads, "descend")
            self.params_ = params
            self.history_.append(autoencoder_loss(params, X, grad=False)[0])
        self.n_features_in_ = l
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = self._check_unit(X)
        p = self.params_
        h = sigmoid(X @ p["enc1.weights"] + p["enc1.bias"])
        return sigmoid(h @ p["enc2.weights"] + p["enc2.bias"])

    def inverse_transform(self, codes):
        check_is_fitted(self, "params_")
        p = self.params_
        d = sigmoid(np.atleast_2d(codes) @ p["enc2.weights"].T + p["dec1.bias"])
        return sigmoid(d @ p["enc1.weights"].T + p["dec2.bias"])


def autoencoder_loss(params, X, grad: bool = True):
    """Mean binary cross-entropy of the tied autoencoder and its gradients."""
    tape = GradientTape()
    enc1 = DenseLayer(params["enc1.weights"], params["enc1.bias"])
    enc2 = DenseLayer(params["enc2.weights"], params["enc2.bias"])
    dec1 = DenseLayer(params["enc2.weights"].T, params["dec1.bias"])
    dec2 = DenseLayer(params["enc1.weights"].T, params["dec2.bias"])
    h = tape.dense(enc1, X, "sigmoid", name="enc1")
    code = tape.dense(enc2, h, "sigmoid", name="enc2")
    d = tape.dense(dec1, code, "sigmoid", name="dec1")
    logits = tape.dense(dec2, d, "linear", name="dec2")
    out = sigmoid(logits)
    loss = _bce(X, out)
    if not grad:
        return loss, None
    g, _ = tape.backward((out - X) / X.size)
    grads = {
        "enc1.weights": g["enc1.weights"] + g["dec2.weights"].T,
        "enc1.bias": g["enc1.bias"],
        "enc2.weights": g["enc2.weights"] + g["dec1.weights"].T,
        "enc2.bias": g["enc2.bias"],
        "dec1.bias": g["dec1.bias"],
        "dec2.bias": g["dec2.bias"],
    }
    return loss, grads


def rbm_train(characters, k: int = 32, epochs: int = 100, lr: float = 1e-3,
              cd_steps: int = 1, rng_seed=None) -> RBMEmbedding:
    return RBMEmbedding(n_components=k, learning_rate=lr, n_iter=epochs,
                        cd_steps=cd_steps, random_state=rng_seed).fit(characters)


def ae_train(features, dims=(64, 32), epochs: int = 100, lr: float = 1e-3,
             rng_seed=None) -> PatientAutoencoder:
    d_h, d_e = dims
    return PatientAutoencoder(hidden_dim=d_h, code_dim=d_e, learning_rate=lr, n_iter=epochs,
                              random_state=rng_seed).fit(features)


def entity_embedding(weights, i: int) -> np.ndarray:
    weights = np.asarray(weights)
    if not 0 <= i < weights.shape[0]:
        raise IndexError(f"entity id {i} out of range [0, {weights.shape[0]})")
    return weights[i].copy()


def encode_patient(ae: PatientAutoencoder, p_f) -> np.ndarray:
    p_f = np.asarray(p_f, dtype=np.float64)
    if p_f.shape != (ae.n_features_in_,):
        raise ValueError(f"expected {ae.n_features_in_} features, got shape {p_f.shape}")
    return ae.transform(p_f[None, :])[0]


def relation_one_hot(relation: int, n_total: int) -> np.ndarray:
    if not 0 <= relation < n_total:
        raise IndexError(f"relation id {relation} out of range [0, {n_total})")
    out = np.zeros(n_total)
    out[relation] = 1.0
    return out
