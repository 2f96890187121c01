"""Classifier models over flat parameter vectors.

Every model exposes the same duck-typed surface so optimizers never look
inside a parameter vector:

    forward_logits(theta, features) -> (B, C) logits
    loss(theta, batch)              -> mean cross-entropy
    gradient(theta, batch)          -> flat gradient, same length as theta
    dim                             -> parameter count

MLP parameter packing is layer by layer: the weight matrix of shape
``(n_in, n_out)`` flattened row-major (input-major), followed by the
``n_out`` biases. Servers average raw vectors, so this order must not change.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import matmul, row_log_softmax, row_softmax


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"batch features must be 2-D, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"{x.shape[0]} feature rows but {y.size} labels")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]


def _check_labels(labels, n_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    B = logits.shape[0]
    logp = row_log_softmax(logits)
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    return float(loss), dlogits / B


class _Classifier:
    n_classes: int

    def loss(self, theta, batch):
        return softmax_xent(self.forward_logits(theta, batch.features), batch.labels)[0]

    def predict(self, theta, features):
        # argmax returns the first maximal index, so exact ties go to the lowest class
        return np.argmax(self.forward_logits(theta, features), axis=1)


@dataclass(frozen=True)
class MlpSpec(_Classifier):
    """ReLU multilayer perceptron; identity on the output layer."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.layer_sizes!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    @property
    def dim(self):
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def unpack(self, theta):
        """Split a flat vector into ``[(W, b), ...]`` views."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"parameter vector has length {theta.size}, model needs {self.dim}")
        layers, at = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = theta[at:at + n_in * n_out].reshape(n_in, n_out)
            at += n_in * n_out
            b = theta[at:at + n_out]
            at += n_out
            layers.append((W, b))
        return layers

    def pack(self, layers):
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])

    def init_params(self, rng):
        """Glorot-uniform weights, zero biases."""
        layers = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            layers.append((rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)))
        return self.pack(layers)

    def _check_features(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ShapeError(f"features of shape {x.shape} do not match input width {self.n_inputs}")
        return x

    def forward_logits(self, theta, features):
        a = self._check_features(features)
        layers = self.unpack(theta)
        for i, (W, b) in enumerate(layers):
            a = matmul(a, W) + b
            if i < len(layers) - 1:
                a = np.maximum(a, 0.0)
        return a

    def gradient(self, theta, batch):
        x = self._check_features(batch.features)
        _check_labels(batch.labels, self.n_classes)
        layers = self.unpack(theta)
        acts = [x]
        for i, (W, b) in enumerate(layers):
            z = acts[-1] @ W + b
            if i < len(layers) - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        _, delta = softmax_xent(acts[-1], batch.labels)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                # ReLU subgradient at exactly 0 is taken as 0
                delta = (delta @ W.T) * (acts[i] > 0.0)
        return self.pack(grads[::-1])

    def flops_per_step(self, batch_size):
        """Multiply-add count of one forward plus backward pass, times two."""
        macs = sum(a * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        return 6 * macs * batch_size


@dataclass(frozen=True)
class PinnedLinearSoftmax(_Classifier):
    """Linear softmax classifier with class 0's logit pinned at zero.

    Logits are ``[0, x @ W]`` with ``W`` of shape ``(n_features, n_classes - 1)``,
    so a two-class model on three features has exactly three parameters.
    """

    n_features: int
    n_classes: int = 2

    @property
    def dim(self):
        return self.n_features * (self.n_classes - 1)

    def _weights(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"parameter vector has length {theta.size}, model needs {self.dim}")
        return theta.reshape(self.n_features, self.n_classes - 1)

    def forward_logits(self, theta, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"features of shape {x.shape} do not match input width {self.n_features}")
        z = matmul(x, self._weights(theta))
        return np.hstack([np.zeros((x.shape[0], 1)), z])

    def gradient(self, theta, batch):
        _check_labels(batch.labels, self.n_classes)
        _, delta = softmax_xent(self.forward_logits(theta, batch.features), batch.labels)
        return (batch.features.T @ delta[:, 1:]).ravel()


@dataclass(frozen=True)
class Quadratic:
    """``f(theta) = 0.5 * theta^T H theta``; the batch argument is ignored."""

    hessian: np.ndarray

    @property
    def dim(self):
        return np.asarray(self.hessian).shape[0]

    def loss(self, theta, batch=None):
        theta = np.asarray(theta, dtype=np.float64)
        return 0.5 * float(theta @ np.asarray(self.hessian) @ theta)

    def gradient(self, theta, batch=None):
        return np.asarray(self.hessian, dtype=np.float64) @ np.asarray(theta, dtype=np.float64)


def forward_logits(model, theta, features):
    return model.forward_logits(theta, features)


def loss(model, theta, batch):
    return model.loss(theta, batch)


def gradient(model, theta, batch):
    return model.gradient(theta, batch)


def predict(model, theta, features):
    return model.predict(theta, features)


def predict_from_logits(logits):
    return np.argmax(np.asarray(logits), axis=1)


def probabilities(model, theta, features):
    return row_softmax(model.forward_logits(theta, features))
