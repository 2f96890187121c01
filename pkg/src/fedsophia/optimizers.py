"""Local update rules: Fed-Sophia, FedAvg-SGD and DONE's Richardson solve."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError
from .linalg import row_softmax
from .models import Batch


@dataclass(frozen=True)
class SophiaConfig:
    eta: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-12
    rho: float = 1.0
    tau: int = 5
    local_iters: int = 10
    batch_size: int = 512
    # m and h persist across rounds unless this is set
    reset_state_each_round: bool = False

    def __post_init__(self):
        checks = [
            (self.eta > 0, "eta must be > 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.beta1 < 1, "beta1 must lie in [0, 1)"),
            (0 <= self.beta2 < 1, "beta2 must lie in [0, 1)"),
            (self.eps > 0, "eps must be > 0"),
            (self.rho > 0, "rho must be > 0"),
            (int(self.tau) == self.tau and self.tau >= 1, "tau must be an integer >= 1"),
            (int(self.local_iters) == self.local_iters and self.local_iters >= 0,
             "local_iters must be an integer >= 0"),
            (int(self.batch_size) == self.batch_size and self.batch_size >= 1,
             "batch_size must be an integer >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    h: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), 0)


def clip(z, rho):
    return np.maximum(np.minimum(z, rho), -rho)


def sample_labels(probs, rng):
    """Draw one class per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1))
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def gnb_estimate(model, theta, batch, rng):
    """Gauss-Newton-Bartlett estimate of the Hessian diagonal.

    Labels are resampled from the model's own softmax, and the squared
    gradient of the mean loss against them is scaled by the batch size.
    """
    probs = row_softmax(model.forward_logits(theta, batch.features))
    y_hat = sample_labels(probs, rng)
    g_hat = model.gradient(theta, Batch(batch.features, y_hat))
    return len(batch) * g_hat * g_hat


def sophia_update(theta, m, h, cfg):
    """Weight decay, then the clipped preconditioned step.

    Returns ``(theta_decayed, theta_new)``; the step is bounded by
    ``eta * rho`` in every coordinate.
    """
    theta = np.asarray(theta, dtype=np.float64)
    theta_wd = theta - cfg.eta * cfg.weight_decay * theta
    direction = clip(m / np.maximum(h, cfg.eps), cfg.rho)
    theta_new = theta_wd - cfg.eta * direction
    # rounding in the subtraction can overshoot the box by an ulp; pull back
    bound = cfg.eta * cfg.rho
    over = np.abs(theta_new - theta_wd) > bound
    while np.any(over):
        theta_new[over] = np.nextafter(theta_new[over], theta_wd[over])
        over = np.abs(theta_new - theta_wd) > bound
    return theta_wd, theta_new


def sophia_local_step(model, theta, state, cfg, batch, rng):
    g = model.gradient(theta, batch)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    h = state.h
    if state.step % cfg.tau == 0:
        h_hat = gnb_estimate(model, theta, batch, rng)
        h = cfg.beta2 * h + (1.0 - cfg.beta2) * h_hat
    _, theta_new = sophia_update(theta, m, h, cfg)
    return theta_new, replace(state, m=m, h=h, step=state.step + 1)


def fedavg_local_step(model, theta, eta, batch):
    return theta - eta * model.gradient(theta, batch)


def hessian_vector_product(model, theta, batch, v):
    """Central difference of gradients along ``v``."""
    v = np.asarray(v, dtype=np.float64)
    delta = 1e-4 / max(1.0, float(np.max(np.abs(v), initial=0.0)))
    g_plus = model.gradient(theta + delta * v, batch)
    g_minus = model.gradient(theta - delta * v, batch)
    return (g_plus - g_minus) / (2.0 * delta)


DIVERGENCE_LIMIT = 1e8


def done_local_direction(model, theta, global_gradient, batch, alpha, iters):
    """Approximate ``H^{-1} g`` with ``iters`` Richardson iterations."""
    if alpha <= 0 or iters < 1:
        raise ValueError("alpha must be > 0 and iters >= 1")
    g = np.asarray(global_gradient, dtype=np.float64)
    d = np.zeros_like(g)
    for r in range(iters):
        d = d + alpha * (g - hessian_vector_product(model, theta, batch, d))
        if not np.all(np.isfinite(d)) or np.max(np.abs(d)) > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"Richardson iteration diverged after {r + 1} steps (alpha={alpha} too large?)"
            )
    return d


QUADRATIC_HESSIAN = np.array([[2.0, 2.0], [2.0, 6.0]])
QUADRATIC_METHODS = ("gradient", "diag-newton", "full-newton")


def quadratic_value(theta):
    t1, t2 = theta
    return t1 * t1 + 2.0 * t1 * t2 + 3.0 * t2 * t2


def quadratic_demo(start, method, eta, max_steps, tol=1e-9):
    """Iterate on ``t1^2 + 2 t1 t2 + 3 t2^2`` and record ``(step, t1, t2, f)``.

    Stops early once ``max|theta| <= tol``.
    """
    if method not in QUADRATIC_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(QUADRATIC_METHODS)}")
    if eta <= 0:
        raise ValueError("eta must be > 0")
    H = QUADRATIC_HESSIAN
    theta = np.asarray(start, dtype=np.float64).copy()
    rows = [(0, theta[0], theta[1], quadratic_value(theta))]
    for step in range(1, max_steps + 1):
        if np.max(np.abs(theta)) <= tol:
            break
        g = H @ theta
        if method == "gradient":
            delta = g
        elif method == "diag-newton":
            delta = g / np.diag(H)
        else:
            delta = np.linalg.solve(H, g)
        theta = theta - eta * delta
        rows.append((step, theta[0], theta[1], quadratic_value(theta)))
    return rows


def logits_jacobian(model, theta, features, step=1e-6):
    """``(B, C, d)`` Jacobian of the logits by central differences."""
    theta = np.asarray(theta, dtype=np.float64)
    base = model.forward_logits(theta, features)
    jac = np.empty(base.shape + (theta.size,))
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        jac[:, :, j] = (model.forward_logits(theta + e, features)
                        - model.forward_logits(theta - e, features)) / (2 * step)
    return jac


def gauss_newton_diagonal(model, theta, batch):
    """Exact diagonal of the Gauss-Newton matrix of the mean cross-entropy.

    Built as ``mean_b J_b^T S_b J_b`` with ``S_b = diag(p_b) - p_b p_b^T``,
    independently of the sampling estimator. Only practical for small models.
    """
    probs = row_softmax(model.forward_logits(theta, batch.features))
    jac = logits_jacobian(model, theta, batch.features)
    diag = np.zeros(jac.shape[2])
    for J_b, p in zip(jac, probs):
        S = np.diag(p) - np.outer(p, p)
        diag += np.einsum("cj,cd,dj->j", J_b, S, J_b)
    return diag / len(batch)
