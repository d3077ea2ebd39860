"""Autoregressive, adversarial and kernel objectives, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .numerics import Rng, ShapeError, Tensor, as_tensor, grad
from .numerics import ops

GP_EPS = 1e-16


@dataclass(frozen=True)
class LossWeights:
    lambda_ar: float = 1.0
    lambda_mmd: float = 1.0
    lambda_w: float = 0.1
    gp_lambda: float = 10.0

    def __post_init__(self):
        for name in ("lambda_ar", "lambda_mmd", "lambda_w", "gp_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def ar_loss(supervisor: Callable[[Tensor], Tensor], x_target, x_input, delta: int = 1, window: str = "full") -> Tensor:
    """Squared error of the supervisor's ``delta``-step-ahead forecasts.

    ``full`` averages over every forecast whose target lies inside the
    sequence; ``last_delta`` averages only over the final ``delta`` targets.
    """
    x_target, x_input = as_tensor(x_target), as_tensor(x_input)
    T = x_target.shape[1]
    if not 1 <= delta < T:
        raise ValueError(f"delta must satisfy 1 <= delta < T={T}, got {delta}")
    if window not in ("full", "last_delta"):
        raise ValueError(f"window must be 'full' or 'last_delta', got {window!r}")
    pred = supervisor(x_input)
    if window == "full":
        p = ops.slice_axis(pred, 1, 0, T - delta)
        y = ops.slice_axis(x_target, 1, delta, T)
    else:
        p = ops.slice_axis(pred, 1, T - 2 * delta, T - delta) if T >= 2 * delta else None
        if p is None:
            raise ValueError(f"last_delta window needs T >= 2*delta, got T={T}, delta={delta}")
        y = ops.slice_axis(x_target, 1, T - delta, T)
    return ops.mean(ops.square(ops.sub(p, y)))


def interpolate_samples(x_real, x_fake, rng: Rng, alpha=None) -> Tensor:
    """Random convex combination, one mixing weight per batch element."""
    x_real, x_fake = as_tensor(x_real), as_tensor(x_fake)
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"interpolate_samples: shapes {x_real.shape} and {x_fake.shape} differ")
    if alpha is None:
        alpha = rng.uniform(0.0, 1.0, (x_real.shape[0],))
    a = np.asarray(alpha, dtype=x_real.data.dtype).reshape((-1,) + (1,) * (x_real.ndim - 1))
    data = a * x_real.data + (1 - a) * x_fake.data
    return Tensor(data)


def gradient_penalty(critic: Callable[[Tensor], Tensor], x_interp, gp_lambda: float = 10.0) -> Tensor:
    """gp_lambda * mean((||d critic / d x||_2 - 1)^2) over the batch.

    The result stays differentiable with respect to the critic's weights.
    """
    x = Tensor(as_tensor(x_interp).data, requires_grad=True)
    scores = critic(x)
    (g,) = grad(ops.sum(scores), [x], create_graph=True)
    norm = ops.sqrt(ops.affine(ops.sq_norm(g), 1.0, GP_EPS))
    return ops.affine(ops.mean(ops.square(ops.affine(norm, 1.0, -1.0))), gp_lambda)


def critic_loss(critic, x_real, x_fake, gp_lambda: float, rng: Rng) -> Tensor:
    """mean D(fake) - mean D(real) + gradient penalty at random interpolates."""
    x_real, x_fake = as_tensor(x_real), as_tensor(x_fake)
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"critic_loss: shapes {x_real.shape} and {x_fake.shape} differ")
    x_interp = interpolate_samples(x_real, x_fake, rng)
    B = x_real.shape[0]
    scores = critic(ops.concat([x_fake.detach(), x_real.detach()], axis=0))
    gap = ops.sub(ops.mean(ops.slice_axis(scores, 0, 0, B)), ops.mean(ops.slice_axis(scores, 0, B, 2 * B)))
    if gp_lambda == 0:
        return gap
    return ops.add(gap, gradient_penalty(critic, x_interp, gp_lambda))


def generator_w_term(critic, x_fake) -> Tensor:
    """-mean critic score on generated samples.

    Callers exclude the critic's weights from the update; gradients reach the
    generator through ``x_fake``.
    """
    return ops.affine(ops.mean(critic(x_fake)), -1.0)


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    if not (a.requires_grad or b.requires_grad):
        return Tensor(cdist(a.data, b.data, "sqeuclidean"))
    n, m, d = a.shape[0], b.shape[0], a.shape[1]
    diff = ops.sub(ops.reshape(a, (n, 1, d)), ops.reshape(b, (1, m, d)))
    return ops.sum(ops.square(diff), axis=2)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled, flattened samples."""
    z = np.concatenate([x.reshape(len(x), -1), y.reshape(len(y), -1)]).astype(np.float64)
    sigma = float(np.median(pdist(z)))
    return sigma if sigma > 0 else 1.0


def mmd_rbf(x_set, y_set, sigma: float | None = None) -> Tensor:
    """Squared MMD with an RBF kernel on flattened samples.

    Within-set sums exclude the diagonal (divisor n(n-1)); the cross term keeps
    every pair (divisor n^2). ``sigma=None`` uses the median heuristic.
    """
    x_set, y_set = as_tensor(x_set), as_tensor(y_set)
    n = x_set.shape[0]
    if n < 2 or y_set.shape[0] != n:
        raise ValueError(f"mmd_rbf needs two sets of equal size n >= 2, got {x_set.shape[0]} and {y_set.shape[0]}")
    x = ops.reshape(x_set, (n, -1))
    y = ops.reshape(y_set, (n, -1))
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd_rbf: sample dimensions {x.shape[1]} and {y.shape[1]} differ")
    if sigma is None:
        sigma = median_bandwidth(x.data, y.data)
    scale = -1.0 / (2.0 * sigma * sigma)
    off_diag = Tensor(1.0 - np.eye(n))

    def k(a, b):
        return ops.exp(ops.affine(_pairwise_sq_dists(a, b), scale))

    kxx = ops.sum(ops.mul(k(x, x), off_diag))
    kyy = ops.sum(ops.mul(k(y, y), off_diag))
    kxy = ops.sum(k(x, y))
    within = ops.affine(ops.add(kxx, kyy), 1.0 / (n * (n - 1)))
    return ops.sub(within, ops.affine(kxy, 2.0 / (n * n)))


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """ddpm + lambda_ar*ar + lambda_mmd*mmd + lambda_w*w.

    A zero weight, or a missing part, leaves that term out of the graph.
    """
    total = parts["ddpm"]
    for key, lam in (("ar", weights.lambda_ar), ("mmd", weights.lambda_mmd), ("w", weights.lambda_w)):
        if lam == 0 or key not in parts:
            continue
        total = ops.add(total, ops.affine(parts[key], lam))
    return total
