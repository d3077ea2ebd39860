"""Post-hoc scores for synthetic time series.

* discriminative score: |accuracy - 0.5| of a GRU real-vs-synthetic classifier
* predictive score: MAE on real data of a GRU forecaster trained on synthetic data
* MMD between the flattened sets
* 2-D PCA projection of the pooled sets
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batch_iter
from .losses import median_bandwidth, mmd_rbf
from .networks import GruNetwork, gru_forward
from .numerics import AdamState, Rng, Tensor, adam_step, grad, no_grad, set_grad_enabled
from .numerics import ops


@dataclass(frozen=True)
class GruTraining:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    min_hidden: int = 8

    def hidden_for(self, n_features: int) -> int:
        return max(self.min_hidden, n_features)

    def fingerprint(self) -> str:
        return f"gru(h=max({self.min_hidden},F),steps={self.steps},batch={self.batch_size},lr={self.lr})"


DEFAULT_GRU = GruTraining()


@dataclass
class ScoreReport:
    metric: str
    mean: float
    std: float
    repeats: int
    fingerprint: str = ""
    values: list[float] = field(default_factory=list)

    @classmethod
    def from_values(cls, metric: str, values: Sequence[float], fingerprint: str = "") -> "ScoreReport":
        if not values:
            raise ValueError("a score report needs at least one repeat")
        v = np.asarray(values, dtype=np.float64)
        return cls(metric, float(v.mean()), float(v.std()), len(v), fingerprint, [float(x) for x in v])


def _as_array(x) -> np.ndarray:
    return x.samples if isinstance(x, Dataset) else np.asarray(x, dtype=np.float32)


def equalize(real: np.ndarray, synth: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Seeded subsample of the larger set down to the smaller one's size."""
    n = min(len(real), len(synth))
    if len(real) > n:
        real = real[np.sort(rng.choice(len(real), n))]
    if len(synth) > n:
        synth = synth[np.sort(rng.choice(len(synth), n))]
    return real, synth


def _train(net: GruNetwork, loss_fn: Callable[[np.ndarray], Tensor], data: np.ndarray, cfg: GruTraining, rng: Rng) -> list[float]:
    names = list(net.params)
    opt = AdamState.for_params(net.params, lr=cfg.lr)
    batch = min(cfg.batch_size, len(data))
    losses = []
    step = 0
    # callers may sit inside no_grad; the scorer still has to learn
    with set_grad_enabled(True):
        while step < cfg.steps:
            for xb in batch_iter(data, batch, rng):
                loss = loss_fn(xb)
                grads = grad(loss, [net.params[k] for k in names])
                adam_step(opt, net.params, dict(zip(names, grads)))
                losses.append(loss.item())
                step += 1
                if step >= cfg.steps:
                    break
    return losses


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Stable mean binary cross-entropy: relu(z) - z*y + log(1 + exp(-|z|))."""
    y = Tensor(labels)
    soft = ops.log(ops.affine(ops.exp(ops.affine(ops.abs(logits), -1.0)), 1.0, 1.0))
    return ops.mean(ops.add(ops.sub(ops.relu(logits), ops.mul(logits, y)), soft))


def discriminative_score(real, synth, rng: Rng, cfg: GruTraining = DEFAULT_GRU, return_details: bool = False):
    """|test accuracy - 0.5| of a GRU trained to tell real (1) from synthetic (0)."""
    real, synth = _as_array(real), _as_array(synth)
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("discriminative_score needs nonempty real and synthetic sets")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"real {real.shape[1:]} and synthetic {synth.shape[1:]} sequence shapes differ")
    real, synth = equalize(real, synth, rng)
    x = np.concatenate([real, synth]).astype(np.float32)
    y = np.concatenate([np.ones(len(real)), np.zeros(len(synth))])
    perm = rng.permutation(len(x))
    x, y = x[perm], y[perm]
    n_train = int(round(0.8 * len(x)))
    x_tr, y_tr, x_te, y_te = x[:n_train], y[:n_train], x[n_train:], y[n_train:]
    if min(int((y_te == 1).sum()), int((y_te == 0).sum())) < 5:
        raise ValueError("discriminative_score: fewer than 5 test examples in a class")

    net = GruNetwork(x.shape[2], cfg.hidden_for(x.shape[2]), "classify", rng)
    packed = np.concatenate([x_tr.reshape(len(x_tr), -1), y_tr[:, None]], axis=1).astype(np.float32)
    T, F = x.shape[1], x.shape[2]

    def loss_fn(batch):
        xb = batch[:, :-1].reshape(-1, T, F)
        _, logits = gru_forward(net, xb)
        return bce_with_logits(logits, batch[:, -1])

    _train(net, loss_fn, packed, cfg, rng)
    with no_grad():
        _, logits = gru_forward(net, x_te)
    acc = float(((logits.data > 0).astype(np.float64) == y_te).mean())
    score = abs(acc - 0.5)
    return (score, acc) if return_details else score


def forecast_mae(forecaster: Callable[[np.ndarray], np.ndarray], data) -> float:
    """MAE of one-step-ahead forecasts over every position and feature."""
    data = _as_array(data)
    pred = np.asarray(forecaster(data[:, :-1, :]))
    return float(np.abs(pred - data[:, 1:, :]).mean())


def predictive_score(real, synth, rng: Rng, cfg: GruTraining = DEFAULT_GRU) -> float:
    """Train-on-synthetic, test-on-real one-step forecasting MAE."""
    real, synth = _as_array(real), _as_array(synth)
    if real.shape[1] < 2:
        raise ValueError("predictive_score needs sequences of length >= 2")
    real, synth = equalize(real, synth, rng)
    F = synth.shape[2]
    net = GruNetwork(F, cfg.hidden_for(F), "forecast", rng)

    def loss_fn(batch):
        _, pred = gru_forward(net, batch[:, :-1, :])
        return ops.mean(ops.abs(ops.sub(pred, Tensor(batch[:, 1:, :]))))

    _train(net, loss_fn, synth.astype(np.float32), cfg, rng)

    def forecaster(x):
        with no_grad():
            return gru_forward(net, x)[1].data

    return forecast_mae(forecaster, real)


def mmd_metric(real, synth, rng: Rng, sigma: float | None = None) -> float:
    """Squared MMD between equal-size flattened sets (median-heuristic bandwidth)."""
    real, synth = equalize(_as_array(real), _as_array(synth), rng)
    r = real.reshape(len(real), -1).astype(np.float64)
    s = synth.reshape(len(synth), -1).astype(np.float64)
    if sigma is None:
        sigma = median_bandwidth(r, s)
    with no_grad():
        return float(mmd_rbf(r, s, sigma).data)


# ---------------------------------------------------------------------------
# PCA


class PcaConvergenceError(RuntimeError):
    def __init__(self, component: int, residual: float, iterations: int):
        super().__init__(f"power iteration for component {component} did not converge after {iterations} iterations (residual {residual:.3e})")
        self.component = component
        self.residual = residual
        self.iterations = iterations


@dataclass
class Projection:
    points: np.ndarray  # (n_real + n_synth, 2)
    sources: list[str]
    components: np.ndarray  # (2, d)
    eigenvalues: np.ndarray  # (2,)
    mean: np.ndarray  # (d,)

    def project(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return (flat - self.mean) @ self.components.T


def power_iteration(cov: np.ndarray, k: int = 2, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Stops when the residual ||C v - lambda v|| falls below ``tol`` times the
    largest eigenvalue seen so far.
    """
    c = np.array(cov, dtype=np.float64)
    d = c.shape[0]
    gen = np.random.default_rng(seed)
    vecs, vals = [], []
    scale = max(float(np.abs(np.diag(c)).max()) if d else 0.0, np.finfo(float).tiny)
    for comp in range(k):
        v = gen.standard_normal(d)
        for u in vecs:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        lam = 0.0
        residual = np.inf
        for it in range(1, max_iter + 1):
            w = c @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-14 * scale:
                # remaining spectrum is numerically zero: v is an eigenvector with eigenvalue 0
                lam, residual = 0.0, nw
                break
            v_new = w / nw
            for u in vecs:
                v_new -= (v_new @ u) * u
            v_new /= np.linalg.norm(v_new)
            lam = float(v_new @ c @ v_new)
            residual = float(np.linalg.norm(c @ v_new - lam * v_new))
            v = v_new
            if residual <= tol * scale:
                break
        else:
            raise PcaConvergenceError(comp + 1, residual, max_iter)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs.append(v)
        vals.append(max(lam, 0.0))
        c = c - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def pca_project(real, synth, tol: float = 1e-8, max_iter: int = 10_000) -> Projection:
    real, synth = _as_array(real), _as_array(synth)
    pooled = np.concatenate([real.reshape(len(real), -1), synth.reshape(len(synth), -1)]).astype(np.float64)
    if len(pooled) < 3:
        raise ValueError("pca_project needs at least 3 pooled sequences")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    cov = centered.T @ centered / (len(pooled) - 1)
    vals, vecs = power_iteration(cov, 2, tol, max_iter)
    points = centered @ vecs.T
    sources = ["real"] * len(real) + ["synthetic"] * len(synth)
    return Projection(points, sources, vecs, vals, mean)


# ---------------------------------------------------------------------------
# export


def write_scores_csv(path, reports: Sequence[ScoreReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "repeats"])
        for r in reports:
            w.writerow([r.metric, repr(r.mean), repr(r.std), r.repeats])


def write_projection_csv(path, proj: Projection) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "pc1", "pc2"])
        for src, (a, b) in zip(proj.sources, proj.points):
            w.writerow([src, repr(float(a)), repr(float(b))])


COLORS = {"real": "#d62728", "synthetic": "#1f77b4"}


def write_projection_svg(path, proj: Projection, size: int = 480) -> None:
    """Minimal scatter plot: red for real, blue for synthetic."""
    pts = proj.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">']
    lines.append(f'<rect width="{size}" height="{size}" fill="white"/>')
    for src, (x, y) in zip(proj.sources, xy):
        lines.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2" fill="{COLORS[src]}" fill-opacity="0.5"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
