"""Finite-difference gradient checking shared by the test modules."""

from __future__ import annotations

import numpy as np

from timed.numerics import Tensor, check_mode, grad


def numeric_grad(f, arrays: list[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[index]``."""
    base = arrays[index]
    out = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[index][i] += h
        minus[index][i] -= h
        out[i] = (f(*plus) - f(*minus)) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_gradients(fn, arrays: list[np.ndarray], h: float = 1e-6) -> float:
    """Worst relative error between analytic and numeric gradients of ``fn``.

    ``fn`` maps Tensors to a scalar Tensor. Runs in 64-bit mode.
    """
    with check_mode():
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

        def scalar(*xs):
            return float(fn(*[Tensor(x) for x in xs]).data)

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        analytic = grad(fn(*leaves), leaves)
        worst = 0.0
        for k in range(len(arrays)):
            num = numeric_grad(scalar, arrays, k, h)
            worst = max(worst, rel_error(analytic[k].data, num))
        return worst


def check_param_gradients(loss_of_params, params: dict, names=None, h: float = 1e-6, max_entries: int = 6, seed: int = 0) -> float:
    """Spot-check gradients of a model loss over a few entries of each parameter.

    ``params`` maps names to Tensors whose data is float64; entries are
    perturbed in place and restored.
    """
    gen = np.random.default_rng(seed)
    names = list(params) if names is None else names
    with check_mode():
        loss = loss_of_params()
        analytic = dict(zip(names, grad(loss, [params[n] for n in names])))
        worst = 0.0
        for n in names:
            p = params[n]
            flat = p.data.reshape(-1)
            picks = gen.choice(flat.size, size=min(max_entries, flat.size), replace=False)
            num, ana = [], []
            for j in picks:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(loss_of_params().data)
                flat[j] = orig - h
                fm = float(loss_of_params().data)
                flat[j] = orig
                num.append((fp - fm) / (2 * h))
                ana.append(analytic[n].data.reshape(-1)[j])
            worst = max(worst, rel_error(np.array(ana), np.array(num)))
        return worst
