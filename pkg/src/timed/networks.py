"""Masked-attention transformer backbone and its three heads, plus a GRU.

The denoiser, supervisor and critic all run the same block stack
(:func:`backbone`); they differ only in the input embedding (the denoiser adds
a diffusion-step embedding) and in the output head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Rng, ShapeError, Tensor, as_tensor, parameter
from .numerics import ops

MASK_VALUE = -1e9
KINDS = ("denoiser", "supervisor", "critic")


@dataclass(frozen=True)
class TransformerConfig:
    T_data: int
    F: int
    d: int = 32
    H: int = 4
    L: int = 2
    d_ff: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"TransformerConfig.{name} must be >= 1, got {value}")
        if self.d % self.H:
            raise ValueError(f"model width d={self.d} is not divisible by H={self.H}")

    @property
    def d_k(self) -> int:
        return self.d // self.H


def build_causal_mask(T_data: int) -> np.ndarray:
    """0 on and below the diagonal, a large negative bias above it."""
    if T_data < 1:
        raise ValueError("T_data must be >= 1")
    return np.triu(np.full((T_data, T_data), MASK_VALUE), k=1)


def _uniform(rng: Rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, shape))


def _zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def _ones(shape) -> Tensor:
    return parameter(np.ones(shape))


def init_block_params(cfg: TransformerConfig, rng: Rng, prefix: str) -> dict[str, Tensor]:
    d, f = cfg.d, cfg.d_ff
    return {
        f"{prefix}.wq": _uniform(rng, d, (d, d)),
        f"{prefix}.wk": _uniform(rng, d, (d, d)),
        f"{prefix}.wv": _uniform(rng, d, (d, d)),
        f"{prefix}.wo": _uniform(rng, d, (d, d)),
        f"{prefix}.bo": _zeros((d,)),
        f"{prefix}.ln1.g": _ones((d,)),
        f"{prefix}.ln1.b": _zeros((d,)),
        f"{prefix}.w1": _uniform(rng, d, (d, f)),
        f"{prefix}.b1": _zeros((f,)),
        f"{prefix}.w2": _uniform(rng, f, (f, d)),
        f"{prefix}.b2": _zeros((d,)),
        f"{prefix}.ln2.g": _ones((d,)),
        f"{prefix}.ln2.b": _zeros((d,)),
    }


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ops.matmul(x, w)
    return ops.add(y, b) if b is not None else y


def multi_head_attention(p: dict[str, Tensor], prefix: str, h: Tensor, mask: Tensor, n_heads: int) -> Tensor:
    B, T, d = h.shape
    dk = d // n_heads

    def heads(w):
        return ops.permute(ops.reshape(ops.matmul(h, w), (B, T, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(p[f"{prefix}.wq"]), heads(p[f"{prefix}.wk"]), heads(p[f"{prefix}.wv"])
    scores = ops.affine(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(dk))
    attn = ops.softmax(scores, mask)
    ctx = ops.reshape(ops.permute(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    return linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(p: dict[str, Tensor], prefix: str, h: Tensor, mask: Tensor, n_heads: int) -> Tensor:
    """Post-norm block: LN(h + MHA(h)), then LN(h + FFN(h))."""
    h = ops.layer_norm(ops.add(h, multi_head_attention(p, prefix, h, mask, n_heads)), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    ff = linear(ops.relu(linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"])), p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return ops.layer_norm(ops.add(h, ff), p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def backbone(p: dict[str, Tensor], h: Tensor, mask: Tensor, cfg: TransformerConfig) -> Tensor:
    for layer in range(cfg.L):
        h = transformer_block(p, f"blocks.{layer}", h, mask, cfg.H)
    return h


class MaskedTransformer:
    """Weights for one specialisation of the shared backbone."""

    def __init__(self, cfg: TransformerConfig, kind: str, rng: Rng, T_diff: int | None = None, masked: bool = True):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        if kind == "denoiser" and not T_diff:
            raise ValueError("the denoiser needs T_diff for its step embedding")
        self.cfg = cfg
        self.kind = kind
        self.T_diff = T_diff if kind == "denoiser" else None
        self.masked = masked
        self.mask = Tensor(build_causal_mask(cfg.T_data) if masked else np.zeros((cfg.T_data, cfg.T_data)))
        d = cfg.d
        p: dict[str, Tensor] = {
            "embed.w": _uniform(rng, cfg.F, (cfg.F, d)),
            "embed.b": _zeros((d,)),
            "pos": _zeros((cfg.T_data, d)),
        }
        if self.T_diff:
            p["time"] = _zeros((self.T_diff, d))
        for layer in range(cfg.L):
            p.update(init_block_params(cfg, rng, f"blocks.{layer}"))
        out = 1 if kind == "critic" else cfg.F
        p["head.w"] = _uniform(rng, d, (d, out))
        p["head.b"] = _zeros((out,))
        self.params = p

    def backbone_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("blocks.")]

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def __call__(self, x, tau=None):
        if self.kind == "denoiser":
            return denoiser_forward(self, x, tau)
        if self.kind == "supervisor":
            return supervisor_forward(self, x)
        return critic_forward(self, x)


def _check_input(model: MaskedTransformer, x: Tensor) -> None:
    cfg = model.cfg
    if x.ndim != 3 or x.shape[1:] != (cfg.T_data, cfg.F):
        raise ShapeError(f"{model.kind}: expected input (B, {cfg.T_data}, {cfg.F}), got {x.shape}")


def embed_inputs(model: MaskedTransformer, x, tau=None) -> Tensor:
    """Input projection + positional table (+ diffusion-step row for the denoiser)."""
    x = as_tensor(x)
    _check_input(model, x)
    p = model.params
    h = ops.add(linear(x, p["embed.w"], p["embed.b"]), p["pos"])
    if model.T_diff is None:
        if tau is not None:
            raise ValueError(f"{model.kind} takes no diffusion step")
        return h
    if tau is None:
        raise ValueError("denoiser requires a diffusion step")
    tau = np.broadcast_to(np.asarray(tau, dtype=np.int64), (x.shape[0],))
    if np.any(tau < 1) or np.any(tau > model.T_diff):
        raise ValueError(f"diffusion step must lie in [1, {model.T_diff}], got {tau}")
    onehot = np.zeros((x.shape[0], model.T_diff))
    onehot[np.arange(x.shape[0]), tau - 1] = 1.0
    t_emb = ops.matmul(Tensor(onehot), p["time"])
    return ops.add(h, ops.reshape(t_emb, (x.shape[0], 1, model.cfg.d)))


def denoiser_forward(model: MaskedTransformer, x_tau, tau) -> Tensor:
    h = backbone(model.params, embed_inputs(model, x_tau, tau), model.mask, model.cfg)
    return linear(h, model.params["head.w"], model.params["head.b"])


def supervisor_forward(model: MaskedTransformer, x_hat) -> Tensor:
    """Output at position t forecasts the value ``delta`` steps after t."""
    h = backbone(model.params, embed_inputs(model, x_hat), model.mask, model.cfg)
    return linear(h, model.params["head.w"], model.params["head.b"])


def refine(supervisor: MaskedTransformer, x_hat, delta: int = 1) -> Tensor:
    """Replace the last ``delta`` steps by the supervisor's forecast of them.

    These are the steps hidden during supervisor pretraining, each predicted
    from the prefix ending ``delta`` steps earlier. Earlier steps pass through.
    """
    x_hat = as_tensor(x_hat)
    T = x_hat.shape[1]
    if not 1 <= delta or 2 * delta > T:
        raise ValueError(f"delta must satisfy 1 <= delta <= T/2 with T={T}, got {delta}")
    forecast = ops.slice_axis(supervisor_forward(supervisor, x_hat), 1, T - 2 * delta, T - delta)
    return ops.concat([ops.slice_axis(x_hat, 1, 0, T - delta), forecast], axis=1)


def critic_forward(model: MaskedTransformer, x) -> Tensor:
    """Unconstrained score per sequence: backbone, mean over time, linear head."""
    h = backbone(model.params, embed_inputs(model, x), model.mask, model.cfg)
    pooled = ops.mean(h, axis=1)
    return ops.reshape(linear(pooled, model.params["head.w"], model.params["head.b"]), (h.shape[0],))


class GruNetwork:
    """Single-layer GRU with a classification or forecasting head.

    Gate layout in the packed matrices is [update | reset | candidate].
    """

    def __init__(self, n_features: int, hidden: int, task: str, rng: Rng, n_out: int | None = None):
        if task not in ("classify", "forecast"):
            raise ValueError(f"unknown GRU task {task!r}")
        self.task = task
        self.hidden = hidden
        self.n_features = n_features
        n_out = 1 if task == "classify" else (n_out or n_features)
        H = hidden
        self.params = {
            "wx": _uniform(rng, n_features, (n_features, 3 * H)),
            "u_zr": _uniform(rng, H, (H, 2 * H)),
            "u_h": _uniform(rng, H, (H, H)),
            "b": _zeros((3 * H,)),
            "head.w": _uniform(rng, H, (H, n_out)),
            "head.b": _zeros((n_out,)),
        }

    def __call__(self, x):
        return gru_forward(self, x)[1]


def gru_forward(net: GruNetwork, x) -> tuple[list[Tensor], Tensor]:
    """Run the recurrence left to right.

    Returns the hidden state after every step and the task output: a logit
    per sequence (classify) or a sigmoid forecast per step (forecast).
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != net.n_features:
        raise ShapeError(f"gru: expected input (B, T, {net.n_features}), got {x.shape}")
    B, T, _ = x.shape
    H = net.hidden
    p = net.params
    xw = ops.add(ops.matmul(x, p["wx"]), p["b"])
    h = Tensor(np.zeros((B, H)))
    states = []
    for t in range(T):
        xt = ops.reshape(ops.slice_axis(xw, 1, t, t + 1), (B, 3 * H))
        zr = ops.sigmoid(ops.add(ops.slice_axis(xt, 1, 0, 2 * H), ops.matmul(h, p["u_zr"])))
        z = ops.slice_axis(zr, 1, 0, H)
        r = ops.slice_axis(zr, 1, H, 2 * H)
        cand = ops.tanh(ops.add(ops.slice_axis(xt, 1, 2 * H, 3 * H), ops.matmul(ops.mul(r, h), p["u_h"])))
        h = ops.add(h, ops.mul(z, ops.sub(cand, h)))
        states.append(h)
    if net.task == "classify":
        return states, ops.reshape(linear(h, p["head.w"], p["head.b"]), (B,))
    seq = ops.concat([ops.reshape(s, (B, 1, H)) for s in states], axis=1)
    return states, ops.sigmoid(linear(seq, p["head.w"], p["head.b"]))
