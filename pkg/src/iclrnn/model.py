"""Stacked recurrent cell with optional convexity/Lipschitz weight constraints.

Per layer ``l`` and step ``t``::

    h[l]_t = relu(Wx[l] @ in[l]_t + Wh[l] @ h[l]_{t-1} + bh[l])
    y_t    = g(Wy @ h[L]_t + by)

``in[0]_t`` is the network input (the same vector at every step for the
one-to-many rollout, or a per-step sequence), ``in[l]_t = h[l-1]_t``
otherwise, ``h_0 = 0`` and ``g`` is linear or softmax.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .constraints import DEFAULT_PROJECTION, ProjectionConfig, project_iclrnn
from .errors import DimensionError, NumericError, ParameterError


class ConstraintMode(str, Enum):
    PLAIN = "plain"
    CONVEX_ONLY = "convex_only"
    LIPSCHITZ_ONLY = "lipschitz_only"
    CONVEX_LIPSCHITZ = "convex_lipschitz"

    @property
    def convex(self):
        return self in (ConstraintMode.CONVEX_ONLY, ConstraintMode.CONVEX_LIPSCHITZ)

    @property
    def lipschitz(self):
        return self in (ConstraintMode.LIPSCHITZ_ONLY, ConstraintMode.CONVEX_LIPSCHITZ)


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    output_dim: int
    hidden_dims: tuple = (64, 64)
    rollout_steps: int = 1
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    constraint_mode: ConstraintMode = ConstraintMode.CONVEX_LIPSCHITZ
    projection: ProjectionConfig = DEFAULT_PROJECTION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "constraint_mode", ConstraintMode(self.constraint_mode))
        if self.rollout_steps < 1:
            raise ParameterError("rollout_steps must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ParameterError("layer sizes must be >= 1")
        if self.hidden_activation != "relu":
            raise ParameterError("hidden activation must be 'relu' (convex, non-decreasing, 1-Lipschitz)")
        if self.output_activation not in ("linear", "softmax"):
            raise ParameterError(f"unknown output activation {self.output_activation!r}")

    def projection_for_mode(self):
        mode = self.constraint_mode
        return replace(self.projection, clip_enabled=mode.convex, spectral_enabled=mode.lipschitz)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dims": list(self.hidden_dims),
            "rollout_steps": self.rollout_steps,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "constraint_mode": self.constraint_mode.value,
            "projection": vars(self.projection).copy(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["projection"] = ProjectionConfig(**d.get("projection", {}))
        return cls(**d)


@dataclass
class LayerParams:
    Wx: np.ndarray  # (hidden, input)
    Wh: np.ndarray  # (hidden, hidden)
    bh: np.ndarray  # (hidden,)


@dataclass
class CellParams:
    layers: list
    Wy: np.ndarray  # (output, hidden)
    by: np.ndarray  # (output,)

    def named(self):
        """Ordered ``{name: array}`` view; arrays are shared, not copied."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"Wx{i}"] = layer.Wx
            out[f"Wh{i}"] = layer.Wh
            out[f"bh{i}"] = layer.bh
        out["Wy"] = self.Wy
        out["by"] = self.by
        return out

    @classmethod
    def from_named(cls, d):
        n = sum(1 for k in d if k.startswith("Wx"))
        layers = [LayerParams(d[f"Wx{i}"], d[f"Wh{i}"], d[f"bh{i}"]) for i in range(n)]
        return cls(layers, d["Wy"], d["by"])

    def copy(self):
        return CellParams.from_named({k: v.copy() for k, v in self.named().items()})

    def weight_names(self):
        return [k for k in self.named() if k.startswith("W")]

    def check_shapes(self, cfg):
        prev = cfg.input_dim
        if len(self.layers) != len(cfg.hidden_dims):
            raise DimensionError("layer count does not match config")
        for layer, h in zip(self.layers, cfg.hidden_dims):
            if layer.Wx.shape != (h, prev) or layer.Wh.shape != (h, h) or layer.bh.shape != (h,):
                raise DimensionError("layer parameter shapes do not match config")
            prev = h
        if self.Wy.shape != (cfg.output_dim, prev) or self.by.shape != (cfg.output_dim,):
            raise DimensionError("output head shapes do not match config")


def project_params(params, cfg):
    """Apply the constraint mode's projection to every weight (biases untouched)."""
    if cfg.constraint_mode is ConstraintMode.PLAIN:
        return params
    pcfg = cfg.projection_for_mode()
    d = dict(params.named())
    for k in params.weight_names():
        d[k] = project_iclrnn(d[k], pcfg)
    return CellParams.from_named(d)


def init_params(cfg, rng=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, then projected."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
    layers = []
    prev = cfg.input_dim
    for h in cfg.hidden_dims:
        wx = rng.uniform(-1.0, 1.0, (h, prev)) / np.sqrt(prev)
        wh = rng.uniform(-1.0, 1.0, (h, h)) / np.sqrt(h)
        layers.append(LayerParams(wx, wh, np.zeros(h)))
        prev = h
    wy = rng.uniform(-1.0, 1.0, (cfg.output_dim, prev)) / np.sqrt(prev)
    return project_params(CellParams(layers, wy, np.zeros(cfg.output_dim)), cfg)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    x: np.ndarray  # (B, D) repeated input or (B, T, D) sequence
    sequence: bool
    pre: list = field(default_factory=list)  # pre[l][t]: (B, H_l) pre-activation
    hid: list = field(default_factory=list)  # hid[l][t]
    out: np.ndarray = None  # (B, T, O)


def _normalize_input(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.input_dim:
        raise DimensionError(f"input shape {x.shape} incompatible with input_dim={cfg.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    return x, squeeze


def forward(params, cfg, x, steps=None, return_cache=False):
    """Roll the cell out.

    ``x`` may be ``(D,)``, ``(B, D)`` (fed at every step) or ``(B, T, D)``
    (one vector per step). Returns outputs of shape ``(T, O)`` or
    ``(B, T, O)``; with ``return_cache`` also the :class:`ForwardCache`.
    """
    x, squeeze = _normalize_input(x, cfg)
    sequence = x.ndim == 3
    T = x.shape[1] if sequence else (cfg.rollout_steps if steps is None else int(steps))
    B = x.shape[0]
    cache = ForwardCache(x, sequence, [[] for _ in params.layers], [[] for _ in params.layers])
    hs = [np.zeros((B, layer.bh.shape[0])) for layer in params.layers]
    outs = np.empty((B, T, params.by.shape[0]))
    proj_x = None if sequence else x @ params.layers[0].Wx.T
    for t in range(T):
        inp = None
        for l, layer in enumerate(params.layers):
            if l == 0:
                a = proj_x if proj_x is not None else x[:, t] @ layer.Wx.T
            else:
                a = inp @ layer.Wx.T
            a = a + hs[l] @ layer.Wh.T + layer.bh
            h = np.maximum(a, 0.0)
            cache.pre[l].append(a)
            cache.hid[l].append(h)
            hs[l] = h
            inp = h
        z = inp @ params.Wy.T + params.by
        outs[:, t] = _softmax(z) if cfg.output_activation == "softmax" else z
        if not np.all(np.isfinite(outs[:, t])):
            raise NumericError(f"non-finite activation at step {t + 1}", step=t + 1)
    cache.out = outs
    result = outs[0] if squeeze else outs
    return (result, cache) if return_cache else result


def backward(params, cfg, cache, grad_out):
    """Reverse-mode pass through the unrolled graph.

    ``grad_out`` is dLoss/dy with the shape of the cached outputs. Returns
    ``(grads, grad_x)`` with ``grads`` a ``{name: array}`` dict matching
    :meth:`CellParams.named` and ``grad_x`` shaped like the cached input.
    The ReLU subgradient at 0 is taken as 0.
    """
    B, T, _ = cache.out.shape
    L = len(params.layers)
    g = {k: np.zeros_like(v) for k, v in params.named().items()}
    if cfg.output_activation == "softmax":
        y = cache.out
        dz_all = y * (grad_out - np.sum(grad_out * y, axis=-1, keepdims=True))
    else:
        dz_all = grad_out
    grad_x = np.zeros_like(cache.x)
    dh_next = [np.zeros((B, layer.bh.shape[0])) for layer in params.layers]
    for t in range(T - 1, -1, -1):
        dz = dz_all[:, t]
        g["Wy"] += dz.T @ cache.hid[L - 1][t]
        g["by"] += dz.sum(axis=0)
        dh = dz @ params.Wy + dh_next[L - 1]
        for l in range(L - 1, -1, -1):
            layer = params.layers[l]
            da = dh * (cache.pre[l][t] > 0.0)
            if l > 0:
                src = cache.hid[l - 1][t]
            else:
                src = cache.x[:, t] if cache.sequence else cache.x
            g[f"Wx{l}"] += da.T @ src
            g[f"bh{l}"] += da.sum(axis=0)
            if t > 0:
                g[f"Wh{l}"] += da.T @ cache.hid[l][t - 1]
            dh_next[l] = da @ layer.Wh
            d_in = da @ layer.Wx
            if l > 0:
                dh = d_in + dh_next[l - 1]
            elif cache.sequence:
                grad_x[:, t] += d_in
            else:
                grad_x += d_in
    return g, grad_x


def mse_loss_and_grad(outputs, targets):
    """MSE over every target element; targets may cover only the final steps."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[:, None, :]
    k = targets.shape[1]
    if k > outputs.shape[1] or targets.shape[0] != outputs.shape[0] or targets.shape[2] != outputs.shape[2]:
        raise DimensionError(f"targets {targets.shape} incompatible with outputs {outputs.shape}")
    diff = outputs[:, -k:] - targets
    loss = float(np.mean(diff * diff))
    grad = np.zeros_like(outputs)
    grad[:, -k:] = 2.0 * diff / diff.size
    return loss, grad


def bptt_gradients(params, cfg, x, targets):
    """Mean-squared error and its exact parameter gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ParameterError("batch must be non-empty")
    targets = np.asarray(targets, dtype=np.float64)
    steps = None if x.ndim == 3 else (targets.shape[1] if targets.ndim == 3 else 1)
    if x.ndim == 2 and targets.ndim == 3:
        steps = max(steps, cfg.rollout_steps)
    out, cache = forward(params, cfg, x, steps=steps, return_cache=True)
    loss, gout = mse_loss_and_grad(out, targets)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    grads, _ = backward(params, cfg, cache, gout)
    return loss, grads
