"""Feature scaling, Adam, and projected-gradient training."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .model import CellParams, bptt_gradients, forward, init_params, project_params

log = logging.getLogger(__name__)


@dataclass
class Scaler:
    """Per-feature standardization for inputs and targets."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def __post_init__(self):
        for name in ("x_std", "y_std"):
            s = getattr(self, name)
            if np.any(~(s > 0)):
                raise ParameterError(f"scaler {name} must be > 0 for every feature (constant feature?)")

    @classmethod
    def fit(cls, inputs, targets):
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        xa = tuple(range(inputs.ndim - 1))
        ya = tuple(range(targets.ndim - 1))
        return cls(inputs.mean(axis=xa), inputs.std(axis=xa), targets.mean(axis=ya), targets.std(axis=ya))

    @classmethod
    def identity(cls, input_dim, output_dim):
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim), np.ones(output_dim))

    def normalize_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def denormalize_x(self, x):
        return np.asarray(x) * self.x_std + self.x_mean

    def normalize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("x_mean", "x_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("x_mean", "x_std", "y_mean", "y_std")))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are ``{name: array}`` dicts. Returns the new
    parameter dict and a new :class:`AdamState`; inputs are not mutated.
    """
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        mk = state.beta1 * state.m.get(k, 0.0) + (1.0 - state.beta1) * g
        vk = state.beta2 * state.v.get(k, 0.0) + (1.0 - state.beta2) * g * g
        mhat = mk / (1.0 - state.beta1**t)
        vhat = vk / (1.0 - state.beta2**t)
        new_params[k] = p - state.lr * mhat / (np.sqrt(vhat) + state.epsilon)
        m[k] = mk
        v[k] = vk
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, m, v)


@dataclass
class TrainResult:
    params: CellParams
    history: list  # one {"epoch", "train_mse", "val_mse"} dict per epoch
    train_index: np.ndarray
    val_index: np.ndarray


def split_indices(n, val_fraction, seed):
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_mse(params, cfg, x, y, batch=4096):
    """Mean-squared error over a (possibly large) normalized set."""
    y = np.asarray(y)
    total = 0.0
    count = 0
    steps = y.shape[1] if (y.ndim == 3 and np.ndim(x) == 2) else None
    if steps is not None:
        steps = max(steps, cfg.rollout_steps)
    for i in range(0, len(x), batch):
        out = forward(params, cfg, x[i:i + batch], steps=steps)
        t = y[i:i + batch]
        if t.ndim == 2:
            t = t[:, None, :]
        d = out[:, -t.shape[1]:] - t
        total += float(np.sum(d * d))
        count += d.size
    return total / count


def train(inputs, targets, cfg, adam=None, epochs=50, batch_size=64, val_fraction=0.2, seed=None,
          params=None, callback=None, lr_decay=1.0, validation=None):
    """Projected-gradient Adam training on normalized data.

    After every optimizer step each weight is re-projected according to
    ``cfg.constraint_mode``, so every iterate is feasible. The history holds
    full-split train and validation MSE after each epoch. The learning rate
    is multiplied by ``lr_decay`` after every epoch.

    ``validation=(x_val, y_val)`` replaces the random hold-out: every row
    of ``inputs`` is then used for training.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) != len(targets) or len(inputs) == 0:
        raise DimensionError("inputs and targets must be non-empty with equal counts")
    seed = cfg.seed if seed is None else seed
    adam = AdamState() if adam is None else adam
    if validation is not None:
        tr, va = np.arange(len(inputs)), None
        x_val, y_val = (np.asarray(a, dtype=np.float64) for a in validation)
    else:
        tr, va = split_indices(len(inputs), val_fraction, seed)
        if len(va) == 0:
            va = tr
        x_val, y_val = inputs[va], targets[va]
    if params is None:
        params = init_params(cfg, np.random.Generator(np.random.PCG64(seed + 1)))
    order_rng = np.random.Generator(np.random.PCG64(seed + 2))
    history = []
    state = AdamState(adam.lr, adam.beta1, adam.beta2, adam.epsilon)
    for epoch in range(1, epochs + 1):
        order = tr[order_rng.permutation(len(tr))]
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            try:
                loss, grads = bptt_gradients(params, cfg, inputs[idx], targets[idx])
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}: {e}", epoch=epoch, step=e.step) from e
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}", epoch=epoch)
            new, state = adam_step(params.named(), grads, state)
            params = project_params(CellParams.from_named(new), cfg)
        train_mse = evaluate_mse(params, cfg, inputs[tr], targets[tr])
        val_mse = evaluate_mse(params, cfg, x_val, y_val)
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise NumericError(f"training diverged at epoch {epoch}", epoch=epoch)
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "lr": state.lr})
        state.lr *= lr_decay
        log.info("epoch %d train_mse=%.3e val_mse=%.3e", epoch, train_mse, val_mse)
        if callback is not None:
            callback(epoch, params, history)
    return TrainResult(params, history, tr, va)


def predict(params, cfg, scaler, raw_input, steps=None):
    """Normalize, roll out, denormalize."""
    raw_input = np.asarray(raw_input, dtype=np.float64)
    if raw_input.shape[-1] != len(scaler.x_mean):
        raise DimensionError(f"input width {raw_input.shape[-1]} != scaler width {len(scaler.x_mean)}")
    out = forward(params, cfg, scaler.normalize_x(raw_input), steps=steps)
    return scaler.denormalize_y(out)
