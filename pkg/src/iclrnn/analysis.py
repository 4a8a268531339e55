"""Empirical checks of convexity, Lipschitz bounds, FLOPs and noise robustness.

Functions that probe a model take a plain callable ``f`` mapping a batch
``(B, D)`` of inputs to outputs of any trailing shape; use
:func:`network_function` to wrap trained parameters.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError
from .model import forward
from .numerics import sub_rng


def network_function(params, cfg, steps=None):
    def f(x):
        return forward(params, cfg, x, steps=steps)

    return f


def _flat(y):
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(len(y), -1)


def _box(domain):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in domain)
    if lo.shape != hi.shape or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(hi < lo):
        raise ParameterError("domain must be a finite box (lo, hi) with lo <= hi")
    return lo, hi


@dataclass
class ConvexityReport:
    triples_tested: int
    violations: int
    worst_gap: float  # max over all checks of f(mid) - chord; > 0 means a violation
    tolerance: float

    @property
    def passed(self):
        return self.violations == 0

    def to_dict(self):
        return asdict(self)


def check_convexity(f, domain, samples=10000, tol=1e-6, rng=None, batch=2000):
    """Test ``f(l x1 + (1 - l) x2) <= l f(x1) + (1 - l) f(x2)`` on random triples.

    Each output coordinate is checked separately against the tolerance
    ``tol * (1 + scale)`` where ``scale`` is the largest magnitude among the
    three values involved. A triple counts once if any coordinate fails.
    """
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    lo, hi = _box(domain)
    rng = np.random.Generator(np.random.PCG64(0)) if rng is None else rng
    violations = 0
    worst = -np.inf
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        x1 = rng.uniform(lo, hi, size=(b, lo.size))
        x2 = rng.uniform(lo, hi, size=(b, lo.size))
        lam = rng.uniform(0.0, 1.0, size=(b, 1))
        lam = np.clip(lam, 1e-12, 1.0 - 1e-12)
        f1, f2 = _flat(f(x1)), _flat(f(x2))
        fm = _flat(f(lam * x1 + (1.0 - lam) * x2))
        chord = lam * f1 + (1.0 - lam) * f2
        gap = fm - chord
        scale = np.maximum(np.maximum(np.abs(f1), np.abs(f2)), np.abs(fm))
        bad = np.any(gap > tol * (1.0 + scale), axis=1)
        violations += int(np.sum(bad))
        worst = max(worst, float(np.max(gap)))
        done += b
    return ConvexityReport(samples, violations, worst, tol)


def check_convexity_triple(f, x1, x2, lam):
    """Signed gap ``f(mid) - chord`` for one explicit triple (max over coordinates)."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    fm = _flat(f(lam * x1 + (1 - lam) * x2))
    return float(np.max(fm - (lam * _flat(f(x1)) + (1 - lam) * _flat(f(x2)))))


def check_monotone(f, domain, samples=2000, rng=None, tol=1e-9):
    """Count pairs with ``x1 >= x2`` elementwise but some ``f(x1) < f(x2) - tol``."""
    lo, hi = _box(domain)
    rng = np.random.Generator(np.random.PCG64(1)) if rng is None else rng
    x2 = rng.uniform(lo, hi, size=(samples, lo.size))
    x1 = np.minimum(x2 + rng.uniform(0.0, 1.0, size=x2.shape) * (hi - x2), hi)
    d = _flat(f(x1)) - _flat(f(x2))
    return int(np.sum(np.any(d < -tol * (1.0 + np.abs(_flat(f(x2)))), axis=1)))


@dataclass
class LipschitzReport:
    empirical_L: float
    theoretical_bound: float
    pairs_tested: int

    def to_dict(self):
        return asdict(self)


def spectral_norm(w):
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0 or not np.any(w):
        return 0.0
    return float(np.linalg.norm(w, 2))


def lipschitz_bound(params, cfg, steps=None):
    """Upper bound on the Lipschitz constant of the full output sequence.

    Unrolls the composition/sum rules: with ``a = ||Wx||``, ``b = ||Wh||``,
    ``K[l]_t <= a[l] K[l-1]_t + b[l] K[l]_{t-1}`` (``K[0]_t = 1``,
    ``K[l]_0 = 0``), ``K(y_t) <= ||Wy|| K[L]_t`` and the stacked sequence
    obeys ``sqrt(sum_t K(y_t)^2)``. Activations are 1-Lipschitz.
    """
    T = cfg.rollout_steps if steps is None else int(steps)
    a = [spectral_norm(layer.Wx) for layer in params.layers]
    b = [spectral_norm(layer.Wh) for layer in params.layers]
    c = spectral_norm(params.Wy)
    prev_t = [0.0] * len(params.layers)
    total = 0.0
    for _ in range(T):
        below = 1.0
        cur = []
        for l in range(len(params.layers)):
            k = a[l] * below + b[l] * prev_t[l]
            cur.append(k)
            below = k
        prev_t = cur
        total += (c * below) ** 2
    return float(np.sqrt(total))


def empirical_lipschitz(f, domain, pairs=2000, rng=None, local_fraction=0.5):
    """Largest observed ``||f(x1) - f(x2)|| / ||x1 - x2||`` over sampled pairs.

    Half of the pairs are close neighbours, which probes local slopes
    better than far-apart pairs. Coincident pairs are skipped.
    """
    if pairs < 1:
        raise ParameterError("pairs must be >= 1")
    lo, hi = _box(domain)
    rng = np.random.Generator(np.random.PCG64(2)) if rng is None else rng
    x1 = rng.uniform(lo, hi, size=(pairs, lo.size))
    x2 = rng.uniform(lo, hi, size=(pairs, lo.size))
    n_local = int(pairs * local_fraction)
    step = rng.standard_normal((n_local, lo.size)) * 1e-3 * np.maximum(hi - lo, 1e-12)
    x2[:n_local] = np.clip(x1[:n_local] + step, lo, hi)
    dx = np.linalg.norm(x1 - x2, axis=1)
    keep = dx > 0
    if not np.any(keep):
        return 0.0
    dy = np.linalg.norm(_flat(f(x1[keep])) - _flat(f(x2[keep])), axis=1)
    return float(np.max(dy / dx[keep]))


def lipschitz_report(params, cfg, domain, pairs=2000, rng=None, steps=None):
    f = network_function(params, cfg, steps)
    return LipschitzReport(empirical_lipschitz(f, domain, pairs, rng), lipschitz_bound(params, cfg, steps), pairs)


def count_flops(cfg, steps=None):
    """Forward-pass FLOPs.

    Convention: a dense ``m x n`` product costs ``2 m n``; each vector add,
    bias add and ReLU costs one FLOP per element; the linear output costs
    nothing and softmax costs ``3 O`` (exp, sum, divide). Everything is
    counted per unrolled step. Weight projections are training-time only
    and cost nothing at inference, so every constraint mode has the same
    count.
    """
    T = cfg.rollout_steps if steps is None else int(steps)
    per_step = 0
    prev = cfg.input_dim
    for h in cfg.hidden_dims:
        per_step += 2 * h * prev + 2 * h * h + h + h + h
        prev = h
    per_step += 2 * cfg.output_dim * prev + cfg.output_dim
    if cfg.output_activation == "softmax":
        per_step += 3 * cfg.output_dim
    return per_step * T


@dataclass
class NoiseSweepResult:
    sigmas: list
    mean_mse: list
    std_mse: list
    trials: int
    seed: int

    def degradation(self):
        return self.mean_mse[-1] - self.mean_mse[0]

    def to_dict(self):
        return asdict(self)


def noise_sweep(f, x_test, y_test, sigmas=(0.0, 0.01, 0.02, 0.05, 0.1, 0.2), trials=5, seed=0, workers=1):
    """Test MSE under additive Gaussian input noise.

    For every ``(sigma, trial)`` pair the noise comes from its own sub-seed
    ``(seed, sigma_index, trial)``, so results do not depend on ``workers``.
    Inputs and targets are expected in normalized units.
    """
    x_test = np.asarray(x_test, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.float64)
    if len(x_test) == 0:
        raise ParameterError("empty test set")
    if trials < 1:
        raise ParameterError("trials must be >= 1")

    def mse(x):
        out = np.asarray(f(x))
        t = y_test if y_test.ndim == out.ndim else y_test[:, None, :]
        d = out[:, -t.shape[1]:] - t if out.ndim == 3 else out - t
        return float(np.mean(d * d))

    clean = mse(x_test)

    def run(job):
        i, j = job
        if sigmas[i] == 0.0:
            return clean
        noise = sub_rng(seed, i, j).standard_normal(x_test.shape) * sigmas[i]
        return mse(x_test + noise)

    jobs = [(i, j) for i in range(len(sigmas)) for j in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            values = list(ex.map(run, jobs))
    else:
        values = [run(job) for job in jobs]
    grid = np.array(values).reshape(len(sigmas), trials)
    return NoiseSweepResult([float(s) for s in sigmas], grid.mean(axis=1).tolist(), grid.std(axis=1).tolist(),
                            int(trials), int(seed))
