"""Lyapunov-based MPC on a learned one-step predictor.

The controller picks ``N`` piecewise-constant inputs minimizing
``sum_t x_tᵀ Qx x_t + u_tᵀ Ru u_t`` over predicted states, subject to the
input box and ``V(x_t) <= (1 - kappa) V(x_k)`` at every horizon step,
``V(x) = xᵀPx``. The contraction constraint enters as a quadratic
penalty whose weight grows geometrically; the box is handled exactly by
projection. If no start satisfies the contraction the controller falls
back to the input minimizing ``V`` one step ahead.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .cstr import C_REGION, DEFAULT_DELTA, DEFAULT_HC, DEFAULT_U_BOUNDS, P_REGION, euler_period
from .errors import DimensionError, NumericError, RegionError, SolverError
from .model import backward, forward
from .numerics import sub_rng

log = logging.getLogger(__name__)


def lyapunov(P, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise DimensionError("state must be 2-dimensional")
    return np.einsum("...i,ij,...j->...", x, np.asarray(P, dtype=np.float64), x)


class NetworkPredictor:
    """One sampling period ahead through a trained network.

    The network input row is ``[x1, x2, Q, C_A0]`` with absolute inputs
    ``Q = Q_s + dQ`` and ``C_A0 = C_A0s + dC_A0``; the first rollout output
    is the predicted deviation state after one period.
    """

    def __init__(self, params, cfg, scaler, plant):
        if cfg.input_dim != 4 or cfg.output_dim != 2 or len(scaler.x_mean) != 4 or len(scaler.y_mean) != 2:
            raise DimensionError("model/scaler must map [x1, x2, Q, CA0] to [x1, x2]")
        self.params, self.cfg, self.scaler, self.plant = params, cfg, scaler, plant

    def _inputs(self, x, u):
        return np.column_stack([x, self.plant.Qs + u[:, 1], self.plant.C_A0s + u[:, 0]])

    def step(self, x, u):
        z = self.scaler.normalize_x(self._inputs(x, u))
        out, cache = forward(self.params, self.cfg, z, steps=1, return_cache=True)
        return self.scaler.denormalize_y(out[:, 0]), cache

    def step_vjp(self, cache, g_next):
        g_out = (g_next * self.scaler.y_std)[:, None, :]
        _, g_z = backward(self.params, self.cfg, cache, g_out)
        g_in = g_z / self.scaler.x_std
        return g_in[:, :2], np.column_stack([g_in[:, 3], g_in[:, 2]])


class LinearPredictor:
    """``x+ = A x + B u``; used as an analytic surrogate in tests."""

    def __init__(self, A, B, c=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.c = np.zeros(len(self.A)) if c is None else np.asarray(c, dtype=np.float64)

    def step(self, x, u):
        return x @ self.A.T + u @ self.B.T + self.c, None

    def step_vjp(self, cache, g_next):
        return g_next @ self.A, g_next @ self.B


def predict_trajectory(predictor, x_k, u_seq):
    """Predicted states ``(N, 2)`` after each of the ``N`` periods of ``u_seq``."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=np.float64))
    x = np.asarray(x_k, dtype=np.float64)[None, :]
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite initial state")
    out = []
    for u in u_seq:
        x, _ = predictor.step(x, u[None, :])
        out.append(x[0])
    return np.array(out)


@dataclass
class LmpcProblem:
    predictor: object
    N: int = 2
    delta: float = DEFAULT_DELTA
    Qx: np.ndarray = field(default_factory=lambda: P_REGION.copy())
    Ru: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1e-11]))
    u_bounds: tuple = DEFAULT_U_BOUNDS
    P: np.ndarray = field(default_factory=lambda: P_REGION.copy())
    c: float = C_REGION
    kappa: float = 0.01
    lyapunov_constraint: bool = True
    thresholds: tuple = (0.1, 3.0)
    max_periods: int = 100
    starts: int = 4
    max_iters: int = 150
    penalty_rounds: int = 3
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise DimensionError("horizon N must be >= 1")
        P = np.asarray(self.P, dtype=np.float64)
        if not np.allclose(P, P.T) or np.min(np.linalg.eigvalsh(P)) <= 0:
            raise DimensionError("P must be symmetric positive definite")
        for name in ("Qx", "Ru"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) < -1e-12:
                raise DimensionError(f"{name} must be positive semidefinite")


@dataclass
class ControlSolution:
    u_seq: np.ndarray  # (N, 2)
    objective: float
    feasible: bool
    iterations: int
    fallback_used: bool
    predicted: np.ndarray = None  # (N, 2)


class _Objective:
    """Scaled objective over ``w = u / u_scale`` for a batch of starts."""

    def __init__(self, prob, x_k, mode):
        self.prob = prob
        self.x_k = np.asarray(x_k, dtype=np.float64)
        ub = np.asarray(prob.u_bounds, dtype=np.float64)
        self.scale = np.maximum(np.abs(ub).max(axis=1), 1e-12)
        self.lo = ub[:, 0] / self.scale
        self.hi = ub[:, 1] / self.scale
        self.mode = mode
        self.v_k = float(lyapunov(prob.P, self.x_k))
        self.level = (1.0 - prob.kappa) * self.v_k
        self.j_ref = max(float(self.x_k @ prob.Qx @ self.x_k), 1.0)
        self.v_ref = max(self.v_k, 1e-6)
        self.mu = 0.0

    def project(self, w):
        return np.clip(w, self.lo, self.hi)

    def rollout(self, w):
        S = len(w)
        u = w * self.scale
        x = np.repeat(self.x_k[None, :], S, axis=0)
        xs, caches = [], []
        for t in range(self.prob.N):
            x, cache = self.prob.predictor.step(x, u[:, t])
            xs.append(x)
            caches.append(cache)
        return u, np.stack(xs, axis=1), caches

    def _terms(self, u, xs):
        p = self.prob
        if self.mode == "fallback":
            return lyapunov(p.P, xs[:, 0]) / self.v_ref, None
        j = np.einsum("sti,ij,stj->s", xs, p.Qx, xs) + np.einsum("sti,ij,stj->s", u, p.Ru, u)
        viol = np.maximum(lyapunov(p.P, xs) - self.level, 0.0) / self.v_ref
        return j / self.j_ref + self.mu * np.sum(viol * viol, axis=1), j

    def value(self, w):
        u, xs, _ = self.rollout(w)
        f, _ = self._terms(u, xs)
        return f

    def value_and_grad(self, w):
        p = self.prob
        u, xs, caches = self.rollout(w)
        f, _ = self._terms(u, xs)
        S, N = len(w), p.N
        g_x = np.zeros((S, N, 2))
        g_u = np.zeros((S, N, 2))
        Ps = p.P + p.P.T
        if self.mode == "fallback":
            g_x[:, 0] = xs[:, 0] @ Ps / self.v_ref
        else:
            g_x += xs @ (p.Qx + p.Qx.T) / self.j_ref
            g_u += u @ (p.Ru + p.Ru.T) / self.j_ref
            viol = np.maximum(lyapunov(p.P, xs) - self.level, 0.0) / self.v_ref
            g_x += (2.0 * self.mu * viol / self.v_ref)[..., None] * (xs @ Ps)
        carry = np.zeros((S, 2))
        for t in range(N - 1, -1, -1):
            gx_prev, gu = p.predictor.step_vjp(caches[t], g_x[:, t] + carry)
            g_u[:, t] += gu
            carry = gx_prev
        return f, g_u * self.scale


def _projected_gradient(obj, w, max_iters, tol):
    """Batched projected gradient with Armijo backtracking along the projection arc."""
    S = len(w)
    alpha = np.ones(S)
    active = np.ones(S, dtype=bool)
    iters = 0
    for _ in range(max_iters):
        if not np.any(active):
            break
        iters += 1
        f, g = obj.value_and_grad(w)
        if not np.all(np.isfinite(f)):
            bad = ~np.isfinite(f)
            active &= ~bad
            if not np.any(active):
                break
        accepted = ~active
        new_w = w.copy()
        step_taken = np.zeros(S)
        a = np.minimum(alpha * 2.0, 1e6)
        for _ in range(60):
            cand = obj.project(w - a[:, None, None] * g)
            fc = obj.value(cand)
            d = cand - w
            dd = np.sum(d * d, axis=(1, 2))
            ok = (~accepted) & np.isfinite(fc) & (fc <= f - 1e-4 * dd / a)
            new_w[ok] = cand[ok]
            step_taken[ok] = np.sqrt(dd[ok])
            alpha[ok] = a[ok]
            accepted |= ok
            if np.all(accepted):
                break
            a = np.where(accepted, a, a * 0.5)
        stalled = active & ~accepted
        w = new_w
        active &= accepted & (step_taken > tol)
        active &= ~stalled
    return w, iters


def solve_lmpc(prob, x_k):
    """Solve the Lyapunov-constrained MPC problem at state ``x_k``."""
    x_k = np.asarray(x_k, dtype=np.float64)
    v_k = float(lyapunov(prob.P, x_k))
    if v_k > prob.c:
        raise RegionError(f"V(x_k) = {v_k:.6g} exceeds the stability level {prob.c}")
    obj = _Objective(prob, x_k, "cost")
    rng = sub_rng(prob.seed, *np.frombuffer(x_k.tobytes(), dtype=np.uint32))
    w = np.zeros((prob.starts, prob.N, 2))
    if prob.starts > 1:
        w[1:] = rng.uniform(obj.lo, obj.hi, size=(prob.starts - 1, prob.N, 2))
    iters = 0
    rounds = prob.penalty_rounds if prob.lyapunov_constraint else 1
    for r in range(rounds):
        obj.mu = prob.penalty_init * prob.penalty_growth**r if prob.lyapunov_constraint else 0.0
        w, it = _projected_gradient(obj, w, prob.max_iters, prob.tol)
        iters += it
    u, xs, _ = obj.rollout(w)
    if not np.all(np.isfinite(xs)):
        finite = np.all(np.isfinite(xs), axis=(1, 2))
        if not np.any(finite):
            raise SolverError("all starts diverged")
    else:
        finite = np.ones(len(w), dtype=bool)
    _, j = obj._terms(u, xs)
    if prob.lyapunov_constraint:
        v = lyapunov(prob.P, xs)
        slack = 1e-9 * (1.0 + v_k)
        feasible = finite & np.all(v <= obj.level + slack, axis=1)
        if v_k > 0:
            feasible &= np.all(v < v_k, axis=1)
    else:
        feasible = finite
    if np.any(feasible):
        j_masked = np.where(feasible, j, np.inf)
        best = int(np.argmin(j_masked))
        return ControlSolution(u[best], float(j[best]), True, iters, False, xs[best])
    fb = _Objective(prob, x_k, "fallback")
    wf, it = _projected_gradient(fb, w.copy(), prob.max_iters, prob.tol)
    iters += it
    uf, xf, _ = fb.rollout(wf)
    vf = np.where(np.all(np.isfinite(xf), axis=(1, 2)), lyapunov(prob.P, xf[:, 0]), np.inf)
    if not np.any(np.isfinite(vf)):
        raise SolverError("all starts diverged")
    best = int(np.argmin(vf))
    _, jf = obj._terms(uf, xf)
    return ControlSolution(uf[best], float(jf[best]), False, iters, True, xf[best])


@dataclass
class ClosedLoopResult:
    times: np.ndarray  # (K + 1,)
    states: np.ndarray  # (K + 1, 2)
    inputs: np.ndarray  # (K, 2)
    feasible: list
    V: np.ndarray  # (K + 1,)
    converged: bool
    periods_to_converge: int = None
    aborted: str = None  # reason the loop stopped early, if it did

    def summary(self):
        return {
            "converged": self.converged,
            "aborted": self.aborted,
            "periods_to_converge": self.periods_to_converge,
            "periods_run": len(self.inputs),
            "final_state": self.states[-1].tolist(),
            "final_V": float(self.V[-1]),
            "fallback_periods": int(sum(1 for f in self.feasible if not f)),
        }


def is_converged(x, thresholds=(0.1, 3.0)):
    return abs(x[0]) < thresholds[0] and abs(x[1]) < thresholds[1]


def run_closed_loop(prob, plant, x0, h_c=DEFAULT_HC, callback=None):
    """Receding-horizon control of the true plant from ``x0``.

    At each sampling instant the first optimal input is applied to the
    plant for one period with explicit Euler. Stops at the first instant
    where both convergence thresholds hold, or after ``max_periods``. If
    the plant leaves the stability region the loop stops there and the
    partial trace is returned with ``aborted`` set.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if float(lyapunov(prob.P, x)) > prob.c:
        raise RegionError("initial state outside the stability region")
    states, inputs, feas = [x.copy()], [], []
    converged_at = 0 if is_converged(x, prob.thresholds) else None
    k = 0
    aborted = None
    while converged_at is None and k < prob.max_periods:
        v = float(lyapunov(prob.P, x))
        if v > prob.c:
            aborted = f"left the stability region at period {k} (V = {v:.6g} > {prob.c})"
            log.warning("closed loop %s", aborted)
            break
        sol = solve_lmpc(prob, x)
        u = sol.u_seq[0]
        x = euler_period(plant, x, u, prob.delta, h_c)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"plant diverged at period {k + 1}", step=k + 1)
        k += 1
        states.append(x.copy())
        inputs.append(u.copy())
        feas.append(bool(sol.feasible))
        if callback is not None:
            callback(k, x, sol)
        if is_converged(x, prob.thresholds):
            converged_at = k
    states = np.array(states)
    return ClosedLoopResult(
        np.arange(len(states)) * prob.delta,
        states,
        np.array(inputs).reshape(-1, 2),
        feas,
        lyapunov(prob.P, states),
        converged_at is not None,
        converged_at,
        aborted,
    )


CLOSED_LOOP_COLUMNS = ("time", "x1", "x2", "u1", "u2", "V", "feasible")


def write_closed_loop_csv(path, result):
    """One row per sampling instant; the final instant has empty input fields."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLOSED_LOOP_COLUMNS)
        for i, (t, x, v) in enumerate(zip(result.times, result.states, result.V)):
            if i < len(result.inputs):
                u = [repr(float(result.inputs[i][0])), repr(float(result.inputs[i][1]))]
                f = str(int(result.feasible[i]))
            else:
                u, f = ["", ""], ""
            w.writerow([repr(float(t)), repr(float(x[0])), repr(float(x[1])), *u, repr(float(v)), f])
