"""Continuous stirred tank reactor: dynamics, integration and data generation.

States and inputs are deviation variables around the unstable operating
point: ``x = (C_A - C_As, T - T_s)`` and ``u = (C_A0 - C_A0s, Q - Q_s)``.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, GenerationError, NumericError, ParameterError

# Stability region: the ellipse x^T P x <= c.
P_REGION = np.array([[1060.0, 22.0], [22.0, 0.52]])
C_REGION = 372.0

DEFAULT_DELTA = 5e-3  # hr, sampling period
DEFAULT_HC = 1e-4  # hr, Euler step
DEFAULT_U_BOUNDS = ((-3.5, 3.5), (-5e5, 5e5))
DEFAULT_GUARD = (5.0, 200.0)

# The four closed-loop initial conditions used for evaluation.
DEFAULT_INITIAL_CONDITIONS = ((-1.5, 70.0), (1.5, -70.0), (-1.25, 50.0), (1.25, -50.0))


@dataclass(frozen=True)
class CstrParams:
    F: float = 5.0  # m^3/hr
    V: float = 1.0  # m^3
    C_A0s: float = 4.0  # kmol/m^3
    k0: float = 8.46e6  # m^3/kmol hr
    E: float = 5e4  # kJ/kmol
    R: float = 8.314  # kJ/kmol K
    T0: float = 300.0  # K
    dH: float = -1.15e4  # kJ/kmol
    rhoL: float = 1000.0  # kg/m^3
    Cp: float = 0.231  # kJ/kg K
    Qs: float = 0.0  # kJ/hr
    C_As: float = field(default=float("nan"))
    T_s: float = field(default=float("nan"))

    def __post_init__(self):
        for name in ("F", "V", "C_A0s", "k0", "E", "R", "T0", "rhoL", "Cp"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"CstrParams.{name} must be positive")
        if np.isnan(self.C_As) or np.isnan(self.T_s):
            ca, t = find_steady_state(self)
            object.__setattr__(self, "C_As", ca)
            object.__setattr__(self, "T_s", t)

    def to_dict(self):
        return asdict(self)


def _rates(p, ca, t, ca0, q):
    k = p.k0 * np.exp(-p.E / (p.R * t))
    r = k * ca * ca
    dca = p.F / p.V * (ca0 - ca) - r
    dt = p.F / p.V * (p.T0 - t) + (-p.dH) / (p.rhoL * p.Cp) * r + q / (p.rhoL * p.Cp * p.V)
    return dca, dt


def derivative(p, s, u):
    """Deviation-state rates ``(dx1/dt, dx2/dt)``; vectorized over leading axes."""
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    ca = p.C_As + s[..., 0]
    t = p.T_s + s[..., 1]
    if np.any(t <= 0):
        raise DomainError("absolute temperature must be positive")
    dca, dt = _rates(p, ca, t, p.C_A0s + u[..., 0], p.Qs + u[..., 1])
    return np.stack([dca, dt], axis=-1)


def jacobian(p, ca, t):
    """State Jacobian of the absolute-variable dynamics at ``(ca, t)``."""
    k = p.k0 * np.exp(-p.E / (p.R * t))
    dk = k * p.E / (p.R * t * t)
    c1 = -p.dH / (p.rhoL * p.Cp)
    fv = p.F / p.V
    return np.array([
        [-fv - 2.0 * k * ca, -dk * ca * ca],
        [2.0 * c1 * k * ca, -fv + c1 * dk * ca * ca],
    ])


def _temperature_on_balance(p, ca):
    # Energy balance with the mass balance substituted (u = 0).
    c1 = -p.dH / (p.rhoL * p.Cp)
    return p.T0 + c1 * (p.C_A0s - ca) + p.Qs / (p.rhoL * p.Cp * p.F)


def _reduced_residual(p, ca):
    t = _temperature_on_balance(p, ca)
    k = p.k0 * np.exp(-p.E / (p.R * t))
    return p.F / p.V * (p.C_A0s - ca) - k * ca * ca


def equilibria(p, grid=20000):
    """All equilibria with ``u = 0`` found by a scan over ``C_A`` plus Newton polish."""
    cas = np.linspace(p.C_A0s * 1e-6, p.C_A0s, grid)
    g = _reduced_residual(p, cas)
    roots = []
    for i in np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) <= 0)[0]:
        lo, hi = cas[i], cas[i + 1]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.sign(_reduced_residual(p, mid)) == np.sign(_reduced_residual(p, lo)):
                lo = mid
            else:
                hi = mid
        z = np.array([0.5 * (lo + hi), _temperature_on_balance(p, 0.5 * (lo + hi))])
        for _ in range(20):
            f = np.array(_rates(p, z[0], z[1], p.C_A0s, p.Qs))
            if np.max(np.abs(f)) < 1e-13:
                break
            z = z - np.linalg.solve(jacobian(p, z[0], z[1]), f)
        if not any(abs(z[0] - r[0]) < 1e-9 for r in roots):
            roots.append((float(z[0]), float(z[1])))
    return roots


def find_steady_state(p):
    """Return ``(C_As, T_s)``: the equilibrium with an unstable eigenvalue."""
    for ca, t in equilibria(p):
        if np.max(np.linalg.eigvals(jacobian(p, ca, t)).real) > 0:
            return ca, t
    raise ConfigError("no unstable equilibrium found for these CSTR parameters")


@dataclass
class Trajectory:
    times: np.ndarray  # (K + 1,) hr
    states: np.ndarray  # (K + 1, 2)
    inputs: np.ndarray  # (K, 2)


def _substeps(delta, h_c):
    ratio = delta / h_c
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"delta={delta} must be an integer multiple of h_c={h_c}")
    return k


def euler_period(p, x, u, delta=DEFAULT_DELTA, h_c=DEFAULT_HC):
    """Advance states ``x`` (shape ``(..., 2)``) over one sampling period with ``u`` held."""
    x = np.array(x, dtype=np.float64)
    for _ in range(_substeps(delta, h_c)):
        x = x + h_c * derivative(p, x, u)
    return x


def simulate_open_loop(p, x0, u_seq, delta=DEFAULT_DELTA, h_c=DEFAULT_HC, guard=DEFAULT_GUARD):
    """Explicit-Euler simulation with piecewise-constant inputs.

    ``u_seq`` has one row per sampling period; states are recorded at each
    sampling instant.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=np.float64))
    n_sub = _substeps(delta, h_c)
    x = np.asarray(x0, dtype=np.float64).copy()
    states = [x.copy()]
    for k, u in enumerate(u_seq):
        for j in range(n_sub):
            x = x + h_c * derivative(p, x, u)
            if not np.all(np.isfinite(x)) or abs(x[0]) > guard[0] or abs(x[1]) > guard[1]:
                raise NumericError(
                    f"state left guard box at t={(k * n_sub + j + 1) * h_c:.6g} hr", time=(k * n_sub + j + 1) * h_c
                )
        states.append(x.copy())
    times = np.arange(len(u_seq) + 1) * delta
    return Trajectory(times, np.array(states), u_seq.copy())


def simulate_batch(p, x0, u, periods, delta=DEFAULT_DELTA, h_c=DEFAULT_HC, guard=DEFAULT_GUARD):
    """Simulate many trajectories at once with a constant input each.

    Returns ``(states, ok)`` where ``states`` is ``(B, periods, 2)`` and
    ``ok`` flags trajectories that stayed inside the guard box.
    """
    n_sub = _substeps(delta, h_c)
    x = np.array(x0, dtype=np.float64)
    ok = np.ones(len(x), dtype=bool)
    out = np.empty((len(x), periods, 2))
    g = np.asarray(guard)
    for k in range(periods):
        for _ in range(n_sub):
            # frozen rows stay put once they have left the box
            step = derivative(p, np.where(ok[:, None], x, 0.0), u)
            x = np.where(ok[:, None], x + h_c * step, x)
            ok &= np.all(np.abs(x) <= g, axis=1) & np.all(np.isfinite(x), axis=1)
        out[:, k] = x
    return out, ok


def lyapunov_value(x, P=P_REGION):
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("...i,ij,...j->...", x, P, x)


def region_half_widths(P=P_REGION, c=C_REGION):
    det = P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0]
    return np.sqrt(c * P[1, 1] / det), np.sqrt(c * P[0, 0] / det)


def sample_stability_region(n, rng, P=P_REGION, c=C_REGION):
    """Uniform samples from the ellipse interior ``{x : xᵀPx <= c}`` by rejection."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    w1, w2 = region_half_widths(P, c)
    found = []
    total = 0
    while total < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (n - total) + 16, 2)) * np.array([w1, w2])
        cand = cand[lyapunov_value(cand, P) <= c]
        found.append(cand)
        total += len(cand)
    return np.concatenate(found)[:n]


FEATURES = ("x1", "x2", "Q", "CA0")


@dataclass
class Dataset:
    """Open-loop CSTR data.

    ``inputs`` rows are ``[x1, x2, Q, C_A0]`` (deviation states, absolute
    inputs); ``targets`` are ``(N, n, 2)`` deviation states at the next
    ``n`` sampling instants.
    """

    inputs: np.ndarray
    targets: np.ndarray
    scaler: object
    provenance: dict

    @property
    def rollout_steps(self):
        return self.targets.shape[1]


def generate_dataset(p, count=20000, u_bounds=DEFAULT_U_BOUNDS, delta=DEFAULT_DELTA, h_c=DEFAULT_HC,
                     rollout=1, rng=None, seed=0, guard=DEFAULT_GUARD, max_rounds=50):
    """Sample stability-region states and uniform inputs, simulate, and package.

    Trajectories that leave the guard box are discarded and resampled.
    """
    from .training import Scaler

    if count < 1 or rollout < 1:
        raise ParameterError("count and rollout must be >= 1")
    ub = np.asarray(u_bounds, dtype=np.float64)
    if not np.all(np.isfinite(ub)) or np.any(ub[:, 0] > ub[:, 1]):
        raise ParameterError(f"invalid input bounds {u_bounds}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(seed))
    xs, us, ys = [], [], []
    have = 0
    discarded = 0
    for _ in range(max_rounds):
        need = count - have
        if need <= 0:
            break
        x0 = sample_stability_region(need, rng)
        u = rng.uniform(ub[:, 0], ub[:, 1], size=(need, 2))
        traj, ok = simulate_batch(p, x0, u, rollout, delta, h_c, guard)
        discarded += int(np.sum(~ok))
        xs.append(x0[ok])
        us.append(u[ok])
        ys.append(traj[ok])
        have += int(np.sum(ok))
    if have < count:
        raise GenerationError(f"resample budget exhausted: {have}/{count} trajectories after {max_rounds} rounds")
    x0 = np.concatenate(xs)[:count]
    u = np.concatenate(us)[:count]
    targets = np.concatenate(ys)[:count]
    inputs = np.column_stack([x0, p.Qs + u[:, 1], p.C_A0s + u[:, 0]])
    scaler = Scaler.fit(inputs, targets)
    provenance = {
        "seed": seed,
        "count": count,
        "rollout": rollout,
        "delta": delta,
        "h_c": h_c,
        "u_bounds": ub.tolist(),
        "guard": list(guard),
        "discarded": discarded,
        "region": {"P": P_REGION.tolist(), "c": C_REGION},
        "params": p.to_dict(),
        "steady_state_derived": True,
    }
    return Dataset(inputs, targets, scaler, provenance)


def input_to_control(p, inputs):
    """Recover ``u = (dC_A0, dQ)`` from dataset input rows."""
    inputs = np.asarray(inputs)
    return np.stack([inputs[..., 3] - p.C_A0s, inputs[..., 2] - p.Qs], axis=-1)


def control_to_input(p, x, u):
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return np.concatenate([x, (p.Qs + u[..., 1])[..., None], (p.C_A0s + u[..., 0])[..., None]], axis=-1)


def dataset_header(n):
    cols = list(FEATURES)
    for k in range(1, n + 1):
        cols += [f"y{k}_x1", f"y{k}_x2"]
    return cols


def save_dataset(ds, path):
    """Write ``path`` (CSV) and ``path + '.meta.json'`` (seed, bounds, scaler, parameters)."""
    n = ds.rollout_steps
    flat = np.column_stack([ds.inputs, ds.targets.reshape(len(ds.targets), -1)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dataset_header(n))
        for row in flat:
            w.writerow([repr(float(v)) for v in row])
    meta = {"format": "iclrnn-cstr-dataset", "version": 1, "provenance": ds.provenance,
            "scaler": ds.scaler.to_dict()}
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(path):
    from .training import Scaler

    with open(str(path) + ".meta.json") as fh:
        meta = json.load(fh)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = np.array([[float(v) for v in row] for row in r])
    n = (len(header) - len(FEATURES)) // 2
    if header != dataset_header(n):
        raise ConfigError(f"unexpected dataset header in {path}")
    inputs = rows[:, : len(FEATURES)]
    targets = rows[:, len(FEATURES):].reshape(len(rows), n, 2)
    return Dataset(inputs, targets, Scaler.from_dict(meta["scaler"]), meta["provenance"])


def params_from_dict(d):
    fields = {k: v for k, v in d.items() if k not in ("C_As", "T_s")}
    return CstrParams(**fields)
