"""``iclrnn`` command-line entry point.

Every subcommand reads the same JSON config (see ``config.py``), writes
its artifacts under the output directory together with
``<subcommand>.config.json`` (the resolved config) and
``<subcommand>.manifest.json`` (outputs with SHA-256 checksums), and
prints its metric report as JSON on stdout. Reports contain no timings or
timestamps, so identical configs give byte-identical reports.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import config_from_dict, config_to_dict, dump_config, parse_config
from .errors import ConfigError, IclrnnError
from .numerics import RNG_ALGORITHM

log = logging.getLogger("iclrnn")

SUBCOMMANDS = ("gen-cstr", "train", "eval", "check", "flops", "noise-sweep", "mpc",
               "forecast-gen", "forecast-train", "forecast-eval")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


class Run:
    """Output directory bookkeeping for one subcommand invocation."""

    def __init__(self, subcommand, cfg, out):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = Path(out)
        self.outputs = []
        self.manifest_path = self.out / f"{subcommand}.manifest.json"

    def path(self, p):
        """Config paths are relative to the output directory unless absolute."""
        p = Path(p)
        return p if p.is_absolute() else self.out / p

    def artifact(self, name):
        p = self.out / name
        self.outputs.append(p)
        return p

    def start(self):
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / f"{self.subcommand}.config.json"
        dump_config(self.cfg, cfg_path)
        self.outputs.append(cfg_path)
        self.write_manifest("incomplete")

    def write_manifest(self, status, error=None):
        entries = []
        for p in self.outputs:
            if p.exists():
                entries.append({"path": p.name, "sha256": sha256(p), "bytes": p.stat().st_size})
        doc = {"subcommand": self.subcommand, "status": status, "version": __version__, "rng": RNG_ALGORITHM,
               "seed": self.cfg.seed, "outputs": entries}
        if error:
            doc["error"] = error
        write_json(self.manifest_path, doc)

    def report(self, data):
        path = self.artifact(f"{self.subcommand}_report.json")
        write_json(path, data)
        return data


def _net_config(cfg, input_dim, output_dim, rollout_steps=None):
    from .constraints import ProjectionConfig
    from .model import ConstraintMode, NetConfig

    n = cfg.net
    proj = ProjectionConfig(**config_to_dict(cfg)["net"]["projection"])
    return NetConfig(input_dim, output_dim, hidden_dims=tuple(n.hidden_dims),
                     rollout_steps=rollout_steps or n.rollout_steps, output_activation=n.output_activation,
                     constraint_mode=ConstraintMode(n.constraint_mode), projection=proj, seed=cfg.seed)


def _u_bounds(cfg):
    b = cfg.cstr.u_bounds
    if len(b) != 2 or any(len(r) != 2 for r in b):
        raise ConfigError("cstr.u_bounds must be [[lo, hi], [lo, hi]] for (dC_A0, dQ)")
    return tuple(tuple(float(v) for v in r) for r in b)


def _test_set(run):
    """Held-out CSTR samples: from a file if configured, else freshly generated with a derived seed."""
    from .cstr import CstrParams, generate_dataset, load_dataset
    from .numerics import sub_seed

    cfg = run.cfg
    if cfg.eval.test_dataset:
        return load_dataset(run.path(cfg.eval.test_dataset))
    return generate_dataset(CstrParams(), count=cfg.eval.test_count, u_bounds=_u_bounds(cfg),
                            delta=cfg.cstr.delta, h_c=cfg.cstr.h_c, rollout=cfg.cstr.rollout,
                            seed=sub_seed(cfg.seed, 1), guard=tuple(cfg.cstr.guard))


def cmd_gen_cstr(run):
    from .cstr import CstrParams, generate_dataset, save_dataset

    c = run.cfg.cstr
    p = CstrParams()
    ds = generate_dataset(p, count=c.count, u_bounds=_u_bounds(run.cfg), delta=c.delta, h_c=c.h_c,
                          rollout=c.rollout, seed=run.cfg.seed, guard=tuple(c.guard))
    path = run.path(c.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    run.outputs += [path, Path(str(path) + ".meta.json")]
    return {
        "samples": len(ds.inputs),
        "rollout": ds.rollout_steps,
        "discarded": ds.provenance["discarded"],
        "steady_state": {"C_As": p.C_As, "T_s": p.T_s},
        "target_mean": ds.scaler.y_mean.tolist(),
        "target_std": ds.scaler.y_std.tolist(),
        "dataset": path.name,
    }


def cmd_train(run):
    from .checkpoint import Checkpoint, save_checkpoint
    from .cstr import load_dataset
    from .training import AdamState, train

    cfg, t = run.cfg, run.cfg.train
    ds = load_dataset(run.path(t.dataset))
    net = _net_config(cfg, 4, 2, max(cfg.net.rollout_steps, ds.rollout_steps))
    x = ds.scaler.normalize_x(ds.inputs)
    y = ds.scaler.normalize_y(ds.targets)
    adam = AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon)
    started = time.monotonic()

    def progress(epoch, params, history):
        h = history[-1]
        log.info("epoch %d/%d train %.3e val %.3e (%.0fs)", epoch, t.epochs, h["train_mse"], h["val_mse"],
                 time.monotonic() - started)

    res = train(x, y, net, adam, epochs=t.epochs, batch_size=t.batch_size, val_fraction=t.val_fraction,
                seed=cfg.seed, callback=progress, lr_decay=t.lr_decay)
    ckpt_path = run.path(t.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, Checkpoint(res.params, net, ds.scaler, {"task": "cstr", "history": res.history}))
    run.outputs.append(ckpt_path)
    hist = run.artifact("train_history.csv")
    with open(hist, "w") as fh:
        fh.write("epoch,train_mse,val_mse,lr\n")
        for h in res.history:
            fh.write(f"{h['epoch']},{h['train_mse']!r},{h['val_mse']!r},{h['lr']!r}\n")
    if run.cfg.plot:
        from .plotting import plot_history

        plot_history(res.history, run.artifact("train_history.png"), f"{net.constraint_mode.value} CSTR model")
    return {
        "constraint_mode": net.constraint_mode.value,
        "hidden_dims": list(net.hidden_dims),
        "epochs": t.epochs,
        "final_train_mse": res.history[-1]["train_mse"],
        "final_val_mse": res.history[-1]["val_mse"],
        "best_val_mse": min(h["val_mse"] for h in res.history),
        "train_samples": int(len(res.train_index)),
        "val_samples": int(len(res.val_index)),
        "checkpoint": ckpt_path.name,
    }


def cmd_eval(run):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .model import forward
    from .training import evaluate_mse

    ck = load_checkpoint(run.path(run.cfg.eval.checkpoint))
    ds = _test_set(run)
    x = ck.scaler.normalize_x(ds.inputs)
    y = ck.scaler.normalize_y(ds.targets)
    out = forward(ck.params, ck.cfg, x, steps=max(ck.cfg.rollout_steps, ds.rollout_steps))[:, -ds.rollout_steps:]
    per_out = np.mean((out - y) ** 2, axis=(0, 1))
    raw = ck.scaler.denormalize_y(out)
    pred_path = run.artifact("eval_predictions.csv")
    with open(pred_path, "w") as fh:
        fh.write("x1,x2,Q,CA0,true_x1,true_x2,pred_x1,pred_x2\n")
        for xi, yi, pi in zip(ds.inputs, ds.targets[:, 0], raw[:, 0]):
            fh.write(",".join(repr(float(v)) for v in (*xi, *yi, *pi)) + "\n")
    return {
        "test_samples": len(ds.inputs),
        "test_mse_normalized": evaluate_mse(ck.params, ck.cfg, x, y),
        "test_mse_normalized_per_output": per_out.tolist(),
        "test_mse_raw_per_output": np.mean((raw - ds.targets) ** 2, axis=(0, 1)).tolist(),
        "constraint_mode": ck.cfg.constraint_mode.value,
    }


def cmd_check(run):
    import numpy as np

    from .analysis import check_convexity, check_monotone, lipschitz_report, network_function
    from .checkpoint import load_checkpoint
    from .model import init_params
    from .numerics import sub_rng

    cfg, c = run.cfg, run.cfg.check
    if c.checkpoint:
        ck = load_checkpoint(run.path(c.checkpoint))
        params, net, source = ck.params, ck.cfg, c.checkpoint
    else:
        net = _net_config(cfg, 4, 2)
        params, source = init_params(net, sub_rng(cfg.seed, 0)), "fresh"
    lo = -c.domain_halfwidth * np.ones(net.input_dim)
    f = network_function(params, net)
    conv = check_convexity(f, (lo, -lo), samples=c.samples, tol=c.tol, rng=sub_rng(cfg.seed, 3))
    lip = lipschitz_report(params, net, (lo, -lo), pairs=c.pairs, rng=sub_rng(cfg.seed, 4))
    mono = check_monotone(f, (lo, -lo), samples=c.pairs, rng=sub_rng(cfg.seed, 5))
    return {
        "model": source,
        "constraint_mode": net.constraint_mode.value,
        "convexity": conv.to_dict() | {"passed": conv.passed},
        "lipschitz": lip.to_dict() | {"within_bound": lip.empirical_L <= lip.theoretical_bound + 1e-9},
        "monotone_violations": mono,
        "domain_halfwidth": c.domain_halfwidth,
    }


def cmd_flops(run):
    from .analysis import count_flops
    from .model import ConstraintMode

    counts = {}
    for mode in ConstraintMode:
        run.cfg.net.constraint_mode = mode.value
        counts[mode.value] = count_flops(_net_config(run.cfg, 4, 2))
    return {"flops": counts, "all_equal": len(set(counts.values())) == 1,
            "hidden_dims": list(run.cfg.net.hidden_dims), "rollout_steps": run.cfg.net.rollout_steps}


def cmd_noise_sweep(run):
    from .analysis import network_function, noise_sweep
    from .checkpoint import load_checkpoint
    from .numerics import sub_seed

    n = run.cfg.noise
    ck = load_checkpoint(run.path(n.checkpoint))
    run.cfg.eval.test_count = n.test_count
    ds = _test_set(run)
    x = ck.scaler.normalize_x(ds.inputs)
    y = ck.scaler.normalize_y(ds.targets)
    f = network_function(ck.params, ck.cfg, max(ck.cfg.rollout_steps, ds.rollout_steps))
    res = noise_sweep(f, x, y, sigmas=tuple(n.sigmas), trials=n.trials, seed=sub_seed(run.cfg.seed, 2),
                      workers=run.cfg.threads)
    path = run.artifact("noise_sweep.csv")
    with open(path, "w") as fh:
        fh.write("sigma,mean_mse,std_mse\n")
        for s, m, sd in zip(res.sigmas, res.mean_mse, res.std_mse):
            fh.write(f"{s!r},{m!r},{sd!r}\n")
    if run.cfg.plot:
        from .plotting import plot_noise_sweep

        plot_noise_sweep(res, run.artifact("noise_sweep.png"), ck.cfg.constraint_mode.value)
    return res.to_dict() | {"degradation": res.degradation(), "constraint_mode": ck.cfg.constraint_mode.value}


def cmd_mpc(run):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .cstr import CstrParams
    from .mpc import LmpcProblem, NetworkPredictor, run_closed_loop, write_closed_loop_csv

    m = run.cfg.mpc
    ck = load_checkpoint(run.path(m.checkpoint))
    plant = CstrParams()
    prob = LmpcProblem(NetworkPredictor(ck.params, ck.cfg, ck.scaler, plant), N=m.N, delta=run.cfg.cstr.delta,
                       Qx=np.asarray(m.Qx, dtype=np.float64), Ru=np.asarray(m.Ru, dtype=np.float64),
                       u_bounds=_u_bounds(run.cfg), kappa=m.kappa, lyapunov_constraint=m.lyapunov_constraint,
                       max_periods=m.max_periods, starts=m.starts, max_iters=m.max_iters, seed=run.cfg.seed)
    runs, results = [], {}
    for i, x0 in enumerate(m.initial_conditions):
        started = time.monotonic()
        res = run_closed_loop(prob, plant, np.asarray(x0, dtype=np.float64), h_c=run.cfg.cstr.h_c)
        log.info("initial condition %s: converged=%s periods=%s (%.0fs)", x0, res.converged,
                 res.periods_to_converge, time.monotonic() - started)
        path = run.artifact(f"mpc_trajectory_{i}.csv")
        write_closed_loop_csv(path, res)
        runs.append({"x0": list(x0), "trajectory": path.name, **res.summary()})
        results[f"x0=({x0[0]:g}, {x0[1]:g})"] = res
    if run.cfg.plot:
        from .plotting import plot_closed_loop

        plot_closed_loop(results, run.artifact("mpc_trajectories.png"), prob.P, prob.c, prob.thresholds)
    return {"constraint_mode": ck.cfg.constraint_mode.value, "runs": runs,
            "all_converged": all(r["converged"] for r in runs)}


def cmd_forecast_gen(run):
    from .forecast import synth_generate

    f = run.cfg.forecast
    frame = synth_generate(f.days, seed=run.cfg.seed, start=f.start)
    path = run.path(f.data)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path)
    run.outputs.append(path)
    return {"rows": len(frame), "days": f.days, "clear_days": frame.meta["clear_days"], "data": path.name}


def _forecast_dataset(run, boundaries=None):
    from .forecast import load_csv, split_by_fraction, split_chronological, windowize

    f = run.cfg.forecast
    frame = load_csv(run.path(f.data))
    ds = windowize(frame, f.lookback, max_gap_minutes=f.max_gap_minutes)
    if boundaries:
        ds = split_chronological(ds, boundaries["train_end"], boundaries["val_end"])
    elif f.train_end or f.val_end:
        if not (f.train_end and f.val_end):
            raise ConfigError("forecast.train_end and forecast.val_end must be given together")
        ds = split_chronological(ds, f.train_end, f.val_end)
    else:
        ds = split_by_fraction(ds, f.train_fraction, f.val_fraction)
    return frame, ds


def cmd_forecast_train(run):
    from .checkpoint import Checkpoint, save_checkpoint
    from .forecast import forecast_net_config, leakage_scan, train_forecaster

    f = run.cfg.forecast
    frame, ds = _forecast_dataset(run)
    net = forecast_net_config(f.lookback, f.hidden_dims, f.constraint_mode, run.cfg.seed)
    res = train_forecaster(ds, net, epochs=f.epochs, batch_size=f.batch_size, lr=f.lr, lr_decay=f.lr_decay,
                           callback=lambda e, p, h: log.info("epoch %d train %.3e val %.3e", e,
                                                             h[-1]["train_mse"], h[-1]["val_mse"]))
    path = run.path(f.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, Checkpoint(res.params, net, ds.scaler, {"task": "forecast", "lookback": f.lookback,
                                                                  "boundaries": ds.boundaries}))
    run.outputs.append(path)
    if run.cfg.plot:
        from .plotting import plot_history

        plot_history(res.history, run.artifact("forecast_history.png"), "forecaster")
    return {
        "windows": len(ds),
        "dropped_rows": frame.dropped_rows,
        "split_sizes": {"train": len(ds.train_index), "val": len(ds.val_index), "test": len(ds.test_index)},
        "boundaries": ds.boundaries,
        "leakage": leakage_scan(ds),
        "final_train_mse": res.history[-1]["train_mse"],
        "final_val_mse": res.history[-1]["val_mse"],
        "checkpoint": path.name,
    }


def cmd_forecast_eval(run):
    from .checkpoint import load_checkpoint
    from .forecast import evaluate_forecast, forecast_predictor, leakage_scan, persistence_predictor

    f = run.cfg.forecast
    ck = load_checkpoint(run.path(f.checkpoint))
    if ck.extra.get("task") != "forecast":
        raise ConfigError(f"{f.checkpoint} is not a forecasting checkpoint")
    if ck.extra["lookback"] != f.lookback:
        raise ConfigError(f"checkpoint lookback {ck.extra['lookback']} != forecast.lookback {f.lookback}")
    _, ds = _forecast_dataset(run, ck.extra["boundaries"])
    ds.scaler = ck.scaler
    predict = forecast_predictor(ck.params, ck.cfg, ck.scaler)
    metrics = evaluate_forecast(predict, ds)
    idx = ds.test_index
    pred = predict(ds.windows[idx])
    pers = persistence_predictor(ds.windows[idx])
    path = run.artifact("forecast_predictions.csv")
    with open(path, "w") as fh:
        fh.write("timestamp,actual,predicted,persistence\n")
        for t, a, p, q in zip(ds.target_times[idx], ds.targets[idx, 0], pred, pers):
            fh.write(f"{t},{float(a)!r},{float(p)!r},{float(q)!r}\n")
    if run.cfg.plot:
        from .plotting import plot_forecast

        plot_forecast(ds.target_times[idx], ds.targets[idx, 0], pred, pers, run.artifact("forecast_test.png"))
    return metrics | {"leakage": leakage_scan(ds), "boundaries": ds.boundaries}


COMMANDS = {
    "gen-cstr": cmd_gen_cstr,
    "train": cmd_train,
    "eval": cmd_eval,
    "check": cmd_check,
    "flops": cmd_flops,
    "noise-sweep": cmd_noise_sweep,
    "mpc": cmd_mpc,
    "forecast-gen": cmd_forecast_gen,
    "forecast-train": cmd_forecast_train,
    "forecast-eval": cmd_forecast_eval,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="iclrnn", description="Input convex Lipschitz RNN workflows.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS, metavar="subcommand",
                    help="one of: " + ", ".join(SUBCOMMANDS))
    ap.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--threads", type=int, help="worker threads for parallel sweeps and BLAS")
    ap.add_argument("--plot", action="store_true", help="also render PNG figures next to the outputs")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def resolve_config(args):
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.plot:
        cfg.plot = True
    return cfg


def _limit_threads(n):
    # only effective before the BLAS library initializes its pool
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = None
    try:
        cfg = resolve_config(args)
        _limit_threads(cfg.threads)
        run = Run(args.subcommand, cfg, cfg.output_dir)
        run.start()
        report = run.report(COMMANDS[args.subcommand](run))
        run.write_manifest("complete")
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return EXIT_OK
    except KeyboardInterrupt:
        if run is not None:
            run.write_manifest("incomplete", "interrupted")
        print("iclrnn: interrupted; outputs marked incomplete", file=sys.stderr)
        return 130
    except IclrnnError as e:
        return _fail(run, e, e.exit_code if e.exit_code in (2, 3, 4) else EXIT_NUMERIC)
    except OSError as e:
        return _fail(run, e, EXIT_IO)


def _fail(run, err, code):
    msg = f"{type(err).__name__}: {err}"
    if run is not None and run.manifest_path.parent.exists():
        try:
            run.write_manifest("failed", msg)
        except OSError:
            pass
    print(f"iclrnn: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
