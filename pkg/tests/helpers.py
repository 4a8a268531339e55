import numpy as np

from iclrnn.model import CellParams, LayerParams, NetConfig, bptt_gradients


def tiny_params(wx=((1.0,),), wh=((0.5,),), bh=(0.0,), wy=((1.0,),), by=(0.0,)):
    f = lambda a: np.array(a, dtype=np.float64)  # noqa: E731
    return CellParams([LayerParams(f(wx), f(wh), f(bh))], f(wy), f(by))


def fd_gradients(params, cfg, x, y, eps=1e-6):
    """Central finite differences of the training loss w.r.t. every parameter."""
    out = {}
    for name, arr in params.named().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            lp, _ = bptt_gradients(params, cfg, x, y)
            arr[idx] = keep - eps
            lm, _ = bptt_gradients(params, cfg, x, y)
            arr[idx] = keep
            g[idx] = (lp - lm) / (2 * eps)
        out[name] = g
    return out


def rel_error(a, b):
    num = max(np.max(np.abs(a[k] - b[k])) for k in a)
    den = max(max(np.max(np.abs(a[k])) for k in a), 1e-12)
    return num / den


def small_cfg(mode="plain", hidden=(3,), steps=3, d=2, o=2, out="linear", seed=0):
    return NetConfig(d, o, hidden_dims=hidden, rollout_steps=steps, constraint_mode=mode,
                     output_activation=out, seed=seed)
