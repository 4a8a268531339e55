"""Model checkpoints.

A checkpoint is a numpy ``.npz`` archive holding:

``meta``
    UTF-8 JSON (as a ``uint8`` array): ``{"format": "iclrnn-checkpoint",
    "version": 1, "config": NetConfig dict, "extra": {...}}``.
``param/<name>``
    One float64 array per entry of ``CellParams.named()``
    (``Wx<l>``, ``Wh<l>``, ``bh<l>``, ``Wy``, ``by``).
``scaler/<field>``
    ``x_mean``, ``x_std``, ``y_mean``, ``y_std`` as float64 arrays.

Arrays are stored in binary, so save/load round trips are bit-exact.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import CellParams, NetConfig
from .training import Scaler

FORMAT = "iclrnn-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    params: CellParams
    cfg: NetConfig
    scaler: Scaler
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    meta = {"format": FORMAT, "version": VERSION, "config": ckpt.cfg.to_dict(), "extra": ckpt.extra}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in ckpt.params.named().items():
        arrays[f"param/{k}"] = np.asarray(v, dtype=np.float64)
    for k, v in ckpt.scaler.to_dict().items():
        arrays[f"scaler/{k}"] = np.asarray(getattr(ckpt.scaler, k), dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != FORMAT:
            raise ConfigError(f"{path} is not an iclrnn checkpoint")
        if meta.get("version") != VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        params = CellParams.from_named({k[6:]: z[k].copy() for k in z.files if k.startswith("param/")})
        scaler = Scaler(*(z[f"scaler/{k}"].copy() for k in ("x_mean", "x_std", "y_mean", "y_std")))
    cfg = NetConfig.from_dict(meta["config"])
    params.check_shapes(cfg)
    return Checkpoint(params, cfg, scaler, meta.get("extra", {}))
