"""Checkpoint archive: one zip holding structured-text config plus raw tensor blobs.

Layout::

    config.json      NetConfig, training config, counters, RNG states
    manifest.json    [{"name", "shape", "dtype": "<f4", "file"}, ...]
    blobs/<n>.bin    little-endian float32, C order

Optimizer param-group settings go into ``config.json``; their per-parameter
moment tensors are blobs like any other.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import NetConfig


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    net: NetConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix/`` as a state dict."""
        p = prefix + "/"
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith(p)}


def state_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    blobs = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            blobs[f"{prefix}/state/{idx}/{k}"] = (v.detach().cpu().numpy() if torch.is_tensor(v)
                                                  else np.asarray(v, dtype=np.float32))
    return blobs, {"param_groups": sd["param_groups"]}


def optimizer_state(prefix: str, ckpt: Checkpoint, groups: dict) -> dict:
    state: dict = {}
    p = prefix + "/state/"
    for k, v in ckpt.tensors.items():
        if k.startswith(p):
            idx, name = k[len(p):].split("/", 1)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(v.copy())
    return {"state": state, "param_groups": groups["param_groups"]}


def save_checkpoint(path: str | Path, net: NetConfig, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep archives byte-identical across runs
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        for i, (name, arr) in enumerate(sorted(tensors.items())):
            a = np.asarray(arr, dtype="<f4")  # keeps 0-d shapes, unlike ascontiguousarray
            fname = f"blobs/{i:05d}.bin"
            put(fname, a.tobytes(order="C"))
            manifest.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "file": fname})
        put("manifest.json", json.dumps(manifest, indent=1))
        put("config.json", json.dumps({"net": asdict(net), "meta": meta or {}}, indent=1,
                                      sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> Checkpoint:
    """Read an archive; with ``expect`` given, the stored NetConfig must match it."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            cfg = json.loads(zf.read("config.json"))
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing {exc.args[0]}") from exc
        net = NetConfig(**cfg["net"])
        if expect is not None and expect != net:
            diffs = [f"{k}: checkpoint={v!r} expected={getattr(expect, k)!r}"
                     for k, v in asdict(net).items() if getattr(expect, k) != v]
            raise CheckpointError("NetConfig mismatch: " + "; ".join(diffs))
        tensors = {}
        for entry in manifest:
            raw = zf.read(entry["file"])
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: blob for {entry['name']} has {len(raw)} bytes, "
                                      f"expected {4 * n}")
            tensors[entry["name"]] = np.frombuffer(io.BytesIO(raw).getbuffer(),
                                                   dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(net, tensors, cfg.get("meta", {}))
