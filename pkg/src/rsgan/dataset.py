"""On-disk sample container.

A dataset is a directory with one sub-directory per sample. Each sample
directory holds ``header.json`` and one raw block per array::

    <sample>/header.json   {"kind": ..., "meta": {...},
                            "arrays": [{"name", "shape", "dtype": "<f4", "file"}]}
    <sample>/<name>.f32    2D float32 little-endian, C order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .phantom import DrrSample, PseudoCxrSample

KINDS = {"drr": DrrSample, "cxr": PseudoCxrSample}


class DatasetError(RuntimeError):
    pass


def _kind_of(sample) -> str:
    for k, cls in KINDS.items():
        if isinstance(sample, cls):
            return k
    return "arrays"


def sample_arrays(sample) -> dict[str, np.ndarray]:
    if isinstance(sample, dict):
        return {k: v for k, v in sample.items() if k != "meta"}
    return {name: getattr(sample, name) for name in sample.ARRAYS}


def write_sample(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                 kind: str = "arrays") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        if a.ndim != 2:
            raise DatasetError(f"array {name!r} must be 2D, got shape {a.shape}")
        fname = f"{name}.f32"
        (directory / fname).write_bytes(a.tobytes())
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "file": fname})
    header = {"kind": kind, "meta": meta or {}, "arrays": entries}
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True))


def read_sample(directory: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    directory = Path(directory)
    hpath = directory / "header.json"
    try:
        header = json.loads(hpath.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{hpath}: missing header") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{hpath}: corrupt header ({exc})") from exc
    arrays = {}
    for entry in header.get("arrays", []):
        f = directory / entry["file"]
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "<f4":
            raise DatasetError(f"{f}: unsupported dtype {entry.get('dtype')!r}")
        try:
            raw = f.read_bytes()
        except FileNotFoundError as exc:
            raise DatasetError(f"{f}: missing array {entry['name']!r}") from exc
        expected = 4 * int(np.prod(shape))
        if len(raw) != expected:
            raise DatasetError(f"{f}: array {entry['name']!r} has {len(raw)} bytes, "
                               f"expected {expected} for shape {shape}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return header.get("kind", "arrays"), arrays, header.get("meta", {})


def sample_name(index: int, sample=None) -> str:
    meta = getattr(sample, "meta", None) or {}
    if "phantom_seed" in meta:
        return f"s{index:05d}_p{meta['phantom_seed']}"
    return f"s{index:05d}"


def save_dataset(samples, path: str | Path, names: list[str] | None = None) -> list[str]:
    """Write samples under ``path``; returns the sample directory names."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = names or [sample_name(i, s) for i, s in enumerate(samples)]
    if len(set(names)) != len(names):
        raise DatasetError("sample names must be unique")
    for name, s in zip(names, samples):
        meta = s.get("meta", {}) if isinstance(s, dict) else s.meta
        write_sample(path / name, sample_arrays(s), meta, _kind_of(s))
    return names


def list_samples(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"{path}: not a dataset directory")
    return sorted(p.name for p in path.iterdir() if (p / "header.json").exists())


def load_dataset(path: str | Path, with_names: bool = False):
    """Load every sample under ``path`` (sorted by directory name)."""
    names = list_samples(path)
    out = []
    for name in names:
        kind, arrays, meta = read_sample(Path(path) / name)
        cls = KINDS.get(kind)
        if cls is None:
            out.append({**arrays, "meta": meta})
            continue
        missing = [a for a in cls.ARRAYS if a not in arrays]
        if missing:
            raise DatasetError(f"{Path(path) / name}: missing arrays {missing}")
        out.append(cls(**{a: arrays[a] for a in cls.ARRAYS}, meta=meta))
    return (out, names) if with_names else out
