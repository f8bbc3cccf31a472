"""Dataset generation and batch inference shared by the CLI and the acceptance runs."""

from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import dataset
from .config import RunConfig
from .imaging import resize_tensor
from .phantom import DrrSample, PseudoCxrSample, phantom_views, render_pseudo_cxr
from .trainer import GeneratorBundle, TrainData, ce_transfer, suppress

SPLITS = ("drr", "cxr_train", "cxr_test")
# added to the style seed so every split and sample draws its own noise
_STYLE_SEED_STRIDE = {"cxr_train": 100_000, "cxr_test": 200_000}


def phantom_seeds(cfg: RunConfig) -> dict[str, list[int]]:
    d = cfg.data
    base = 1000 * cfg.seed
    return {
        "drr": [base + d.drr_seed_offset + k for k in range(d.n_drr_phantoms)],
        "cxr_train": [base + d.cxr_train_seed_offset + k for k in range(d.n_cxr_train_phantoms)],
        "cxr_test": [base + d.cxr_test_seed_offset + k for k in range(d.n_cxr_test_phantoms)],
    }


def _views(cfg: RunConfig, seed: int) -> list[DrrSample]:
    d = cfg.data
    return phantom_views(seed, d.n_views, (d.volume_size,) * 3, (d.detector_size,) * 2, d.n_ribs)


def generate_splits(cfg: RunConfig) -> dict[str, list]:
    """DRR training samples plus styled pseudo-CXR train and test splits.

    The three splits use disjoint phantoms.
    """
    seeds = phantom_seeds(cfg)
    out = {"drr": [v for s in seeds["drr"] for v in _views(cfg, s)]}
    for split in ("cxr_train", "cxr_test"):
        samples = []
        for s in seeds[split]:
            for v in _views(cfg, s):
                style = replace(cfg.style, seed=cfg.style.seed + _STYLE_SEED_STRIDE[split] + len(samples))
                samples.append(render_pseudo_cxr(v, style, cfg.data.ring_radius))
        out[split] = samples
    return out


def manifest(cfg: RunConfig, splits: dict) -> dict:
    return {
        "seed": cfg.seed,
        "counts": {k: len(v) for k, v in splits.items()},
        "phantom_seeds": phantom_seeds(cfg),
        "style": asdict(cfg.style),
        "data": asdict(cfg.data),
    }


def write_splits(cfg: RunConfig, out: str | Path) -> dict:
    out = Path(out)
    splits = generate_splits(cfg)
    for name, samples in splits.items():
        dataset.save_dataset(samples, out / name)
    man = manifest(cfg, splits)
    (out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return man


def load_train_data(data_dir: str | Path, image_size: int) -> TrainData:
    data_dir = Path(data_dir)
    drr = dataset.load_dataset(data_dir / "drr")
    cxr = dataset.load_dataset(data_dir / "cxr_train")
    if not drr or not cxr:
        raise dataset.DatasetError(f"{data_dir}: drr and cxr_train splits must be non-empty")
    return TrainData.from_samples(drr, cxr, image_size)


@torch.no_grad()
def cycle_maps(I_x: np.ndarray, I_d: np.ndarray, gen: GeneratorBundle) -> dict:
    """Input at network size with its within-domain and cycle reconstructions."""
    size = gen.cfg.image_size
    x = resize_tensor(torch.from_numpy(np.asarray(I_x, np.float32))[None, None], size)
    d = resize_tensor(torch.from_numpy(np.asarray(I_d, np.float32))[None, None], size)
    ts = ce_transfer(x, d, gen, with_lung=False)
    return {"I_net": x[0, 0].numpy(), "I_rec": ts.I_x_rec[0, 0].numpy(),
            "I_cyc": ts.I_x_cyc[0, 0].numpy()}


def infer(images, gen: GeneratorBundle, mode: str, partners=None, bone_cfg=None) -> list[dict]:
    """Suppression outputs for each image, plus reconstruction maps.

    ``partners`` (DRR images) pair with the inputs in order, cycling when
    shorter; without them the cycle map is omitted.
    """
    outs = []
    for i, img in enumerate(images):
        out = suppress(img, gen, mode, bone_cfg)
        if partners is not None and len(partners):
            out.update(cycle_maps(img, partners[i % len(partners)], gen))
        else:
            rec = cycle_maps(img, img, gen)
            out.update({"I_net": rec["I_net"], "I_rec": rec["I_rec"]})
        outs.append(out)
    return outs


def image_of(sample) -> np.ndarray:
    if isinstance(sample, (DrrSample, PseudoCxrSample)):
        return sample.image
    if isinstance(sample, dict) and "image" in sample:
        return sample["image"]
    raise dataset.DatasetError("sample has no 'image' array")
