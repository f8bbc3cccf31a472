"""Command-line entry point: ``rsgan <command> ...``.

Exit codes: 0 success, 1 failure or partial failure, 2 training aborted on a
non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import dataset
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, write_config
from .imaging import read_png, write_png
from .metrics import LPIPSConfig, MetricError, evaluate
from .pipeline import image_of, infer, load_train_data, write_splits
from .trainer import MODES, Trainer, TrainingAborted, load_generator

log = logging.getLogger("rsgan")

LOCK_NAME = ".rsgan.lock"
# PNG outputs: Q keeps the input depth; the rest use a fixed depth and range
PNG_OUTPUTS = {"R": (16, (-1.0, 1.0)), "B": (16, (-1.0, 1.0)), "L": (8, (0.0, 1.0)),
               "M": (8, (0.0, 1.0))}
ARRAY_OUTPUTS = ("Q", "R", "B", "L", "M", "I_net", "I_rec", "I_cyc")


class CliError(RuntimeError):
    pass


def _lock(directory: Path) -> FileLock:
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise CliError(f"{directory} is in use by another command") from exc
    return lock


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["train.mode"] = args.mode
    return load_config(args.config, overrides)


# --- commands ---------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    lock = _lock(out)
    try:
        write_config(cfg, out / "config.yaml")
        man = write_splits(cfg, out)
    finally:
        lock.release()
    print(f"wrote {', '.join(f'{n} {k}' for k, n in man['counts'].items())} samples to {out}")
    return 0


def _truncate_log(path: Path, keep_through: int) -> None:
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()
             and json.loads(ln)["iter"] <= keep_through]
    path.write_text("".join(ln + "\n" for ln in lines))


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = cfg.train_config()
    out = Path(args.out)
    lock = _lock(out)
    try:
        write_config(cfg, out / "config.yaml")
        data = load_train_data(args.data, tcfg.net.image_size)
        log_path = out / "train_log.jsonl"
        if args.resume:
            trainer = Trainer.load(args.resume, data, tcfg)
            _truncate_log(log_path, trainer.iteration)
            print(f"resuming at iteration {trainer.iteration}")
        else:
            trainer = Trainer(tcfg, data)
            log_path.write_text("")
            if tcfg.needs_lung:
                losses = trainer.pretrain_lung()
                (out / "lung_log.jsonl").write_text(
                    "".join(json.dumps({"iter": i + 1, "L_dice": v}) + "\n"
                            for i, v in enumerate(losses)))
        try:
            trainer.run(log_path=log_path, out_dir=out)
        except TrainingAborted as exc:
            trainer.save(out / "aborted.zip")
            print(f"training aborted: loss term {exc.term} became non-finite at iteration "
                  f"{exc.iteration}", file=sys.stderr)
            return 2
        final = trainer.save(out / "final.zip")
    finally:
        lock.release()
    print(f"finished {trainer.iteration} iterations; checkpoint {final}")
    return 0


def _input_items(paths) -> list[tuple[str, str, object]]:
    """(kind, name, source) for every input: 'png' files or dataset samples."""
    items = []
    for p in map(Path, paths):
        if p.is_dir() and (p / "header.json").exists():
            items.append(("sample", p.name, p))
        elif p.is_dir():
            for name in dataset.list_samples(p):
                items.append(("sample", name, p / name))
        else:
            items.append(("png", p.stem, p))
    return items


def cmd_suppress(args) -> int:
    try:
        gen, tcfg = load_generator(args.ckpt)
    except (CheckpointError, OSError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    mode = args.mode or tcfg.mode
    partners = None
    if args.pair_data:
        partners = [image_of(s) for s in dataset.load_dataset(args.pair_data)]
    out = Path(args.out)
    lock = _lock(out)
    failed = []
    try:
        for kind, name, src in _input_items(args.inputs):
            try:
                if kind == "png":
                    image, depth = read_png(src)
                else:
                    _, arrays, _ = dataset.read_sample(src)
                    if "image" not in arrays:
                        raise dataset.DatasetError(f"{src}: no 'image' array")
                    image = arrays["image"]
                res = infer([image], gen, mode, partners, tcfg.bone_mask)[0]
                if kind == "png":
                    write_png(out / f"{name}_Q.png", res["Q"], depth)
                    for key, (bits, rng) in PNG_OUTPUTS.items():
                        write_png(out / f"{name}_{key}.png", res[key], bits, rng)
                else:
                    dataset.write_sample(out / name, {k: res[k] for k in ARRAY_OUTPUTS if k in res},
                                         {"mode": mode, "checkpoint": Path(args.ckpt).name})
            except Exception as exc:  # noqa: BLE001 - one bad input must not stop the batch
                failed.append(name)
                print(f"{src}: {exc}", file=sys.stderr)
    finally:
        lock.release()
    if failed:
        print(f"{len(failed)} input(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _truth_dir(path: Path) -> Path:
    return path / "cxr_test" if (path / "cxr_test").is_dir() else path


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data_dir = _truth_dir(Path(args.data))
    samples, names = dataset.load_dataset(data_dir, with_names=True)
    outputs = {}
    for d in map(Path, args.outputs):
        have = set(dataset.list_samples(d))
        missing = sorted(set(names) - have)
        extra = sorted(have - set(names))
        if missing or extra:
            raise CliError(f"{d}: outputs do not align with {data_dir}; "
                           f"missing {missing or 'none'}, unmatched {extra or 'none'}")
        method = d.name
        if method in outputs:
            raise CliError(f"duplicate method name {method!r}; output directories need distinct names")
        outputs[method] = [dataset.read_sample(d / n)[1] for n in names]
    if args.with_reference:
        outputs["input"] = [{"Q": s.image} for s in samples]
        outputs["ground_truth"] = [{"Q": s.truth_suppressed} for s in samples]
    m = cfg.metrics
    lp = LPIPSConfig(len(m.lpips_channels), m.lpips_channels, m.lpips_seed, m.lpips_weights)
    report = evaluate(outputs, samples, names, lp, m.region)
    rpath = Path(args.report)
    rpath.parent.mkdir(parents=True, exist_ok=True)
    rpath.write_text(report.to_csv())
    rpath.with_name(rpath.stem + "_pvalues.csv").write_text(report.pvalues_csv())
    rpath.with_suffix(".json").write_text(report.to_json() + "\n")
    print(report.to_csv(), end="")
    return 0


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsgan", description="Rib suppression on synthetic radiographs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize DRR and pseudo-CXR datasets")
    p.add_argument("--config", help="YAML config with flat dotted keys (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model (lung pretraining runs first when needed)")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory written by generate-data")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("suppress", help="remove ribs from PNG images or dataset samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="PNG files, dataset directories or sample directories")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, help="override the mode stored in the checkpoint")
    p.add_argument("--pair-data", help="DRR dataset paired with the inputs for cycle maps")
    p.set_defaults(func=cmd_suppress)

    p = sub.add_parser("evaluate", help="score suppression outputs against ground truth")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="pseudo-CXR dataset or generate-data directory")
    p.add_argument("--outputs", nargs="+", required=True, help="one suppress output directory per method")
    p.add_argument("--report", required=True, help="CSV path; JSON and p-value files go alongside")
    p.add_argument("--with-reference", action="store_true",
                   help="add rows for the unsuppressed input and the ground truth")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, dataset.DatasetError, MetricError, CheckpointError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
