"""``sgap`` command line: synth, extract, train, eval, ablate, gradcam.

Exit codes: 0 success, 2 I/O or data problem, 3 numerical failure,
4 unknown sample reference. Metrics go to stdout as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint, config as cfgmod, data, gradcam as gc, training
from .errors import ConfigurationError, DataError, FormatError, TrainingDiverged
from .model import CLASS_NAMES, build, count_params

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_REFERENCE = 0, 2, 3, 4


class ReferenceError_(LookupError):
    """Requested sample ids do not exist."""


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _run_config(args) -> cfgmod.RunConfig:
    file_values = cfgmod.read_file(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "seed": getattr(args, "seed", None),
        "model.taps": getattr(args, "taps", None),
        "model.pooling": getattr(args, "pooling", None),
        "train.epochs": getattr(args, "epochs", None),
    }
    return cfgmod.resolve(file_values, overrides)


def _write_run_config(out: Path, run: cfgmod.RunConfig, extra: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    head = "".join(f"# {k}: {v}\n" for k, v in extra.items())
    (out / "run_config.txt").write_text(head + cfgmod.render(run))


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = data.synth_generate(args.n_per_class, args.seed)
    data.save_dataset(samples, args.out)
    _emit({"command": "synth", "samples": len(samples), "out": str(args.out), "seed": args.seed})
    return EXIT_OK


def _read_laterality_map(path: Path) -> dict[str, tuple[str, str]]:
    entries = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in data.LATERALITIES or parts[2] not in data.LABELS:
            raise DataError(f"{path}:{n}: expected 'file<TAB>left|right<TAB>KL0|KL2'")
        entries[parts[0]] = (parts[1], parts[2])
    return entries


def cmd_extract(args) -> int:
    entries = _read_laterality_map(Path(args.laterality_map))
    files = sorted(p for p in Path(args.roi_dir).iterdir() if p.suffix.lower() == ".pgm")
    samples, failures = [], []
    for f in files:
        if f.name not in entries:
            failures.append(f"{f.name}: no laterality entry")
            continue
        laterality, label = entries[f.name]
        try:
            lat, med = data.extract_patches(data.load_gray(f), laterality)
        except DataError as exc:
            failures.append(f"{f.name}: {exc}")
            continue
        samples.append(data.KneeSample(f.stem, lat[None], med[None], data.LABELS.index(label)))
    for msg in failures:
        print(f"extract: {msg}", file=sys.stderr)
    if samples:
        data.save_dataset(samples, args.out)
    _emit({"command": "extract", "samples": len(samples), "failures": len(failures)})
    return EXIT_OK if not failures and samples else EXIT_IO


def cmd_train(args) -> int:
    run = _run_config(args)
    out = Path(args.out)
    _write_run_config(out, run, {"command": "train", "data": args.data})
    split = data.split_dataset(data.load_dataset(args.data), run.seed)
    model = build(run.model_config, seed=run.seed)
    log = lambda r: _emit({"epoch": r.epoch, "train_loss": r.train_loss, "val_acc": r.val_acc, "val_f1": r.val_f1})
    result = training.train(model, split, run.train_config, log=log)
    checkpoint.save(result.best, out / "best.ckpt")
    (out / "history.csv").write_text(result.history_csv())
    val = training.evaluate(model, split.validation, run.train.eval_batch_size)
    _emit({"split": "validation", "best_epoch": result.best_epoch, **val.as_dict()})
    return EXIT_OK


def cmd_eval(args) -> int:
    cp = checkpoint.load(args.ckpt)
    model = cp.build()
    samples = data.load_dataset(args.data)
    seed = cp.seed if args.seed is None else args.seed
    part = samples if args.split == "all" else data.split_dataset(samples, seed).part(args.split)
    m = training.evaluate(model, part)
    _emit(
        {
            "split": args.split,
            "params": count_params(model),
            "pooling": model.config.pooling,
            "taps": model.config.tap_label,
            **m.as_dict(),
        }
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _run_config(args)
    out = Path(args.out)
    _write_run_config(out, run, {"command": "ablate", "data": args.data})
    split = data.split_dataset(data.load_dataset(args.data), run.seed)

    def log(row):
        _emit({"taps": ",".join(f"p{t}" for t in row.taps), "pooling": row.pooling, "accuracy": row.accuracy,
               "f1": row.f1, "params": row.params, "width": row.width, "status": row.status})

    rows = training.ablate(split, run.train_config, run.model_config, log=log)
    (out / "ablation.csv").write_text(training.ablation_csv(rows))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    cp = checkpoint.load(args.ckpt)
    model = cp.build()
    by_id = {s.id: s for s in data.load_dataset(args.data)}
    ids = [i.strip() for i in args.ids.split(",") if i.strip()]
    unknown = [i for i in ids if i not in by_id]
    if unknown or not ids:
        raise ReferenceError_("unknown sample ids: " + ", ".join(unknown) if unknown else "no ids given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        sample = by_id[sid]
        target = int(training.predict(training.infer(model, [sample]))[0])
        for attention, patch in zip(gc.gradcam(model, sample, target), (sample.lateral, sample.medial)):
            path = gc.overlay(attention, patch, out / gc.overlay_name(sid, attention), args.alpha)
            _emit({"id": sid, "branch": attention.branch, "class": CLASS_NAMES[target], "file": str(path)})
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgap", description="Siamese-GAP knee OA classifier")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-per-class", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="cut lateral/medial patches from knee ROI images")
    s.add_argument("--roi-dir", required=True, type=Path)
    s.add_argument("--laterality-map", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_extract)

    def run_flags(s):
        s.add_argument("--data", required=True)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int)

    s = sub.add_parser("train", help="train one configuration")
    run_flags(s)
    s.add_argument("--taps")
    s.add_argument("--pooling", choices=("gap", "gmp"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "validation", "test", "all"))
    s.add_argument("--seed", type=int, help="split seed (default: the checkpoint's)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the 6x2 GAP/GMP tap grid")
    run_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcam", help="write Grad-CAM overlays for chosen samples")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ids", required=True, help="comma-separated sample ids")
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_gradcam)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"sgap: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReferenceError_ as exc:
        print(f"sgap: {exc}", file=sys.stderr)
        return EXIT_REFERENCE
    except (OSError, DataError, FormatError, ConfigurationError) as exc:
        print(f"sgap: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
