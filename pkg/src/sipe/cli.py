"""Command-line entry point: ``sipe gen|train|infer|eval|ablate|gradcheck``.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import os

# BLAS reads these once at import, so they must be set before numpy loads
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
if os.environ.get("SIPE_THREADS"):
    for _var in _THREAD_VARS:
        os.environ.setdefault(_var, os.environ["SIPE_THREADS"])

import argparse
import dataclasses
import logging
import sys
import time

import numpy as np

from . import backbone, data, evaluate, gradcheck, pnm, prototypes, train
from . import tensor as T

log = logging.getLogger("sipe")

OK, FAILED, USAGE = 0, 1, 2

# config-file keys and the dataclass each one belongs to
_MODEL_KEYS = ("ipe", "gsc", "feature", "bpm", "detach_lateral")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(train.TrainConfig))
CONFIG_KEYS = _TRAIN_KEYS + _MODEL_KEYS


class UsageError(Exception):
    pass


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {text!r}")
    try:
        return type(default)(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    defaults = {**dataclasses.asdict(train.TrainConfig()), **dataclasses.asdict(train.ModelOptions())}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r} (accepted: {', '.join(CONFIG_KEYS)})")
        values[key] = _coerce(key, value, defaults[key])
    return values


def _build(values: dict) -> tuple[train.ModelOptions, train.TrainConfig]:
    try:
        options = train.ModelOptions(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
        config = train.TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return options, config


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return parse_config(f.read(), path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None


def _load_dataset(root, need_masks: bool = False) -> data.Dataset:
    try:
        ds = data.load(root)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if need_masks and ds.masks is None:
        raise UsageError(f"{root}: ground-truth masks are required")
    return ds


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}") from None


def _as_u8(maps: np.ndarray) -> np.ndarray:
    return np.round(np.clip(maps, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    ds = data.generate(args.n, args.seed)
    try:
        data.save(ds, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc.strerror}") from None
    print(f"wrote {args.n} samples to {args.out}")
    return OK


def cmd_train(args) -> int:
    values = _read_config(args.config)
    for flag, key, value in (("no_gsc", "gsc", False), ("no_ipe", "ipe", False), ("no_bpm", "bpm", False)):
        if getattr(args, flag):
            values[key] = value
    if args.no_ipe and "gsc" not in values:
        values["gsc"] = False
    if args.feature is not None:
        values["feature"] = args.feature
    if args.seed is not None:
        values["seed"] = args.seed
    if args.epochs is not None:
        values["epochs"] = args.epochs
    options, config = _build(values)
    ds = _load_dataset(args.data)

    stem = os.path.splitext(args.out)[0]
    log_path = args.log or stem + ".log"
    meta = {**{k: str(v) for k, v in dataclasses.asdict(options).items()},
            **{k: str(v) for k, v in dataclasses.asdict(config).items()}}

    def save_epoch(epoch, params):
        backbone.save_checkpoint(f"{stem}.epoch{epoch}.ckpt", params, {**meta, "epoch": str(epoch)})

    t0 = time.process_time()
    try:
        with open(log_path + ".tmp", "w") as log_file:
            log_file.write("step, lr, L_cls, L_gsc, L_total\n")
            params = train.train(ds.images, ds.labels, options, config, log_file=log_file,
                                 on_epoch=save_epoch if args.every_epoch else None)
        os.replace(log_path + ".tmp", log_path)
        backbone.save_checkpoint(args.out, params, meta)
    except OSError as exc:
        raise UsageError(f"cannot write {exc.filename}: {exc.strerror}") from None
    print(f"trained {config.epochs} epochs in {time.process_time() - t0:.1f}s CPU; checkpoint {args.out}")
    return OK


def _options_from_meta(meta: dict) -> train.ModelOptions:
    feature = meta.get("feature", "hierarchical")
    bpm = meta.get("bpm", "True") == "True"
    return train.ModelOptions(ipe=True, gsc=False, feature=feature, bpm=bpm)


def cmd_infer(args) -> int:
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint {args.ckpt} does not exist")
    try:
        params, meta = backbone.load_checkpoint(args.ckpt)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ds = _load_dataset(args.data)
    if ds.labels.shape[1] != params.config.num_classes:
        raise UsageError(f"dataset has {ds.labels.shape[1]} classes, checkpoint has {params.config.num_classes}")
    if ds.images.shape[-1] % params.config.total_stride or ds.images.shape[-2] % params.config.total_stride:
        raise UsageError(f"image size {ds.images.shape[-2:]} is not divisible by stride {params.config.total_stride}")
    options = _options_from_meta(meta)
    detached = backbone.Params(params.config, {k: v.detach() for k, v in params.tensors.items()})

    dirs = {name: os.path.join(args.out, name) for name in ("maps", "seeds", "pseudo", "prototypes")}
    try:
        for d in dirs.values():
            os.makedirs(d, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {exc.filename}: {exc.strerror}") from None
    h, w = ds.images.shape[-2:]
    for i, name in enumerate(ds.names):
        y = ds.labels[i]
        out = train.run(ds.images[i], y, detached, options)
        stack = (out.general if args.maps == "cam" else out.specific).maps.data
        source = out.features.hierarchical if options.feature == "hierarchical" else out.features.semantic
        protos = prototypes.extract(source, out.seeds, y, out.frozen["maps"], background=options.bpm)
        full = evaluate.upsample(stack, h, w)
        pnm.write_atomic(os.path.join(dirs["maps"], f"{name}.tnsr"), T.tensor_to_bytes(stack))
        for k in range(stack.shape[0]):
            pnm.write(os.path.join(dirs["maps"], f"{name}_c{k}.pgm"), _as_u8(full[k]))
        pnm.write(os.path.join(dirs["seeds"], f"{name}.pgm"), np.argmax(out.seeds, axis=0).astype(np.uint8))
        pnm.write(os.path.join(dirs["pseudo"], f"{name}.pgm"), evaluate.pseudo_labels(full, y))
        pnm.write_atomic(os.path.join(dirs["prototypes"], f"{name}.tnsr"), T.tensor_to_bytes(protos.vectors.data))
        flags = "".join(f"{k} {int(v)}\n" for k, v in enumerate(protos.valid))
        pnm.write_atomic(os.path.join(dirs["prototypes"], f"{name}.valid"), flags.encode())
    print(f"wrote {args.maps} maps, seeds, pseudo labels and prototypes for {len(ds)} images to {args.out}")
    return OK


def _mask_files(root: str) -> dict[str, str]:
    for sub in ("pseudo", "masks"):
        if os.path.isdir(os.path.join(root, sub)):
            root = os.path.join(root, sub)
            break
    if not os.path.isdir(root):
        raise UsageError(f"{root} is not a directory")
    return {os.path.splitext(f)[0]: os.path.join(root, f) for f in sorted(os.listdir(root)) if f.endswith(".pgm")}


def cmd_eval(args) -> int:
    pred, gt = _mask_files(args.pred), _mask_files(args.gt)
    if not gt:
        raise UsageError(f"no ground-truth masks in {args.gt}")
    unpaired = sorted(set(pred) ^ set(gt))
    if unpaired:
        raise UsageError(f"unpaired files: {', '.join(unpaired[:10])}" + (" ..." if len(unpaired) > 10 else ""))
    cm = evaluate.ConfusionMatrix(args.classes + 1)
    try:
        for name in gt:
            cm.add(pnm.read(pred[name]), pnm.read(gt[name]))
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    for k, iou in enumerate(cm.ious()):
        label = "background" if k == 0 else data.SHAPES[k - 1] if k <= len(data.SHAPES) else f"class{k}"
        print(f"{label:>12s}  {'n/a' if np.isnan(iou) else f'{100 * iou:.2f}'}")
    print(f"{'mIoU':>12s}  {100 * cm.miou():.2f}")
    return OK


def cmd_ablate(args) -> int:
    values = _read_config(args.config)
    _, config = _build(values)
    train_set = _load_dataset(os.path.join(args.data, "train"))
    eval_set = _load_dataset(os.path.join(args.data, "eval"), need_masks=True)
    t0 = time.process_time()
    report, _ = evaluate.ablation(train_set, eval_set, _seed_list(args.seeds), config)
    text = report.text()
    try:
        pnm.write_atomic(args.out, text.encode())
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    print(report.table())
    print(f"ablation finished in {time.process_time() - t0:.0f}s CPU; report {args.out}")
    return OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in _seed_list(args.seed):
        for group in gradcheck.check(seed):
            worst = max(worst, group.max_rel)
            print(f"seed {seed}  {group.name:20s} max rel err {group.max_rel:.3e}")
    passed = worst < gradcheck.TOLERANCE
    print(f"max relative error {worst:.3e} ({'pass' if passed else 'FAIL'}, tolerance {gradcheck.TOLERANCE:g})")
    return OK if passed else FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sipe", description="Weakly supervised localization on synthetic shapes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model", epilog=f"config keys: {', '.join(CONFIG_KEYS)}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="plain-text 'key = value' file; flags override it")
    p.add_argument("--log", help="loss log path (default: checkpoint path with .log)")
    p.add_argument("--no-gsc", action="store_true")
    p.add_argument("--no-ipe", action="store_true", help="implies --no-gsc")
    p.add_argument("--feature", choices=("semantic", "hierarchical"))
    p.add_argument("--no-bpm", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--every-epoch", action="store_true", help="also write STEM.epochN.ckpt after each epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write localization maps, seeds and pseudo labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--maps", choices=("cam", "iscam"), default="iscam")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mIoU of predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, default=data.NUM_CLASSES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the full configuration grid and report",
                       epilog=f"config keys: {', '.join(_TRAIN_KEYS)}")
    p.add_argument("--data", required=True, help="directory holding train/ and eval/ datasets")
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="analytic vs central-difference gradients on a toy model")
    p.add_argument("--seed", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("SIPE_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        print(f"error: SIPE_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
