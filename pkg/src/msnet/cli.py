"""Command-line entry point: ``msnet <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import (
    Diagnosis, ManifestEntry, SynthConfig, generate_synthetic, load_manifest, read_volume,
    split_dataset, write_manifest, write_volume,
)
from .errors import ConfigError, MsNetError, TrainingDivergedError
from .model import (
    REPORTED_PARAM_COUNT, MsNetArch, init_model, load_checkpoint, param_count, save_checkpoint,
)
from .train import TrainConfig, benchmark, evaluate, predict, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _triple(kind):
    def parse(text):
        try:
            values = [kind(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        if len(values) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        return tuple(values)
    return parse


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def cmd_synth(args):
    cfg = SynthConfig(patients_per_class=args.per_class, slice_range=(args.min_slices, args.max_slices),
                      noise_sigma=args.noise, signal_strength=args.signal,
                      infected_band_fraction=args.band, seed=args.seed, feature_dim=args.feature_dim)
    cfg.validate()
    if not 0 < args.val_fraction < 1:
        raise ConfigError(f"--val-fraction must be in (0, 1), got {args.val_fraction}")
    out = Path(args.out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg)
    _, val = split_dataset(data, args.val_fraction, args.seed)
    val_ids = {v.patient_id for v, _ in val}
    entries = []
    for vol, label in data:
        path = vol_dir / f"{vol.patient_id}.fvol"
        write_volume(vol, path)
        entries.append(ManifestEntry(vol.patient_id, path, label,
                                     "val" if vol.patient_id in val_ids else "train"))
    write_manifest(entries, out / "manifest.csv")
    counts = np.bincount([int(y) for _, y in data], minlength=3)
    print(f"wrote {len(entries)} volumes to {vol_dir}")
    print("  " + "  ".join(f"{d.name}={counts[d]}" for d in Diagnosis))
    print(f"  train={len(entries) - len(val_ids)} val={len(val_ids)}")
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def _load_labelled(entries):
    return [(e.load(), e.label) for e in entries]


def cmd_train(args):
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed,
                      class_weighting=args.class_weights, val_fraction=args.val_fraction)
    cfg.validate()
    entries = load_manifest(args.manifest)
    train_e = [e for e in entries if e.split == "train"]
    val_e = [e for e in entries if e.split == "val"]
    if not train_e or not val_e:
        # no usable pre-assigned split: stratify everything that is not held out for test
        pool = [e for e in entries if e.split != "test"]
        train_e, val_e = split_dataset(pool, cfg.val_fraction, cfg.seed)
    train_set, val_set = _load_labelled(train_e), _load_labelled(val_e)
    arch = MsNetArch(input_channels=train_set[0][0].features.shape[1],
                     initial_conv_kernel=args.initial_kernel)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.json")
    print(f"training on {len(train_set)} patients, validating on {len(val_set)}")
    try:
        result = train(train_set, cfg, val_set=val_set, arch=arch)
    except TrainingDivergedError as e:
        preserved = out.with_suffix(out.suffix + ".diverged")
        if e.model is not None:
            save_checkpoint(e.model, preserved)
        _write_json({"error": str(e), **(e.log.to_dict() if e.log else {})}, log_path)
        print(f"error: {e}; last finite state saved to {preserved}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(result.model, out)
    _write_json(result.log.to_dict(), log_path)
    print(f"best epoch {result.log.best_epoch}: val accuracy {result.log.best_val_accuracy:.4f}")
    print(f"checkpoint: {out}\nlog: {log_path}")
    return EXIT_OK


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    if args.manifest:
        vols = [e.load() for e in load_manifest(args.manifest)]
    else:
        vols = [read_volume(p) for p in args.volumes]
    if not vols:
        raise UsageError("give volume files or --manifest")
    rows = []
    for v in vols:
        label, probs = predict(model, v, args.precision)
        rows.append({"patient_id": v.patient_id, "label": label.name, "probs": probs.tolist()})
        print(f"{v.patient_id}\t{label.name}\t" + "\t".join(f"{p:.6f}" for p in probs))
    if args.json:
        _write_json(rows, args.json)
    return EXIT_OK


def cmd_evaluate(args):
    model = load_checkpoint(args.checkpoint)
    entries = load_manifest(args.manifest)
    if args.split != "all":
        entries = [e for e in entries if e.split == args.split]
    if not entries:
        raise ConfigError(f"manifest has no entries for split {args.split!r}")
    report = evaluate(model, _load_labelled(entries), args.precision)
    print(report.summary())
    if args.json:
        _write_json(report.to_dict(), args.json)
    return EXIT_OK


def cmd_bench(args):
    if args.repetitions < 1:
        raise ConfigError("--repetitions must be >= 1")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = init_model(MsNetArch(input_channels=args.feature_dim), seed=args.seed)
    if args.manifest:
        vols = [e.load() for e in load_manifest(args.manifest)]
    else:
        if args.volumes < 1:
            raise ConfigError("--volumes must be >= 1")
        n = args.volumes
        per_class = (n - 2 * (n // 3), n // 3, n // 3)
        cfg = SynthConfig(patients_per_class=per_class, slice_range=(args.min_slices, args.max_slices),
                          seed=args.seed, feature_dim=model.arch.input_channels)
        vols = [v for v, _ in generate_synthetic(cfg)]
    res = benchmark(model, vols, repetitions=args.repetitions, warmup=args.warmup)
    t = res.timing
    print(f"{t.n_volumes} volumes x {t.repetitions} repetitions (float32, features in memory)")
    print(f"total {t.total_seconds:.4f} s  mean {1e3 * t.mean_seconds:.3f} ms  "
          f"p50 {1e3 * t.p50_seconds:.3f} ms  p95 {1e3 * t.p95_seconds:.3f} ms")
    print(f"predictions identical across repetitions: {res.deterministic}")
    if args.json:
        _write_json({"timing": t.to_dict(), "deterministic": res.deterministic,
                     "predictions": [p.name for p in res.predictions]}, args.json)
    return EXIT_OK if res.deterministic else EXIT_RUNTIME


def cmd_gradcheck(args):
    layers = gradcheck.layer_checks(args.cases, seed=args.seed)
    worst = max(layers, key=lambda r: r.max_rel_error)
    print(f"layer checks: {len(layers)} shapes, max rel error {worst.max_rel_error:.3e} ({worst.name})")
    models = [gradcheck.model_check(gradcheck.SHRUNK_ARCH, length=args.length, seed=args.seed + s)
              for s in range(args.model_seeds)]
    worst_model = max(r.max_rel_error for r in models)
    print(f"full model (input_channels=8, block_channels=4, l={args.length}): "
          f"max rel error {worst_model:.3e} over {len(models)} seeds")
    ok = all(r.passed for r in layers + models)
    print(f"tolerance {gradcheck.TOLERANCE:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_paramcount(args):
    arch = MsNetArch(input_channels=args.input_channels, initial_conv_kernel=args.initial_kernel,
                     block_count=args.blocks, block_channels=args.channels, dense_hidden=args.hidden)
    formula = param_count(arch)
    instantiated = init_model(arch, seed=0).params.size
    print(f"closed form:   {formula:,}")
    print(f"instantiated:  {instantiated:,}")
    print(f"reported reference: {REPORTED_PARAM_COUNT:,} (delta {REPORTED_PARAM_COUNT - formula:+,})")
    if formula != instantiated:
        print("error: closed form and instantiated counts disagree", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="msnet", description="Multi-slice feature aggregation network")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic feature-volume dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--per-class", type=_triple(int), default=(40, 40, 40), metavar="COVID,CAP,NORMAL")
    s.add_argument("--min-slices", type=int, default=100)
    s.add_argument("--max-slices", type=int, default=200)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--signal", type=float, default=2.0)
    s.add_argument("--band", type=_triple(float), default=(0.3, 0.15, 0.0), metavar="F1,F2,F3")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-fraction", type=float, default=0.3)
    s.add_argument("--feature-dim", type=int, default=2048)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest and save the best checkpoint")
    t.add_argument("--manifest", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-fraction", type=float, default=0.3)
    t.add_argument("--class-weights", choices=("balanced", "none"), default="balanced")
    t.add_argument("--initial-kernel", type=int, default=1)
    t.add_argument("--out", default="model.msnt")
    t.add_argument("--log", help="training log JSON (default: <out>.log.json)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="diagnose volumes with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("volumes", nargs="*")
    pr.add_argument("--manifest")
    pr.add_argument("--precision", choices=("float64", "float32"), default="float64")
    pr.add_argument("--json")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="confusion matrix, sensitivities and accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--precision", choices=("float64", "float32"), default="float64")
    e.add_argument("--json")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="per-volume inference latency")
    b.add_argument("--checkpoint")
    b.add_argument("--manifest", help="benchmark these volumes instead of synthetic ones")
    b.add_argument("--volumes", type=int, default=268)
    b.add_argument("--min-slices", type=int, default=100)
    b.add_argument("--max-slices", type=int, default=200)
    b.add_argument("--feature-dim", type=int, default=2048)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--length", type=int, default=40)
    g.add_argument("--model-seeds", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("paramcount", help="closed-form vs instantiated parameter count")
    c.add_argument("--input-channels", type=int, default=2048)
    c.add_argument("--initial-kernel", type=int, default=1)
    c.add_argument("--blocks", type=int, default=4)
    c.add_argument("--channels", type=int, default=64)
    c.add_argument("--hidden", type=int, default=32)
    c.set_defaults(func=cmd_paramcount)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"msnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MsNetError, OSError) as e:
        print(f"msnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
