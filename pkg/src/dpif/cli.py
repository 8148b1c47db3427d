"""Command-line entry point: ``dpif <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every verb
echoes its fully resolved configuration as JSON before doing any work.
Config files given by bare name are looked up in ``$DPIF_CONFIG_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from dpif.backbone import DEFAULT_TRUNCATION, FAMILIES, TRUNCATION_SHAPES, BackboneSpec
from dpif.data import SyntheticConfig, load_manifest, synth_generate
from dpif.head import EMBEDDING_SIZES, HeadConfig, component_sizes, count_trainable
from dpif.metrics import export_report
from dpif.pipeline import (ABLATION_FIELDS, DEFAULT_GALLERY, DEFAULT_PROBE, evaluate,
                           run_ablation)
from dpif.trainer import FeatureCache, TrainConfig, Trainer, build_model, load_checkpoint

CONFIG_DIR_ENV = "DPIF_CONFIG_DIR"
CHECKPOINT_NAME = "checkpoint.dpif"
LOG_NAME = "train_log.csv"
ABLATION_KINDS = {"lambda": "lambda_sweep", "embedding": "embedding_size",
                  "activation": "activation_combo", "truncation": "truncation_depth"}


def resolve_config_path(name: str | None) -> Path | None:
    if not name:
        return None
    p = Path(name)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / name).exists():
        return Path(base) / name
    raise FileNotFoundError(f"config file {name!r} not found"
                            + (f" (also looked in ${CONFIG_DIR_ENV}={base})" if base else ""))


def _read_json(name: str | None) -> dict:
    """Config dict from a file; a saved config echo is accepted as well."""
    path = resolve_config_path(name)
    if not path:
        return {}
    d = json.loads(path.read_text())
    if isinstance(d, dict) and "command" in d and isinstance(d.get("config"), dict):
        d = d["config"]
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return d


def echo_config(verb: str, config: dict, **run) -> None:
    print(json.dumps({"command": verb, "config": config, **run}, indent=2, sort_keys=True))
    sys.stdout.flush()


def _manifest_and_root(data: str, default_name: str, manifest: str | None = None):
    if manifest:
        path = Path(manifest)
    else:
        path = Path(data)
        if path.is_dir():
            path = path / default_name
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} not found")
    return load_manifest(path), path.parent


def _train_config(args) -> TrainConfig:
    d = _read_json(args.config)
    overrides = {"lam": args.lam, "phase1_epochs": args.phase1_epochs,
                 "phase2_epochs": args.phase2_epochs, "embedding_size": args.embedding_size,
                 "seed": args.seed, "family": args.family, "truncation": args.truncation,
                 "batch_size": args.batch_size, "lr": args.lr}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.family is not None and args.truncation is None and "truncation" not in d:
        d["truncation"] = DEFAULT_TRUNCATION[args.family]
    return TrainConfig.from_dict(d)


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    d = _read_json(args.config)
    for key in ("seed", "num_subjects", "test_subjects", "images_per_cell", "image_size"):
        value = getattr(args, key)
        if value is not None:
            d[key] = value
    cfg = SyntheticConfig.from_dict(d)
    echo_config("synth", cfg.to_dict(), out=str(args.out))
    ds = synth_generate(cfg, args.out)
    print(f"wrote {len(ds.manifest)} images for {cfg.num_subjects} subjects to {ds.root} "
          f"({len(ds.train_subjects)} train / {len(ds.test_subjects)} test)")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    out = Path(args.out)
    echo_config("train", config.to_dict(), data=str(args.data), out=str(out),
                resume=args.resume)
    manifest, root = _manifest_and_root(args.data, "train.csv", args.manifest)
    classes = sorted({e.subject_id for e in manifest
                      if e.spectrum == "visible" and e.pose_class == "frontal"})
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    if args.resume:
        model, saved, store = load_checkpoint(args.resume)
        if saved != config:
            raise ValueError("checkpoint was written with a different training config")
        trainer = Trainer(model, config, manifest, root, classes, log_path=out / LOG_NAME)
        trainer.restore(store)
    else:
        (out / LOG_NAME).unlink(missing_ok=True)
        model = build_model(config, len(classes))
        trainer = Trainer(model, config, manifest, root, classes, log_path=out / LOG_NAME)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    budget = args.max_epochs
    while not trainer.done and budget != 0:
        trainer.run(max_epochs=1)
        trainer.save_checkpoint(ckpt)
        budget = None if budget is None else budget - 1
    trainer.save_checkpoint(ckpt)
    last = trainer.state.history[-1] if trainer.state.history else {}
    status = "finished" if trainer.done else "stopped"
    print(f"{status} at phase {trainer.state.phase} epoch {trainer.state.epoch}; "
          f"last L={last.get('loss', float('nan')):.6g}; checkpoint {ckpt}")
    return 0


def _split_list(text: str | None, default: str) -> list[str]:
    return [t.strip() for t in (text or default).split(",") if t.strip()]


def _format_row(name: str, v) -> str:
    return (f"{name:<22}{100 * v.auc:>8.2f}{100 * v.eer:>8.2f}"
            f"{100 * v.tar_at_1pct_far:>11.2f}{100 * v.tar_at_5pct_far:>11.2f}")


def cmd_eval(args, scores_only: bool = False) -> int:
    galleries = _split_list(args.gallery, DEFAULT_GALLERY)
    probes = _split_list(args.probes, DEFAULT_PROBE)
    echo_config("score-matrix" if scores_only else "eval",
                {"checkpoint": str(args.checkpoint), "data": str(args.data), "out": str(args.out),
                 "gallery": galleries, "probes": probes})
    model, config, _ = load_checkpoint(args.checkpoint)
    manifest, root = _manifest_and_root(args.data, "test.csv", args.manifest)
    out = Path(args.out)
    if not scores_only:
        print(f"{'probe vs gallery':<22}{'AUC(%)':>8}{'EER(%)':>8}{'TAR@1%FAR':>11}{'TAR@5%FAR':>11}")
    features = FeatureCache(model, root, config.normalize_inputs, config.resize_inputs)
    summary_rows = []
    for g in galleries:
        for p in probes:
            ev = evaluate(model, manifest, root, g, p, features=features)
            prefix = f"{p}_vs_{g}_"
            if scores_only:
                export_report(ev.verification, ev.matrix, out, prefix=prefix)
                print(f"wrote {out / (prefix + 'scores.csv')}")
                continue
            export_report(ev.verification, ev.matrix, out, ev.identification, prefix=prefix)
            print(_format_row(f"{p} vs {g}", ev.verification))
            v = ev.verification
            summary_rows.append([p, g, v.auc, v.eer, v.tar_at_1pct_far, v.tar_at_5pct_far,
                                 ev.identification.rank[1], ev.identification.rank[5]])
    if not scores_only:
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "gallery", "auc", "eer", "tar_at_1pct_far", "tar_at_5pct_far",
                        "rank1", "rank5"])
            w.writerows([r[:2] + [repr(float(x)) for x in r[2:]] for r in summary_rows])
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    kind = ABLATION_KINDS.get(args.kind, args.kind)
    grid = _split_list(args.grid, "")
    echo_config("ablate", base.to_dict(), kind=kind, grid=grid, data=str(args.data),
                out=str(args.out))
    train, root = _manifest_and_root(args.data, "train.csv")
    test, _ = _manifest_and_root(args.data, "test.csv")
    rows = run_ablation(kind, grid, base, train, test, root)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    for r in rows:
        print(f"{r['setting']:<16}{100 * r['auc']:>8.2f}{100 * r['eer']:>8.2f}"
              f"{100 * r['tar_at_1pct_far']:>11.2f}{100 * r['tar_at_5pct_far']:>11.2f}"
              f"{r['params']:>12d}")
    return 0


def cmd_info(args) -> int:
    family = args.family or "resnet50"
    truncation = args.truncation or DEFAULT_TRUNCATION[family]
    echo_config("info", {"family": family, "truncation": truncation,
                         "groups": args.groups})
    spec = BackboneSpec.create(family, truncation)
    h, w, c = spec.output_shape
    print(f"backbone {family} truncated at {truncation}: output {h}x{w}x{c}")
    print(f"available truncations: {', '.join(TRUNCATION_SHAPES[family])}")
    sizes = [args.embedding_size] if args.embedding_size else list(EMBEDDING_SIZES)
    print(f"{'d':>6}{'trainable':>14}")
    for d in sizes:
        cfg = HeadConfig(c, h, w, embedding_size=d, groups=args.groups)
        print(f"{d:>6}{count_trainable(cfg):>14d}")
    if args.embedding_size:
        cfg = HeadConfig(c, h, w, embedding_size=args.embedding_size, groups=args.groups)
        for comp, n in component_sizes(cfg).items():
            print(f"  {comp:<12}{n:>12d}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="training config JSON (path or name in $DPIF_CONFIG_DIR)")
    p.add_argument("--lambda", dest="lam", type=float, help="pose-correction loss weight")
    p.add_argument("--phase1-epochs", type=int)
    p.add_argument("--phase2-epochs", type=int)
    p.add_argument("--embedding-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--truncation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpif", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="render a synthetic paired visible/thermal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="synthetic config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-subjects", type=int)
    p.add_argument("--test-subjects", type=int)
    p.add_argument("--images-per-cell", type=int)
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--data", required=True, help="dataset directory or train manifest")
    p.add_argument("--manifest", help="explicit training manifest (overrides --data lookup)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-epochs", type=int, help="stop after this many more epochs")
    _add_train_flags(p)

    for verb in ("eval", "score-matrix"):
        p = sub.add_parser(verb, help="evaluate a checkpoint" if verb == "eval"
                           else "export raw score matrices")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset directory or test manifest")
        p.add_argument("--manifest")
        p.add_argument("--gallery", help=f"comma-separated gallery sets (default {DEFAULT_GALLERY})")
        p.add_argument("--probes", help=f"comma-separated probe sets (default {DEFAULT_PROBE})")
        p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train+evaluate over one ablation axis")
    p.add_argument("--kind", required=True,
                   choices=sorted(ABLATION_KINDS) + sorted(ABLATION_KINDS.values()))
    p.add_argument("--grid", help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_train_flags(p)

    p = sub.add_parser("info", help="backbone shapes and trainable-parameter counts")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--truncation")
    p.add_argument("--embedding-size", type=int)
    p.add_argument("--groups", type=int, default=2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                "score-matrix": lambda a: cmd_eval(a, scores_only=True),
                "ablate": cmd_ablate, "info": cmd_info}
    try:
        return handlers[args.verb](args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dpif {args.verb}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
