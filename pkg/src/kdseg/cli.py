"""Command-line entry point: ``kdseg <command> [options]``.

Exit codes: 0 success, 1 runtime failure (the stage is named), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as C
from .data import (
    DEFAULT_SITES,
    Manifest,
    SitePairing,
    ingest_slices,
    load_batch,
    partition_by_sites,
    split_dataset,
    split_sizes,
    synthesize_dataset,
)
from .evaluation import EvalResult, emit_report, evaluate, export_overlays
from .models import ReferenceNetConfig, build_reference, load_checkpoint, read_checkpoint
from .training import distill_mono, distill_multi, resolve_pairing, train_teacher

log = logging.getLogger("kdseg")

class StageError(RuntimeError):
    pass


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path


def _load_manifest(path) -> Manifest:
    return Manifest.load(path)


def _ref_config(cfg: dict, role: str) -> ReferenceNetConfig:
    try:
        return ReferenceNetConfig(**cfg[role])
    except (TypeError, ValueError) as exc:
        raise C.ConfigError(f"invalid {role} section: {exc}") from exc


def _pairs(cfg: dict) -> SitePairing:
    try:
        return SitePairing(cfg["partition"]["pairs"])
    except (TypeError, ValueError) as exc:
        raise C.ConfigError(f"invalid partition.pairs: {exc}") from exc


def _ratios(text: str | None, cfg: dict) -> list[float]:
    if text is None:
        return list(cfg["split"]["ratios"])
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise C.ConfigError(f"--ratios must be comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# data stages


def cmd_synth_data(args, cfg, out: Path):
    s = cfg["synth"]
    n_sites = int(s["n_sites"])
    if not 1 <= n_sites <= len(DEFAULT_SITES):
        raise C.ConfigError(f"synth.n_sites must be within 1..{len(DEFAULT_SITES)}")
    m = synthesize_dataset(
        int(s["n_per_site"]), DEFAULT_SITES[:n_sites], seed=cfg["seed"], out_dir=out,
        size=int(s["size"]), slices_per_patient=int(s["slices_per_patient"]),
    )
    log.info("wrote %d synthetic slices to %s", len(m), out)


def cmd_ingest(args, cfg, out: Path):
    m = ingest_slices(args.root)
    m.save(out / "manifest.json")
    log.info("ingested %d slices from %d sites", len(m), len(m.sites))


def cmd_split(args, cfg, out: Path):
    ratios = _ratios(args.ratios, cfg)
    by_patient = cfg["split"]["by_patient"] if args.by_patient is None else args.by_patient
    try:
        parts = split_dataset(_load_manifest(args.manifest), ratios, seed=cfg["seed"], by_patient=by_patient)
    except ValueError as exc:
        if "ratios" in str(exc):
            raise C.ConfigError(str(exc)) from exc
        raise
    for name, part in zip(("train", "val", "test"), parts):
        part.save(out / f"{name}.json")
    log.info("split sizes train/val/test: %s", [len(p) for p in parts])


def cmd_partition(args, cfg, out: Path):
    pairing = _pairs(cfg)
    shards, excluded = partition_by_sites(_load_manifest(args.manifest), pairing)
    for k, shard in enumerate(shards, start=1):
        shard.save(out / f"shard_{k}.json")
    _write_json(out / "partition.json", {
        "groups": [list(p) for p in pairing.pairs],
        "sizes": [len(s) for s in shards],
        "excluded_sites": excluded,
    })


# ---------------------------------------------------------------------------
# training stages


def _save_run_config(out: Path, cfg: dict, extra: dict):
    _write_json(out / "config.json", {"config": cfg, **extra})


def _teacher_adapter(path, cfg: dict, name: str):
    """Checkpoint if it exists; during a dry run an untrained reference net stands in."""
    if Path(path).is_file():
        return load_checkpoint(path)
    return build_reference(_ref_config(cfg, "teacher"), name, seed=cfg["seed"], role="teacher")


def _protocol_plan(cfg: dict, manifest: Manifest, train_cfg) -> dict:
    ratios = cfg["split"]["ratios"]
    train, val, test = split_dataset(manifest, ratios, seed=cfg["seed"], by_patient=cfg["split"]["by_patient"])
    shards, excluded = partition_by_sites(train, _pairs(cfg))
    val_shards, _ = partition_by_sites(val, _pairs(cfg))
    return {
        "n_records": len(manifest),
        "split_sizes": [len(train), len(val), len(test)],
        "expected_split_sizes_by_slice": list(split_sizes(len(manifest), ratios)),
        "shard_sites": [sorted({r.site for r in s}) for s in shards],
        "shard_sizes": [[len(s), len(v)] for s, v in zip(shards, val_shards)],
        "excluded_sites": excluded,
    }


def _check_expectations(plan: dict, expect: dict) -> list[str]:
    problems = []
    for key, want in expect.items():
        got = plan.get(key)
        if got != want:
            problems.append(f"{key}: expected {want}, got {got}")
    return problems


def _dry_run(args, cfg, out: Path, train_cfg, student, teachers) -> None:
    """Check the wiring of a training stage without optimising anything."""
    plan: dict = {"command": args.command, "epochs": train_cfg.epochs, "n_teachers": len(teachers)}
    records = []
    if getattr(args, "manifest", None):
        full = _load_manifest(args.manifest)
        plan.update(_protocol_plan(cfg, full, train_cfg))
        records = full.records[:1]
    if args.train:
        train = _load_manifest(args.train)
        plan["train_size"] = len(train)
        records = records or train.records[:1]
    if records:
        x, _ = load_batch(records, train_cfg.input_hw, train_cfg.normalization, train_cfg.torch_dtype)
    else:
        x = torch.zeros((1, 1, *train_cfg.input_hw), dtype=train_cfg.torch_dtype)
    plan["input_shape"] = list(x.shape)
    with torch.no_grad():
        student.to(train_cfg.torch_dtype).eval()
        logits, _ = student(x)
        plan["student_logits_shape"] = list(logits.shape)
        plan["pairings"] = []
        for t in teachers:
            t.to(train_cfg.torch_dtype).eval()
            t_logits, _ = t(x)
            if t_logits.shape != logits.shape:
                raise StageError(f"teacher {t.name} logits {tuple(t_logits.shape)} differ from student {tuple(logits.shape)}")
            plan["pairings"].append(resolve_pairing(student, t, train_cfg).pairs)
    problems = _check_expectations(plan, cfg["expect"])
    plan["expectations"] = {"checked": sorted(cfg["expect"]), "problems": problems}
    _write_json(out / "dry_run.json", plan)
    print(json.dumps(plan, indent=1, sort_keys=True))
    if problems:
        raise StageError("dry run expectations failed: " + "; ".join(problems))


def _train_inputs(args):
    if not args.train:
        raise C.ConfigError("--train is required unless --dry-run is given")
    train = _load_manifest(args.train)
    val = _load_manifest(args.val) if args.val else None
    return train, val


def cmd_train_teacher(args, cfg, out: Path):
    tc = C.train_config(cfg)
    model = build_reference(_ref_config(cfg, "teacher"), args.name or "teacher", seed=cfg["seed"], role="teacher")
    if args.dry_run:
        return _dry_run(args, cfg, out, tc, model, [])
    train, val = _train_inputs(args)
    _save_run_config(out, cfg, {"command": args.command, "train": args.train, "val": args.val})
    path, h = train_teacher(model, train, val, tc, run_dir=out)
    log.info("best epoch %d, checkpoint %s", h.best_epoch, path)


def cmd_distill_mono(args, cfg, out: Path):
    tc = C.train_config(cfg)
    student = build_reference(_ref_config(cfg, "student"), args.name or "student-kd", seed=cfg["seed"], role="student")
    if args.dry_run:
        return _dry_run(args, cfg, out, tc, student, [_teacher_adapter(args.teacher, cfg, "teacher")])
    train, val = _train_inputs(args)
    _save_run_config(out, cfg, {"command": args.command, "teacher": args.teacher, "train": args.train, "val": args.val})
    path, h = distill_mono(student, args.teacher, train, val, tc, run_dir=out)
    log.info("best epoch %d, checkpoint %s", h.best_epoch, path)


def cmd_distill_multi(args, cfg, out: Path):
    tc = C.train_config(cfg)
    student = build_reference(_ref_config(cfg, "student"), args.name or "student-mkd", seed=cfg["seed"], role="student")
    if args.dry_run:
        teachers = [_teacher_adapter(p, cfg, f"teacher{k}") for k, p in enumerate(args.teachers, start=1)]
        return _dry_run(args, cfg, out, tc, student, teachers)
    train, val = _train_inputs(args)
    _save_run_config(out, cfg, {"command": args.command, "teachers": args.teachers, "train": args.train, "val": args.val})
    path, h = distill_multi(student, args.teachers, train, val, tc, run_dir=out)
    log.info("best epoch %d, checkpoint %s", h.best_epoch, path)


# ---------------------------------------------------------------------------
# evaluation stages


def cmd_evaluate(args, cfg, out: Path):
    tc = C.train_config(cfg)
    model = load_checkpoint(args.checkpoint)
    if args.name:
        model.name = args.name
    meta, _ = read_checkpoint(args.checkpoint)
    role = args.role or meta["extra"].get("role") or model.config.get("role", "student")
    result = evaluate(model, _load_manifest(args.test), tc.input_hw, tc.normalization, role=role)
    _write_json(out / "eval.json", result.to_dict())
    print(f"{result.model_name}: dice {100 * result.mean_dice:.2f}% ± {result.std_dice:.4f} over {result.n_samples} slices")


def _read_eval(path) -> EvalResult:
    try:
        return EvalResult(**json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise StageError(f"cannot read evaluation {path}: {exc}") from exc


def _baselines(items) -> dict[str, float]:
    out = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise C.ConfigError(f"--baseline expects NAME=PERCENT or NAME=eval.json, got {item!r}")
        try:
            out[name] = float(value)
        except ValueError:
            out[name] = 100.0 * _read_eval(value).mean_dice
    return out


def cmd_report(args, cfg, out: Path):
    results = [_read_eval(p) for p in args.results]
    csv_path, txt_path = emit_report(results, out, _baselines(args.baseline))
    print(txt_path.read_text(), end="")


def cmd_overlays(args, cfg, out: Path):
    tc = C.train_config(cfg)
    model = load_checkpoint(args.checkpoint)
    records = _load_manifest(args.manifest).records
    if args.limit is not None:
        records = records[: args.limit]
    paths = export_overlays(model, records, out, tc.input_hw, tc.normalization)
    log.info("wrote %d overlays to %s", len(paths), out)


HANDLERS = {
    "synth-data": cmd_synth_data,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "partition": cmd_partition,
    "train-teacher": cmd_train_teacher,
    "distill-mono": cmd_distill_mono,
    "distill-multi": cmd_distill_multi,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "overlays": cmd_overlays,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or built-in name (default, desk, protocol)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="seed for synthesis, splitting, init and training")
    common.add_argument("--out-dir", help="output directory (default: config run_dir/<command>)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="kdseg", description="Knowledge distillation for 2D segmentation.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("synth-data", parents=[common], help="write a synthetic multi-site phantom dataset")

    p = sub.add_parser("ingest", parents=[common], help="build a manifest from a slice directory")
    p.add_argument("root", help="dataset root laid out as site<k>/<patient>/img_<i>.png + mask_<i>.png")

    p = sub.add_parser("split", parents=[common], help="train/val/test split of a manifest")
    p.add_argument("manifest")
    p.add_argument("--ratios", help="comma-separated train,val,test ratios, e.g. 0.8,0.05,0.15")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--by-patient", dest="by_patient", action="store_true", default=None)
    g.add_argument("--by-slice", dest="by_patient", action="store_false")

    p = sub.add_parser("partition", parents=[common], help="one shard per site group (partition.pairs)")
    p.add_argument("manifest")

    for name, help_text in (
        ("train-teacher", "train a reference teacher on the segmentation loss"),
        ("distill-mono", "distil a reference student from one teacher"),
        ("distill-multi", "distil a reference student from several teachers"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--train", help="training manifest")
        p.add_argument("--val", help="validation manifest (model selection)")
        p.add_argument("--name", help="model name recorded in the checkpoint")
        p.add_argument("--dry-run", action="store_true",
                       help="check data, shapes, pairing and config expectations without training")
        p.add_argument("--manifest", help="with --dry-run: full manifest to split and partition per the config")
        if name == "distill-mono":
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        if name == "distill-multi":
            p.add_argument("--teachers", nargs="+", required=True, help="teacher checkpoints, in order")

    p = sub.add_parser("evaluate", parents=[common], help="Dice of a checkpoint on a test manifest")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.add_argument("--name", help="name to report the model under")
    p.add_argument("--role", choices=["teacher", "student", "distilled"])

    p = sub.add_parser("report", parents=[common], help="CSV and text table from evaluation files")
    p.add_argument("results", nargs="+", help="eval.json files")
    p.add_argument("--baseline", action="append", metavar="NAME=PERCENT|EVAL_JSON",
                   help="baseline Dice for the model NAME (repeatable)")

    p = sub.add_parser("overlays", parents=[common], help="contour overlays of predictions")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--limit", type=int)
    return parser


def resolve_config(args) -> dict:
    cfg = C.load_config(args.config)
    cfg = C.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not isinstance(cfg["seed"], int):
        raise C.ConfigError("seed must be an integer")
    C.train_config(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
    except C.ConfigError as exc:
        print(f"kdseg: config error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(json.dumps(cfg, indent=1, sort_keys=True))
        return 0
    out = Path(args.out_dir or Path(cfg["run_dir"]) / args.command)
    try:
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, cfg, out)
    except C.ConfigError as exc:
        print(f"kdseg: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        log.debug("stage failure", exc_info=True)
        print(f"kdseg: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
