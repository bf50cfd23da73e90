"""Command-line surface: dataset generation/validation, the three training
stages, evaluation (fixed, dynamic, and swept top-k), retrieval inspection,
and report/plot emission.

Run configuration is a flat ``key = value`` text file; command-line flags
override file values, and the fully resolved configuration is written next to
every run output together with its content hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .data import (LoadError, ValidationError, generate_toy_dataset,
                   load_dataset, save_dataset)
from .fusion import FusionConfig, FusionStrategy
from .metrics import write_delta_csv
from .noise import NOISE_KINDS, NoiseConfig
from .report import (collect_reports, cross_run_comparison, plot_dice_vs_k,
                     plot_improvement_counts, plot_per_class_dice,
                     retrieval_panel, write_aggregate_table,
                     write_comparison_csv)
from .retrieval import (RetrievalConfig, RetrievalError, embed,
                        load_kb_snapshot, save_kb_snapshot)
from .segmentation import BACKBONES
from .train import (TrainConfig, build_models, evaluate, joint_train,
                    load_checkpoint, pretrain_retrieval, pretrain_segmentation,
                    save_checkpoint, write_history_csv)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# documented configuration keys with their defaults
CONFIG_DEFAULTS: dict[str, object] = {
    "train_manifest": "",
    "test_manifest": "",
    "gallery_manifest": "",
    "out_dir": "",
    "seed": 0,
    "backbone": "tiny-cnn",
    "embed_dim": 128,
    "epochs_pretrain_ret": 8,
    "epochs_pretrain_seg": 15,
    "epochs_joint": 5,
    "batch_size": 8,
    "lr_retrieval": 1e-3,
    "lr_segmentation": 1e-3,
    "topk": 2,
    "dynamic_topk": False,
    "theta": 0.9,
    "k_min": 1,
    "k_max": 10,
    "contrastive_tau": 0.07,
    "fusion": "early",
    "fusion_tau": 0.1,
    "guide_noise": "none",
    "noise_sigma": 0.1,
    "noise_density": 0.05,
    "noise_drop_rate": 0.1,
    "noise_seed": 0,
    "gallery_source": "train",
    "from_scratch": False,
}

# the paper-style experiment defaults: two fixed guides, early fusion,
# gallery drawn from the training split
PRESETS: dict[str, dict] = {
    "acdc-style-toy": {
        "topk": 2,
        "dynamic_topk": False,
        "fusion": "early",
        "gallery_source": "train",
    },
}

_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def _coerce(key: str, raw, errors: list[str]):
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        val = _BOOL_STRINGS.get(str(raw).strip().lower())
        if val is None:
            errors.append(f"{key}: expected a boolean, got {raw!r}")
            return default
        return val
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError:
            errors.append(f"{key}: expected an integer, got {raw!r}")
            return default
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError:
            errors.append(f"{key}: expected a number, got {raw!r}")
            return default
    return str(raw).strip()


def parse_config_file(path: Path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


def resolve_config(config_path: str | None, overrides: dict, preset: str | None = None) -> dict:
    """Defaults <- preset <- config file <- CLI overrides, with every problem
    reported at once."""
    errors: list[str] = []
    resolved = dict(CONFIG_DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        resolved.update(PRESETS[preset])
    if config_path:
        file_values = parse_config_file(Path(config_path))
        for key, raw in file_values.items():
            if key not in CONFIG_DEFAULTS:
                errors.append(f"unknown config key {key!r}")
                continue
            resolved[key] = _coerce(key, raw, errors)
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in CONFIG_DEFAULTS:
            errors.append(f"unknown override key {key!r}")
            continue
        resolved[key] = _coerce(key, raw, errors)

    if resolved["backbone"] not in BACKBONES:
        errors.append(f"backbone: unknown {resolved['backbone']!r}; known: {sorted(BACKBONES)}")
    if resolved["fusion"] not in [s.value for s in FusionStrategy]:
        errors.append(f"fusion: must be one of {[s.value for s in FusionStrategy]}")
    if resolved["guide_noise"] not in NOISE_KINDS:
        errors.append(f"guide_noise: must be one of {NOISE_KINDS}")
    if errors:
        raise ValidationError("configuration errors:\n  " + "\n  ".join(errors))
    return resolved


def build_train_config(resolved: dict) -> TrainConfig:
    noise = None
    if resolved["guide_noise"] != "none":
        noise = NoiseConfig(
            kind=resolved["guide_noise"], sigma=resolved["noise_sigma"],
            density=resolved["noise_density"], drop_rate=resolved["noise_drop_rate"],
            seed=resolved["noise_seed"],
        )
    cfg = TrainConfig(
        epochs_pretrain_ret=resolved["epochs_pretrain_ret"],
        epochs_pretrain_seg=resolved["epochs_pretrain_seg"],
        epochs_joint=resolved["epochs_joint"],
        batch_size=resolved["batch_size"],
        lr_retrieval=resolved["lr_retrieval"],
        lr_segmentation=resolved["lr_segmentation"],
        seed=resolved["seed"],
        backbone=resolved["backbone"],
        embed_dim=resolved["embed_dim"],
        retrieval=RetrievalConfig(
            k=resolved["topk"], dynamic=resolved["dynamic_topk"],
            theta_threshold=resolved["theta"], k_min=resolved["k_min"],
            k_max=resolved["k_max"], contrastive_tau=resolved["contrastive_tau"],
        ),
        fusion=FusionConfig(
            tau_fusion=resolved["fusion_tau"],
            strategy=FusionStrategy(resolved["fusion"]),
        ),
        noise=noise,
        gallery_source=resolved["gallery_source"],
        from_scratch=resolved["from_scratch"],
    )
    cfg.validate()
    return cfg


def resolved_config_text(resolved: dict) -> str:
    return "".join(f"{k} = {resolved[k]}\n" for k in sorted(resolved))


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(resolved_config_text(resolved).encode()).hexdigest()


def write_resolved_config(resolved: dict, out_dir: Path) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = resolved_config_text(resolved)
    (out_dir / "config.resolved.txt").write_text(text)
    return config_hash(resolved)


# --- commands -------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    out_dir = Path(args.out)
    dataset = generate_toy_dataset(args.num_patients, args.slices_per_phase,
                                   args.height, args.width, args.seed,
                                   prefix=args.prefix)
    manifest = save_dataset(dataset, out_dir)
    print(f"wrote {manifest}")
    print(f"patients: {len(dataset.patient_ids())}  slices: {len(dataset)}  "
          f"size: {dataset.height}x{dataset.width}  classes: {dataset.num_classes}")
    return EXIT_OK


def cmd_validate(args) -> int:
    dataset = load_dataset(args.manifest)
    print(f"OK: {len(dataset)} slices, {len(dataset.patient_ids())} patients, "
          f"{dataset.height}x{dataset.width}, {dataset.num_classes} classes")
    return EXIT_OK


def _overrides_from_args(args, epochs_key: str | None = None) -> dict:
    mapping = {
        "out_dir": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr_retrieval": getattr(args, "lr_retrieval", None),
        "lr_segmentation": getattr(args, "lr_segmentation", None),
        "topk": getattr(args, "topk", None),
        "theta": getattr(args, "theta", None),
        "fusion": getattr(args, "fusion", None),
        "fusion_tau": getattr(args, "fusion_tau", None),
        "guide_noise": getattr(args, "guide_noise", None),
        "noise_sigma": getattr(args, "noise_sigma", None),
        "noise_density": getattr(args, "noise_density", None),
        "noise_drop_rate": getattr(args, "noise_drop_rate", None),
        "backbone": getattr(args, "backbone", None),
        "embed_dim": getattr(args, "embed_dim", None),
        "train_manifest": getattr(args, "train_manifest", None),
        "test_manifest": getattr(args, "test_manifest", None),
        "gallery_manifest": getattr(args, "gallery_manifest", None),
    }
    if getattr(args, "dynamic_topk", False):
        mapping["dynamic_topk"] = True
    if getattr(args, "from_scratch", False):
        mapping["from_scratch"] = True
    if epochs_key is not None and getattr(args, "epochs", None) is not None:
        mapping[epochs_key] = args.epochs
    return mapping


def _prepare_training(args, epochs_key: str):
    resolved = resolve_config(args.config, _overrides_from_args(args, epochs_key),
                              preset=getattr(args, "preset", None))
    if not resolved["train_manifest"]:
        raise ValidationError("train_manifest is required")
    if not resolved["out_dir"]:
        raise ValidationError("out_dir is required")
    train_ds = load_dataset(resolved["train_manifest"])
    cfg = build_train_config(resolved)
    return resolved, cfg, train_ds


def _load_or_build(init_dir: Path | None, cfg: TrainConfig, dataset) -> tuple:
    """Returns (state, resumed_stage or None)."""
    if init_dir is not None and (init_dir / "retrieval.pt").is_file():
        state = load_checkpoint(init_dir, cfg, dataset.num_classes,
                                dataset.height, dataset.width)
        stage = json.loads((init_dir / "state.json").read_text()).get("stage")
        return state, stage
    state = build_models(cfg, dataset.num_classes, dataset.height, dataset.width)
    return state, None


def cmd_pretrain_retrieval(args) -> int:
    resolved, cfg, train_ds = _prepare_training(args, "epochs_pretrain_ret")
    out_dir = Path(resolved["out_dir"])
    init_dir = Path(args.init) if args.init else (out_dir if (out_dir / "retrieval.pt").is_file() else None)
    state, _ = _load_or_build(init_dir, cfg, train_ds)
    chash = write_resolved_config(resolved, out_dir)
    history = pretrain_retrieval(state.retrieval, train_ds, cfg)
    write_history_csv(history, out_dir / "history_retrieval.csv")
    state.epoch = 0
    save_checkpoint(state, cfg, out_dir, stage="pretrain-retrieval", config_hash=chash)
    last = history[-1]["loss"] if history else float("nan")
    print(f"pretrained retrieval for {cfg.epochs_pretrain_ret} epochs "
          f"(final contrastive loss {last:.4f}) -> {out_dir}")
    return EXIT_OK


def cmd_pretrain_seg(args) -> int:
    resolved, cfg, train_ds = _prepare_training(args, "epochs_pretrain_seg")
    out_dir = Path(resolved["out_dir"])
    init_dir = Path(args.init) if args.init else (out_dir if (out_dir / "retrieval.pt").is_file() else None)
    state, _ = _load_or_build(init_dir, cfg, train_ds)
    chash = write_resolved_config(resolved, out_dir)
    history = pretrain_segmentation(state.backbone, train_ds, cfg)
    state.snapshot_baseline()
    write_history_csv(history, out_dir / "history_segmentation.csv")
    state.epoch = 0
    save_checkpoint(state, cfg, out_dir, stage="pretrain-seg", config_hash=chash)
    last = history[-1]["loss"] if history else float("nan")
    print(f"pretrained segmentation for {cfg.epochs_pretrain_seg} epochs "
          f"(final loss {last:.4f}) -> {out_dir}")
    return EXIT_OK


def _resolve_gallery(resolved, cfg, train_ds):
    if cfg.gallery_source == "external":
        if not resolved["gallery_manifest"]:
            raise ValidationError("gallery_source = external requires gallery_manifest")
        gallery = load_dataset(resolved["gallery_manifest"])
        if (gallery.height, gallery.width) != (train_ds.height, train_ds.width) or \
                gallery.num_classes != train_ds.num_classes:
            raise ValidationError("gallery dataset geometry does not match the training set")
        return gallery
    return train_ds


def cmd_joint_train(args) -> int:
    resolved, cfg, train_ds = _prepare_training(args, "epochs_joint")
    out_dir = Path(resolved["out_dir"])
    gallery = _resolve_gallery(resolved, cfg, train_ds)

    init_dir = Path(args.init) if args.init else (out_dir if (out_dir / "retrieval.pt").is_file() else None)
    if init_dir is None and not cfg.from_scratch:
        raise ValidationError(
            "no checkpoint found to start from; run pretrain-retrieval and "
            "pretrain-seg first, pass --init, or set from_scratch = true"
        )
    state, prev_stage = _load_or_build(init_dir, cfg, train_ds)
    if prev_stage != "joint":
        state.epoch = 0  # starting the joint phase fresh from pretrained weights
        state.history = []
        state.opt_ret_state = None
        state.opt_seg_state = None
    chash = write_resolved_config(resolved, out_dir)

    def checkpoint_each_epoch(s):
        save_checkpoint(s, cfg, out_dir, stage="joint", config_hash=chash)
        write_history_csv(s.history, out_dir / "history_joint.csv")

    joint_train(state, train_ds, cfg, gallery=gallery, on_epoch=checkpoint_each_epoch)
    save_checkpoint(state, cfg, out_dir, stage="joint", config_hash=chash)
    write_history_csv(state.history, out_dir / "history_joint.csv")
    if state.kb is not None:
        save_kb_snapshot(state.kb, out_dir / "kb_snapshot")
    last = state.history[-1]["loss"] if state.history else float("nan")
    print(f"joint-trained to epoch {state.epoch} (final loss {last:.4f}) -> {out_dir}")
    return EXIT_OK


def _load_run(run_dir: Path, overrides: dict):
    cfg_file = run_dir / "config.resolved.txt"
    if not cfg_file.is_file():
        raise ValidationError(f"{run_dir} has no config.resolved.txt; is it a run directory?")
    for name in ("retrieval.pt", "segmentation.pt", "state.json"):
        if not (run_dir / name).is_file():
            raise ValidationError(f"missing checkpoint file {run_dir / name}")
    resolved = resolve_config(str(cfg_file), overrides)
    cfg = build_train_config(resolved)
    return resolved, cfg


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    overrides = {
        "test_manifest": args.test_manifest,
        "gallery_manifest": args.gallery_manifest,
        "guide_noise": args.guide_noise,
        "noise_sigma": args.noise_sigma,
        "noise_density": args.noise_density,
        "noise_drop_rate": args.noise_drop_rate,
        "theta": args.theta,
    }
    resolved, cfg = _load_run(run_dir, overrides)
    if not resolved["test_manifest"]:
        raise ValidationError("test_manifest is required (config key or --test-manifest)")
    test_ds = load_dataset(resolved["test_manifest"])
    train_ds = load_dataset(resolved["train_manifest"]) if resolved["train_manifest"] else None
    if train_ds is None and resolved["gallery_source"] == "train":
        raise ValidationError("run config has no train_manifest to use as the gallery")
    gallery = _resolve_gallery(resolved, cfg, train_ds)
    state = load_checkpoint(run_dir, cfg, test_ds.num_classes, test_ds.height,
                            test_ds.width)

    noise_cfg = None
    if resolved["guide_noise"] != "none":
        noise_cfg = NoiseConfig(kind=resolved["guide_noise"], sigma=resolved["noise_sigma"],
                                density=resolved["noise_density"],
                                drop_rate=resolved["noise_drop_rate"],
                                seed=resolved["noise_seed"])

    out_dir = Path(args.out) if args.out else run_dir

    def run_one(topk: int | None, dynamic: bool, tag: str):
        report = evaluate(state, test_ds, gallery, cfg, topk=topk, dynamic=dynamic,
                          theta=resolved["theta"] if dynamic else None,
                          noise_cfg=noise_cfg, include_baseline=True)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_json(out_dir / f"eval_{tag}.json")
        report.write_case_csv(out_dir / f"eval_{tag}_cases.csv")
        report.write_slice_csv(out_dir / f"eval_{tag}_slices.csv")
        if args.baseline and report.baseline_comparison is not None:
            write_delta_csv(report.baseline_comparison, out_dir / f"eval_{tag}_deltas.csv")
        agg = report.aggregate
        print(f"[{tag}] mean dice {agg['dice_mean']:.4f} +/- {agg['dice_std']:.4f}  "
              f"mean HD {agg['hd_mean']:.4f}  retrieval calls {report.meta['retrieval_calls']}")
        return report

    if args.sweep_topk:
        m = re.fullmatch(r"(\d+)\.\.(\d+)", args.sweep_topk)
        if not m:
            raise ValidationError(f"--sweep-topk expects 'A..B', got {args.sweep_topk!r}")
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo < 1 or hi < lo:
            raise ValidationError("--sweep-topk range must satisfy 1 <= A <= B")
        reports = {0: run_one(0, False, "k0")}
        for k in range(lo, hi + 1):
            reports[k] = run_one(k, False, f"k{k}")
        summary_path = out_dir / "sweep_summary.csv"
        with open(summary_path, "w", newline="") as f:
            import csv as _csv
            writer = _csv.writer(f)
            class_ids = sorted(int(c) for c in reports[0].aggregate["per_class_dice_mean"])
            writer.writerow(["k", "dice_mean", "dice_std", "hd_mean", "hd_std",
                             "retrieval_calls"] + [f"dice_{c}" for c in class_ids])
            for k in sorted(reports):
                agg = reports[k].aggregate
                writer.writerow([k, repr(agg["dice_mean"]), repr(agg["dice_std"]),
                                 repr(agg["hd_mean"]), repr(agg["hd_std"]),
                                 reports[k].meta["retrieval_calls"]]
                                + [repr(agg["per_class_dice_mean"][c]) for c in class_ids])
        print(f"sweep summary -> {summary_path}")
        return EXIT_OK

    if args.dynamic_topk:
        run_one(None, True, "dynamic")
    elif args.topk is not None:
        run_one(args.topk, False, f"k{args.topk}")
    else:
        run_one(cfg.retrieval.k, False, f"k{cfg.retrieval.k}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    run_dir = Path(args.run)
    resolved, cfg = _load_run(run_dir, {})
    snap_dir = run_dir / "kb_snapshot"
    if not (snap_dir / "index.json").is_file():
        raise ValidationError(f"no knowledge-base snapshot under {snap_dir}; "
                              "run joint-train first")
    m = re.fullmatch(r"([^/]+)/(ED|ES)/(\d+)", args.query)
    if not m:
        raise ValidationError(f"--query expects 'patient/phase/index', got {args.query!r}")
    pid, phase, idx = m.group(1), m.group(2), int(m.group(3))

    manifest = args.manifest or resolved["test_manifest"] or resolved["train_manifest"]
    if not manifest:
        raise ValidationError("no manifest to read the query slice from; pass --manifest")
    query_ds = load_dataset(manifest)
    record = query_ds.find(pid, phase, idx)  # KeyError -> validation exit

    emb, entries, index = load_kb_snapshot(snap_dir)
    state = load_checkpoint(run_dir, cfg, query_ds.num_classes, query_ds.height,
                            query_ds.width)
    state.retrieval.eval()
    with torch.no_grad():
        q = embed(state.retrieval, record.image).cpu().numpy().astype(np.float64)
    sims = emb.astype(np.float64) @ q

    keep = [i for i, e in enumerate(entries) if e["patient_id"] != pid]
    if not keep:
        raise RetrievalError("every snapshot entry shares the query patient; enlarge the gallery")
    keep.sort(key=lambda i: (-sims[i], entries[i]["patient_id"], entries[i]["phase"],
                             entries[i]["slice_index"]))
    top = keep[:min(args.k, len(keep))]

    print(f"query {pid}/{phase}/{idx}  (snapshot epoch {index['epoch_tag']}, "
          f"{len(entries)} entries, {len(keep)} candidates)")
    print(f"{'rank':>4}  {'patient':<10} {'phase':<5} {'slice':>5}  similarity")
    for rank, i in enumerate(top, start=1):
        e = entries[i]
        print(f"{rank:>4}  {e['patient_id']:<10} {e['phase']:<5} "
              f"{e['slice_index']:>5}  {sims[i]:.4f}")

    if args.panel:
        gallery_manifest = (resolved["gallery_manifest"]
                            if resolved["gallery_source"] == "external"
                            else resolved["train_manifest"])
        if not gallery_manifest:
            raise ValidationError("cannot render a panel without a gallery manifest")
        gallery_ds = load_dataset(gallery_manifest)
        guides = []
        for i in top:
            e = entries[i]
            g = gallery_ds.find(e["patient_id"], e["phase"], e["slice_index"])
            guides.append((np.asarray(g.image), np.asarray(g.mask),
                           f"{e['patient_id']}/{e['phase']}/{e['slice_index']}\n"
                           f"sim {sims[i]:.3f}"))
        out = retrieval_panel(np.asarray(record.image), f"query {pid}/{phase}/{idx}",
                              guides, args.panel)
        print(f"panel -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    runs = {}
    for run in args.runs:
        run_path = Path(run)
        try:
            reports = collect_reports(run_path)
        except (json.JSONDecodeError, KeyError) as e:
            raise ValidationError(f"malformed report in {run_path}: {e}") from e
        if not reports:
            raise ValidationError(f"{run_path} contains no eval_*.json reports")
        runs[run_path.name or str(run_path)] = reports

    out_dir.mkdir(parents=True, exist_ok=True)
    write_aggregate_table(runs, out_dir / "aggregate_table.csv")
    print(f"aggregate table -> {out_dir / 'aggregate_table.csv'}")

    comparisons = {}
    run_names = sorted(runs)
    if len(run_names) >= 2:
        ref_name = run_names[0]
        for other in run_names[1:]:
            common = sorted(set(runs[ref_name]) & set(runs[other]))
            if not common:
                raise ValidationError(
                    f"runs {ref_name} and {other} share no report names to compare")
            rep_name = common[0]
            comp = cross_run_comparison(runs[ref_name][rep_name], runs[other][rep_name])
            comparisons[f"{other}_vs_{ref_name}"] = comp
            write_comparison_csv(comp, out_dir / f"deltas_{other}_vs_{ref_name}.csv")
            print(f"{other} vs {ref_name} ({rep_name}): "
                  f"improved {comp['improved']}, degraded {comp['degraded']}, "
                  f"unchanged {comp['unchanged']}")

    formats = args.plot_formats
    written = []
    written += plot_dice_vs_k(runs, out_dir / "dice_vs_k", formats)
    written += plot_per_class_dice(runs, out_dir / "per_class_dice", formats)
    written += plot_improvement_counts(comparisons, out_dir / "improvement_counts", formats)
    for path in written:
        print(f"plot -> {path}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named configuration preset")
    p.add_argument("--out", help="run output directory (overrides out_dir)")
    p.add_argument("--init", help="directory with checkpoints to start from")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--test-manifest", dest="test_manifest")
    p.add_argument("--gallery-manifest", dest="gallery_manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="epoch count for this stage")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-retrieval", dest="lr_retrieval", type=float)
    p.add_argument("--lr-segmentation", dest="lr_segmentation", type=float)
    p.add_argument("--backbone", choices=sorted(BACKBONES))
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--dynamic-topk", dest="dynamic_topk", action="store_true")
    p.add_argument("--theta", type=float)
    p.add_argument("--fusion", choices=[s.value for s in FusionStrategy])
    p.add_argument("--fusion-tau", dest="fusion_tau", type=float)
    p.add_argument("--guide-noise", dest="guide_noise", choices=NOISE_KINDS)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--noise-density", dest="noise_density", type=float)
    p.add_argument("--noise-drop-rate", dest="noise_drop_rate", type=float)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragseg",
        description="Retrieval-augmented guided segmentation: toy data, "
                    "two-stage training, evaluation, and reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-patients", dest="num_patients", type=int, default=8)
    p.add_argument("--slices-per-phase", dest="slices_per_phase", type=int, default=3)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="P", help="patient id prefix")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("validate", help="validate an on-disk dataset")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pretrain-retrieval", help="contrastive pretraining of the retrieval encoder")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain_retrieval)

    p = sub.add_parser("pretrain-seg", help="supervised pretraining of the segmentation backbone")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain_seg)

    p = sub.add_parser("joint-train", help="joint retrieval-guided training of both networks")
    _add_train_flags(p)
    p.set_defaults(func=cmd_joint_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True, help="run directory with checkpoints")
    p.add_argument("--out", help="directory for report files (default: run dir)")
    p.add_argument("--test-manifest", dest="test_manifest")
    p.add_argument("--gallery-manifest", dest="gallery_manifest")
    p.add_argument("--topk", type=int, help="fixed k; 0 evaluates the pure baseline")
    p.add_argument("--dynamic-topk", dest="dynamic_topk", action="store_true")
    p.add_argument("--theta", type=float)
    p.add_argument("--sweep-topk", dest="sweep_topk", help="e.g. 1..10; also emits the k=0 baseline")
    p.add_argument("--baseline", action="store_true",
                   help="emit per-case deltas against the no-retrieval baseline")
    p.add_argument("--guide-noise", dest="guide_noise", choices=NOISE_KINDS)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--noise-density", dest="noise_density", type=float)
    p.add_argument("--noise-drop-rate", dest="noise_drop_rate", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="inspect top-k retrieval for one query slice")
    p.add_argument("--run", required=True)
    p.add_argument("--query", required=True, help="patient/phase/index, e.g. P003/ED/1")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--manifest", help="dataset to read the query slice from")
    p.add_argument("--panel", help="write a side-by-side overlay image here")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("report", help="comparison tables and plots across runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--plot-formats", dest="plot_formats", nargs="+", default=["png"])
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, LoadError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RetrievalError, RuntimeError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
