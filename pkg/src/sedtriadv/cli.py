"""Command-line entry point wiring the pipeline together: toy-corpus
generation, training in the six ablation modes, evaluation with figures,
single-file prediction, and pseudo-label inspection.

Exit code is 0 iff the command succeeded; package errors print one line to
stderr and exit 1."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import (EVENT_CLASS_NAMES, SPLIT_STRONG, SPLIT_UNLABELED,
                     SPLIT_VALIDATION, SPLIT_WEAK, CorpusCounts,
                     CorpusManifest, clip_spectrogram, generate_toy_corpus,
                     load_manifest)
from .errors import CheckpointError, ConfigError, RefuseOverwrite, SedError
from .evaluator import (DecodeConfig, EventMatchConfig, decode, evaluate_run,
                        format_events_tsv, format_report_table,
                        write_events_tsv, write_report)
from .figures import render_f1_bars, render_loss_curves, render_mask_coverage
from .frontend import FrontendConfig, log_mel, read_wav, toy_frontend_config
from .model import LABELER_A, LABELER_B, SedModel, ModelConfig, toy_scale_config
from .trainer import (MODES, TrainConfig, load_masks, mask_statistics,
                      pseudo_label_clip)
from .trainer import run as train_run

# keeps the applied BLAS limit alive for the process lifetime
_thread_limiter = None


def _apply_thread_limit(threads: int | None) -> None:
    global _thread_limiter
    if threads is None:
        env = os.environ.get("SEDTRIADV_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigError(
                    f"SEDTRIADV_THREADS must be an integer, got {env!r}") from exc
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    _thread_limiter = threadpool_limits(limits=threads)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Union of all tunable sections. The JSON layout mirrors a run
    directory's config.json ({"train", "model", "frontend"}) plus optional
    "decode" and "match" sections; unknown sections or keys are rejected.
    A missing model section means: size the default architecture from the
    corpus at training time."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig | None = None
    frontend: FrontendConfig = field(default_factory=toy_frontend_config)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    match: EventMatchConfig = field(default_factory=EventMatchConfig)

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        cfg = replace(base) if base is not None else cls()
        if "train" in d:
            cfg.train = TrainConfig.from_dict(d["train"])
        if d.get("model") is not None:
            cfg.model = ModelConfig.from_dict(d["model"])
        if "frontend" in d:
            cfg.frontend = FrontendConfig.from_dict(d["frontend"])
        if "decode" in d:
            cfg.decode = _plain_section(DecodeConfig, d["decode"])
        if "match" in d:
            cfg.match = _plain_section(EventMatchConfig, d["match"])
        return cfg

    @classmethod
    def load(cls, path: str | Path,
             base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_dict(_read_json_object(path), base)


def _plain_section(section_cls, d: dict):
    known = {f.name for f in fields(section_cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(
            f"unknown {section_cls.__name__} keys {sorted(unknown)}")
    return section_cls(**d)


def _read_json_object(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no config file at {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be a JSON object in {p}")
    return payload


def _load_run(run_dir: Path) -> tuple[RunConfig, Path]:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"no config.json under {run_dir}")
    ckpt = run_dir / "final.ckpt"
    if not ckpt.exists():
        raise CheckpointError(f"no final.ckpt under {run_dir}")
    return RunConfig.load(cfg_path), ckpt


def _load_model(run_cfg: RunConfig, ckpt: Path) -> SedModel:
    if run_cfg.model is None:
        raise ConfigError("run config lacks a model section")
    return SedModel.load(ckpt, run_cfg.model, run_cfg.frontend.n_mels)


def _check_class_count(model: SedModel, manifest: CorpusManifest) -> None:
    if model.cfg.n_classes != manifest.n_classes:
        raise ConfigError(
            f"model predicts {model.cfg.n_classes} classes but the corpus "
            f"defines {manifest.n_classes}")


def _class_names(manifest: CorpusManifest | None, n_classes: int) -> list[str]:
    if manifest is not None:
        if manifest.n_classes != n_classes:
            raise ConfigError(
                f"manifest has {manifest.n_classes} classes, model has "
                f"{n_classes}")
        return manifest.class_names
    if n_classes <= len(EVENT_CLASS_NAMES):
        return EVENT_CLASS_NAMES[:n_classes]
    return [f"class_{k}" for k in range(n_classes)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _parse_counts(text: str) -> CorpusCounts:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--counts wants nS,nW,nU,nVal, got {text!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"--counts wants four integers, got {text!r}") from exc
    if any(v < 0 for v in values):
        raise ConfigError(f"--counts must be non-negative, got {text!r}")
    return CorpusCounts(*values)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise RefuseOverwrite(
            f"{out} already holds files; rerun with --force to overwrite")
    counts = _parse_counts(args.counts)
    manifest = generate_toy_corpus(out, seed=args.seed, n_classes=args.classes,
                                   counts=counts, domain_gap=args.gap)
    for name in (SPLIT_STRONG, SPLIT_WEAK, SPLIT_UNLABELED, SPLIT_VALIDATION):
        print(f"{name}\t{len(manifest.split(name))}")
    print(f"total\t{len(manifest.clips)}")
    print(f"corpus\t{out}")
    return 0


_TRAIN_OVERRIDES = ("seed", "batch_size", "lr", "alpha", "orth_weight",
                    "agree_threshold", "iters_phase1", "iters_phase2")


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    run_cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_dict = run_cfg.train.to_dict()
    if args.mode is not None:
        adv_mode, tri = MODES[args.mode]
        train_dict["adv_mode"] = adv_mode
        train_dict["tri_training"] = tri
    for name in _TRAIN_OVERRIDES:
        value = getattr(args, name)
        if value is not None:
            train_dict[name] = value
    train_cfg = TrainConfig.from_dict(train_dict)
    model_cfg = run_cfg.model
    if model_cfg is None:
        model_cfg = toy_scale_config(n_classes=manifest.n_classes)
    result = train_run(train_cfg, model_cfg, run_cfg.frontend, manifest,
                       args.out, cache_dir=args.cache)
    print(f"mode\t{train_cfg.mode}")
    print(f"steps\t{train_cfg.iters_phase1 + train_cfg.iters_phase2}")
    print(f"final\t{result.final_path}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    run_cfg, ckpt = _load_run(run_dir)
    if args.config:
        run_cfg = RunConfig.load(args.config, base=run_cfg)
    manifest = load_manifest(args.data)
    model = _load_model(run_cfg, ckpt)
    _check_class_count(model, manifest)
    report, rows = evaluate_run(model, manifest, run_cfg.frontend,
                                run_cfg.decode, run_cfg.match,
                                split=args.split, cache_dir=args.cache)
    out = run_dir / f"eval_{args.split}"
    write_report(out, report)
    write_events_tsv(out / "events.tsv", rows, manifest.class_names)
    render_f1_bars(report, out / "f1_per_class.png")
    log_path = run_dir / "log.jsonl"
    if log_path.exists():
        render_loss_curves(log_path, out / "loss_curves.png")
    masks_path = run_dir / "masks.bin"
    if masks_path.exists():
        stats = mask_statistics(load_masks(masks_path), manifest.n_classes)
        render_mask_coverage(stats, manifest.class_names,
                             out / "mask_coverage.png")
    print(format_report_table(report))
    print(f"report\t{out}")
    return 0


def cmd_predict(args) -> int:
    run_dir = Path(args.run)
    run_cfg, ckpt = _load_run(run_dir)
    model = _load_model(run_cfg, ckpt)
    manifest = load_manifest(args.data) if args.data else None
    names = _class_names(manifest, model.cfg.n_classes)
    spec = log_mel(read_wav(args.wav), run_cfg.frontend)
    pred = model.predict(spec.frames.astype(np.float32), spec.frame_hop_s)
    events = decode(pred, run_cfg.decode)
    rows = [(Path(args.wav).stem, e) for e in events]
    text = format_events_tsv(rows, names)
    if args.out:
        Path(args.out).write_text(text)
        print(f"events\t{args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_pseudo_label(args) -> int:
    run_dir = Path(args.run)
    run_cfg, ckpt = _load_run(run_dir)
    manifest = load_manifest(args.data)
    model = _load_model(run_cfg, ckpt)
    _check_class_count(model, manifest)
    masks_path = run_dir / "masks.bin"
    if masks_path.exists():
        source = "masks.bin"
        masks = load_masks(masks_path)
    else:
        source = "recomputed"
        masks = _recompute_masks(model, manifest, run_cfg, args.cache)
    if not masks:
        raise ConfigError("no weak or unlabeled clips to pseudo-label")
    stats = mask_statistics(masks, manifest.n_classes)
    payload = {
        "source": source,
        "n_clips": len(masks),
        "agree_threshold": run_cfg.train.agree_threshold,
        "classes": {name: stats[k]
                    for k, name in enumerate(manifest.class_names)},
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    render_mask_coverage(stats, manifest.class_names, out.with_suffix(".png"))
    for k, name in enumerate(manifest.class_names):
        s = stats[k]
        print(f"{name}\tpos {s['pos_pct']:.1f}%\tneg {s['neg_pct']:.1f}%\t"
              f"ignore {s['ignore_pct']:.1f}%")
    print(f"masks\t{out}")
    return 0


def _recompute_masks(model: SedModel, manifest: CorpusManifest,
                     run_cfg: RunConfig, cache_dir):
    """Pseudo-label the weak and unlabeled splits from the checkpoint's
    labeler heads (used when the run predates phase 2 or was not a
    labeler-pair mode)."""
    masks = {}
    for split, use_weak in ((SPLIT_WEAK, True), (SPLIT_UNLABELED, False)):
        for clip in manifest.split(split):
            spec = clip_spectrogram(manifest, clip, run_cfg.frontend, cache_dir)
            frames = spec.frames.astype(np.float32)
            p1 = model.predict(frames, spec.frame_hop_s, head=LABELER_A)
            p2 = model.predict(frames, spec.frame_hop_s, head=LABELER_B)
            masks[clip.id] = pseudo_label_clip(
                p1.frame_probs, p2.frame_probs, p1.clip_probs, p2.clip_probs,
                run_cfg.train.agree_threshold,
                weak=clip.weak if use_weak else None)
    return masks


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS worker threads (default: SEDTRIADV_THREADS "
                             "env var, else all cores)")

    parser = argparse.ArgumentParser(
        prog="sedtriadv",
        description="Weakly-labeled sound event detection: corpus generation, "
                    "training, evaluation, prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize a labeled toy corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4,
                   help="number of event classes (max 8)")
    p.add_argument("--gap", type=float, default=0.8,
                   help="synthetic/real domain gap in [0, 1]")
    p.add_argument("--counts", default="200,150,400,100",
                   help="clip counts as nS,nW,nU,nVal")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train one configuration end to end")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--mode", choices=sorted(MODES), default=None,
                   help="ablation mode (default: from --config, else baseline)")
    p.add_argument("--config", default=None,
                   help="JSON config file; explicit flags override it")
    p.add_argument("--cache", default=None, help="spectrogram cache directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None,
                   help="gradient-reversal strength")
    p.add_argument("--orth-weight", type=float, dest="orth_weight",
                   default=None)
    p.add_argument("--agree-threshold", type=float, dest="agree_threshold",
                   default=None)
    p.add_argument("--iters-phase1", type=int, dest="iters_phase1",
                   default=None)
    p.add_argument("--iters-phase2", type=int, dest="iters_phase2",
                   default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a run on a strongly labeled split")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default=SPLIT_VALIDATION)
    p.add_argument("--config", default=None,
                   help="JSON overrides (decode/match sections)")
    p.add_argument("--cache", default=None, help="spectrogram cache directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="decode events for one WAV file")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", default=None,
                   help="write TSV here instead of stdout")
    p.add_argument("--data", default=None,
                   help="corpus directory supplying class names")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pseudo-label", parents=[common],
                       help="dump pseudo-label coverage statistics")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="statistics JSON to write")
    p.add_argument("--cache", default=None, help="spectrogram cache directory")
    p.set_defaults(func=cmd_pseudo_label)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_limit(args.threads)
        return args.func(args)
    except SedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
