"""Command-line entry point.

Subcommands: ``dataset {stats|validate|synth}``, ``train``, ``generate``,
``evaluate``, ``selfcheck``.  Every command is deterministic given its config
and seed.  Unknown arguments of the form ``--section.key value`` (or
``section.key=value``) are treated as dotted config overrides.  The
``LRCM_THREADS`` environment variable caps worker parallelism for per-sample
feature extraction.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diffusion, metrics, training
from .config import RunConfig, apply_overrides
from .denoiser import Denoiser, TextEmbedder
from .errors import ConfigError, ContractViolation, LrcmError
from .mtmm import autoregressive_generate
from .selfcheck import run_selfcheck


def worker_count() -> int:
    raw = os.environ.get("LRCM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _split_overrides(extras: list[str]) -> list[str]:
    """Turn leftover argv like ['--a.b', '3'] or ['a.b=3'] into 'a.b=3' pairs."""
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if "=" in token:
            pairs.append(token.lstrip("-"))
            i += 1
            continue
        if token.startswith("--") and "." in token and i + 1 < len(extras):
            pairs.append(f"{token.lstrip('-')}={extras[i + 1]}")
            i += 2
            continue
        raise ConfigError(f"unrecognized argument {token!r}")
    return pairs


def _load_config(path: str | None, extras: list[str]) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig().validate()
    overrides = _split_overrides(extras)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def _embedder(cfg: RunConfig) -> TextEmbedder:
    if cfg.paths.embeddings:
        return TextEmbedder.from_file(cfg.paths.embeddings)
    return TextEmbedder(dim=cfg.model.text_dim)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def cmd_dataset_stats(args, extras) -> int:
    cfg = _load_config(args.config, extras)
    manifest = args.manifest or cfg.paths.manifest
    samples = ds.load_manifest(manifest)
    stats = ds.compute_stats(samples)
    out_dir = Path(args.out_dir or cfg.paths.reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out_dir / "dataset_stats.csv"
    with open(stats_path, "w") as fh:
        fh.write("genre,full_time_minutes,global_tokens,local_tokens,all_tokens\n")
        for row in stats:
            fh.write(f"{row.genre},{row.full_time_minutes:.4f},{row.global_token_count},"
                     f"{row.local_token_count},{row.all_token_count}\n")
    freq_path = out_dir / "token_frequencies.csv"
    with open(freq_path, "w") as fh:
        fh.write("genre,scope,token,count\n")
        for genre, scope, token, count in ds.token_frequencies(samples):
            fh.write(f"{genre},{scope},{token},{count}\n")
    print(f"{'genre':<12} {'minutes':>8} {'global':>7} {'local':>6} {'all':>6}")
    for row in stats:
        print(f"{row.genre:<12} {row.full_time_minutes:>8.1f} {row.global_token_count:>7} "
              f"{row.local_token_count:>6} {row.all_token_count:>6}")
    print(f"wrote {stats_path} and {freq_path}")
    return 0


def cmd_dataset_validate(args, extras) -> int:
    cfg = _load_config(args.config, extras)
    manifest = args.manifest or cfg.paths.manifest
    try:
        samples = ds.load_manifest(manifest)
    except LrcmError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 1
    problems = ds.validate_samples(samples)
    for p in problems:
        print(f"violation: {p}", file=sys.stderr)
    print(f"validated {len(samples)} samples, {len(problems)} violations")
    return 1 if problems else 0


def cmd_dataset_synth(args, extras) -> int:
    spec = ds.ToyDatasetSpec(
        clips=args.clips, frames=args.frames, pose_dim=args.pose_dim,
        genres=tuple(args.genres.split(",")) if args.genres else ds.GENRES[:4],
    )
    samples = ds.synthesize_toy_dataset(spec, args.seed)
    manifest = ds.write_dataset(samples, args.out_dir)
    print(f"wrote {len(samples)} clips to {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _checkpoint_stem(cfg: RunConfig, phase: int) -> Path:
    return Path(cfg.paths.checkpoints) / f"phase{phase}"


def cmd_train(args, extras) -> int:
    cfg = _load_config(args.config, extras)
    if args.phase is not None:
        cfg.training.phase = args.phase
        cfg.validate()
    phase = cfg.training.phase

    model_cfg = cfg.model.denoiser_config()
    if phase == 3 and not model_cfg.mtmm_enabled:
        model_cfg.mtmm_enabled = True  # phase 3 trains the memory module
    model = Denoiser(model_cfg, seed=cfg.training.seed)

    stem = _checkpoint_stem(cfg, phase)
    start_step = 0
    resume_opt = None
    if Path(f"{stem}.json").exists():
        ckpt = training.load_checkpoint(stem)
        training.apply_checkpoint(model, ckpt)
        start_step = int(ckpt.manifest["step"])
        resume_opt = ckpt.optimizer_arrays
        print(f"resuming phase {phase} from step {start_step}")
    elif phase > 1:
        prev = _checkpoint_stem(cfg, phase - 1)
        if not Path(f"{prev}.json").exists():
            print(f"phase {phase} requires checkpoint {prev}.json from phase {phase - 1}",
                  file=sys.stderr)
            return 1
        missing = training.apply_checkpoint(model, training.load_checkpoint(prev))
        if missing:
            print(f"initialized {len(missing)} new parameters not present in phase "
                  f"{phase - 1} checkpoint")

    samples = ds.load_manifest(cfg.paths.manifest)
    plan = training.phase_plan(phase, learning_rate=cfg.training.lr,
                               batch_size=cfg.training.batch)
    sched = diffusion.make_schedule(cfg.diffusion.beta_min, cfg.diffusion.beta_max,
                                    cfg.diffusion.steps)
    log_path = Path(cfg.paths.reports) / f"train_phase{phase}.csv"
    result = training.run_phase(
        plan, model, samples, steps=cfg.training.steps, seed=cfg.training.seed,
        sched=sched, loss_cfg=cfg.loss.loss_config(), embedder=_embedder(cfg),
        condition_dropout=cfg.diffusion.condition_dropout,
        noise_inject_p=cfg.training.noise_inject_p,
        noise_inject_sigma=cfg.training.noise_inject_sigma,
        weight_decay=cfg.training.weight_decay,
        log_path=log_path, checkpoint_stem=stem, config_dict=cfg.to_dict(),
        start_step=start_step, resume_optimizer=resume_opt,
        checkpoint_every=cfg.training.checkpoint_every,
    )
    print(f"phase {phase}: loss {result.initial_loss:.4f} -> {result.final_loss:.4f} "
          f"over {cfg.training.steps} steps; checkpoint at {stem}.json")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _config_mismatch(run_cfg: RunConfig, ckpt_cfg: dict) -> list[str]:
    mine = run_cfg.to_dict()
    diffs = []
    for section in ("model", "diffusion"):
        saved = ckpt_cfg.get(section, {})
        for key, value in mine[section].items():
            if key in saved and saved[key] != value:
                diffs.append(f"{section}.{key}: config={value!r} checkpoint={saved[key]!r}")
    return diffs


def cmd_generate(args, extras) -> int:
    ckpt = training.load_checkpoint(Path(args.checkpoint).with_suffix(""))
    if args.config:
        cfg = _load_config(args.config, extras)
        diffs = _config_mismatch(cfg, ckpt.manifest.get("config", {}))
        if diffs:
            print("checkpoint/config mismatch:\n  " + "\n  ".join(diffs), file=sys.stderr)
            return 1
    else:
        cfg = RunConfig.from_dict(ckpt.manifest.get("config", {})) \
            if ckpt.manifest.get("config") else RunConfig().validate()
        if extras:
            apply_overrides(cfg, _split_overrides(extras))

    model = Denoiser(cfg.model.denoiser_config(), seed=cfg.training.seed)
    training.apply_checkpoint(model, ckpt)

    audio = ds.read_audio(args.audio)
    length = args.length or audio.frames.shape[0]
    if length > audio.frames.shape[0]:
        print(f"length {length} exceeds audio duration {audio.frames.shape[0]} frames",
              file=sys.stderr)
        return 1

    embedder = _embedder(cfg)
    global_vec = embedder.embed(args.text) if args.text.strip() else None
    local_rows = None
    if args.local_annotation:
        ann = ds.parse_annotation(Path(args.local_annotation).read_text())
        mask = ds.align_local_tokens(ann, length, audio.fps)
        local_rows = np.zeros((length, embedder.dim))
        for f, tokens in enumerate(mask):
            if tokens:
                local_rows[f] = embedder.embed(", ".join(tokens))

    sched = diffusion.make_schedule(cfg.diffusion.beta_min, cfg.diffusion.beta_max,
                                    cfg.diffusion.steps)
    guidance = cfg.diffusion.guidance()
    from .denoiser import ConditionEmbeddings

    cond = ConditionEmbeddings(c_a=audio.frames[:length], c_t_global=global_vec,
                               c_t_local=local_rows)
    cond.validate()

    if length <= cfg.model.t_seq:
        motion = diffusion.sample(model, length, cond.audio(), cond.text(),
                                  guidance, sched, seed=args.seed,
                                  clip_x0=cfg.diffusion.clip_x0)
    else:
        motion = autoregressive_generate(model, length, cond, guidance, sched,
                                         memory_frames=cfg.model.memory_frames,
                                         seed=args.seed, clip_x0=cfg.diffusion.clip_x0)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ds.write_motion(out_path, ds.MotionSequence(motion, fps=audio.fps))
    print(f"wrote {length} frames to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _load_eval_dir(path: Path) -> list[metrics.EvalSample]:
    files = sorted(path.glob("*.mot"))
    if not files:
        raise ContractViolation(f"no .mot files in {path}")
    bad = []

    def load(fp: Path):
        try:
            motion = ds.read_motion(fp)
        except LrcmError as exc:
            bad.append(f"{fp}: {exc}")
            return None
        beats = None
        aud = fp.with_suffix(".aud")
        if aud.exists():
            beats = ds.read_audio(aud).beat_frames
        return metrics.EvalSample(motion=motion, music_beats=beats)

    samples = _parallel_map(load, files)
    if bad:
        raise ContractViolation("unreadable files:\n  " + "\n  ".join(bad))
    return [s for s in samples if s is not None]


def cmd_evaluate(args, extras) -> int:
    cfg = _load_config(args.config, extras)
    try:
        generated = _load_eval_dir(Path(args.generated))
        reference = _load_eval_dir(Path(args.reference))
    except LrcmError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    report = metrics.evaluate(generated, reference, cfg.metrics.metric_config())
    out_dir = Path(args.out_dir or cfg.paths.reports)
    json_path, csv_path = metrics.write_report(report, out_dir)

    def cell(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(f"{'metric':<14} {'value':>12}")
    for key, value in report.to_dict().items():
        if key == "flags":
            continue
        print(f"{key:<14} {cell(value):>12}")
    if report.flags:
        print("flags: " + ", ".join(sorted(report.flags)))
    print(f"wrote {json_path} and {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------

def cmd_selfcheck(args, extras) -> int:
    result = run_selfcheck(perturb_gradient=args.perturb_gradient)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0 if result["ok"] else 1


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrcm",
                                     description="dance motion generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("dataset", help="dataset tooling")
    data_sub = p_data.add_subparsers(dest="subcommand", required=True)

    p_stats = data_sub.add_parser("stats", help="per-genre statistics CSVs")
    p_stats.add_argument("--manifest")
    p_stats.add_argument("--config")
    p_stats.add_argument("--out-dir")
    p_stats.set_defaults(fn=cmd_dataset_stats)

    p_val = data_sub.add_parser("validate", help="check every sample invariant")
    p_val.add_argument("--manifest")
    p_val.add_argument("--config")
    p_val.set_defaults(fn=cmd_dataset_validate)

    p_synth = data_sub.add_parser("synth", help="write a synthetic toy dataset")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.add_argument("--clips", type=int, default=4)
    p_synth.add_argument("--frames", type=int, default=96)
    p_synth.add_argument("--pose-dim", type=int, default=8)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--genres")
    p_synth.set_defaults(fn=cmd_dataset_synth)

    p_train = sub.add_parser("train", help="run one training phase")
    p_train.add_argument("--config")
    p_train.add_argument("--phase", type=int, choices=(1, 2, 3))
    p_train.set_defaults(fn=cmd_train)

    p_gen = sub.add_parser("generate", help="sample a motion file")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--config")
    p_gen.add_argument("--audio", required=True)
    p_gen.add_argument("--text", default="")
    p_gen.add_argument("--local-annotation")
    p_gen.add_argument("--length", type=int)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=cmd_generate)

    p_eval = sub.add_parser("evaluate", help="score generated motions against a reference")
    p_eval.add_argument("--generated", required=True)
    p_eval.add_argument("--reference", required=True)
    p_eval.add_argument("--config")
    p_eval.add_argument("--out-dir")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_check = sub.add_parser("selfcheck", help="run the fast oracle suite")
    p_check.add_argument("--perturb-gradient", metavar="CHECK",
                         help="test hook: corrupt one analytic gradient")
    p_check.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.fn(args, extras)
    except LrcmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
