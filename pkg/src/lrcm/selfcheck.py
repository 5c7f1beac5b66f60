"""Fast built-in oracle suite: gradient checks for every block type, the
scan/kernel equivalence, metric closed forms, and parser round-trips.

Runs in well under a minute and reports machine-parseable JSON.  A perturb
hook corrupts one analytic gradient on purpose so callers can verify the
checker actually detects disagreement.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import dataset as ds
from . import diffusion, metrics, ssm
from . import numerics as nm
from .denoiser import (
    AudioConformer, CrossConformer, Denoiser, DenoiserConfig, GatedTanhUnit,
    TextCondition,
)
from .mtmm import MotionMemory, MtmmBlock

GRAD_TOL = 1e-4


def _grad_check(f, params, perturb: bool) -> tuple[bool, str]:
    with nm.Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    if perturb:
        analytic[0] = analytic[0] + 1e-2
    err = nm.max_relative_error(analytic, nm.central_differences(f, params, 1e-5))
    return err < GRAD_TOL, f"max relative error {err:.3g}"


def check_grad_audio_conformer(perturb=False):
    rng = np.random.default_rng(11)
    cfg = DenoiserConfig(pose_dim=4, d_model=8, n_blocks=1, heads=2, conv_kernel=3,
                         t_seq=6, text_dim=8, text_bottleneck=4, time_dim=8)
    block = AudioConformer(cfg, rng)
    x, ap, tgt = rng.standard_normal((6, 8)), rng.standard_normal((6, 8)), rng.standard_normal((6, 8))

    def f():
        return nm.mean_(nm.square(nm.sub(block(nm.tensor(x), nm.tensor(ap)), tgt)))

    return _grad_check(f, list(block.params().values()), perturb)


def check_grad_cross_conformer(perturb=False):
    rng = np.random.default_rng(12)
    cfg = DenoiserConfig(pose_dim=4, d_model=8, n_blocks=1, heads=2, conv_kernel=3,
                         t_seq=6, text_dim=8, text_bottleneck=4, time_dim=8)
    block = CrossConformer(cfg, rng)
    x, txt, tgt = rng.standard_normal((6, 8)), rng.standard_normal((6, 8)), rng.standard_normal((6, 8))

    def f():
        return nm.mean_(nm.square(nm.sub(block(nm.tensor(x), nm.tensor(txt)), tgt)))

    return _grad_check(f, list(block.params().values()), perturb)


def check_grad_gtu(perturb=False):
    rng = np.random.default_rng(13)
    cfg = DenoiserConfig(pose_dim=4, d_model=8, n_blocks=1, heads=2, conv_kernel=3,
                         t_seq=6, text_dim=8, text_bottleneck=4, time_dim=8)
    unit = GatedTanhUnit(cfg, rng)
    x, tgt = rng.standard_normal((6, 8)), rng.standard_normal((6, 16))

    def f():
        a, b = unit(nm.tensor(x))
        return nm.mean_(nm.square(nm.sub(nm.concat([a, b], axis=1), tgt)))

    return _grad_check(f, list(unit.params().values()), perturb)


def check_grad_selective_scan(perturb=False):
    rng = np.random.default_rng(14)
    layer = ssm.SelectiveSSM(channels=3, state=2, rng=rng)
    x, tgt = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))

    def f():
        return nm.mean_(nm.square(nm.sub(layer(x), tgt)))

    return _grad_check(f, list(layer.params().values()), perturb)


def check_grad_mtmm(perturb=False):
    rng = np.random.default_rng(15)
    block = MtmmBlock(d_model=8, state=2, memory_frames=3, t_seq=6, conv_kernel=3, rng=rng)
    x = rng.standard_normal((6, 8))
    mem = MotionMemory(rng.standard_normal((3, 8)))
    tgt = rng.standard_normal((6, 16))

    def f():
        a, b = block(nm.tensor(x), mem)
        return nm.mean_(nm.square(nm.sub(nm.concat([a, b], axis=1), tgt)))

    return _grad_check(f, list(block.params().values()), perturb)


def check_grad_denoiser(perturb=False):
    rng = np.random.default_rng(16)
    cfg = DenoiserConfig(pose_dim=4, d_model=8, n_blocks=1, heads=2, conv_kernel=3,
                         t_seq=6, text_dim=8, text_bottleneck=4, time_dim=8,
                         mtmm_enabled=True, memory_frames=3, ssm_state=2)
    model = Denoiser(cfg, seed=3)
    model.out_proj.w.data = rng.normal(0, 0.3, model.out_proj.w.shape)
    x, ca = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    ct = TextCondition(rng.standard_normal(8), rng.standard_normal((6, 8)))
    _, mem = model(x, 1, ca, ct, capture_memory=True)
    tgt = rng.standard_normal((6, 4))

    def f():
        pred = model(x, 3, ca, ct, memory=mem)
        pred_null = model(x, 3, None, None, memory=mem)
        return nm.mean_(nm.square(nm.sub(pred, tgt))) + nm.mean_(nm.square(nm.sub(pred_null, 0.5 * tgt)))

    return _grad_check(f, list(model.params().values()), perturb)


def check_scan_kernel_equivalence(perturb=False):
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 9))
        sys_c = ssm.ContinuousSSM(a_diag=-rng.uniform(0.05, 3.0, n),
                                  b=rng.standard_normal(n), c=rng.standard_normal(n),
                                  delta=float(rng.uniform(0.05, 1.0)))
        sys_d = ssm.discretize_zoh(sys_c)
        length = int(rng.integers(4, 65))
        x = rng.standard_normal(length)
        gap = np.abs(ssm.scan(sys_d, x)
                     - ssm.apply_kernel(x, ssm.build_kernel(sys_d, length))).max()
        worst = max(worst, float(gap))
    return worst < 1e-10, f"max scan/kernel gap {worst:.3g}"


def check_schedule_constants(perturb=False):
    sched = diffusion.make_schedule(0.01, 0.7, 200)
    ok = (abs(sched.beta[1] - 0.01) < 1e-15 and abs(sched.beta[200] - 0.7) < 1e-15
          and np.abs(sched.alpha_bar[1:] ** 2 + sched.beta_bar[1:] ** 2 - 1.0).max() < 1e-12)
    return ok, "endpoints and variance preservation"


def check_metric_closed_forms(perturb=False):
    cfg = metrics.MetricConfig()
    g_std = metrics.FeatureGaussian(mu=[0.0], sigma=[[1.0]], n=5)
    g_shift = metrics.FeatureGaussian(mu=[1.0], sigma=[[1.0]], n=5)
    g_wide = metrics.FeatureGaussian(mu=[0.0], sigma=[[4.0]], n=5)
    checks = [
        abs(metrics.fid(g_std, g_shift) - 1.0) < 1e-9,
        abs(metrics.fid(g_std, g_wide) - 1.0) < 1e-9,
        abs(metrics.beat_alignment_score([5, 25], [5, 25], cfg) - 1.0) < 1e-12,
        abs(metrics.beat_alignment_score([14, 34], [5, 25], cfg) - math.exp(-0.5)) < 1e-9,
        abs(metrics.length_regularity([1, 3]) - 0.5) < 1e-15,
    ]
    rng = np.random.default_rng(18)
    feats = [rng.standard_normal(4) for _ in range(5)]
    brute = float(np.mean([np.linalg.norm(feats[i] - feats[j])
                           for i in range(5) for j in range(i + 1, 5)]))
    checks.append(abs(metrics.diversity(feats, 10 ** 6, rng) - brute) < 1e-12)
    return all(checks), f"{sum(checks)}/{len(checks)} closed forms"


def _pff_oracle(frames: np.ndarray, cfg: metrics.MetricConfig) -> float:
    speeds = np.linalg.norm(np.diff(frames, axis=0), axis=1)
    theta = np.percentile(speeds, cfg.pff_percentile)
    frozen = 0
    run = 0
    for s in list(speeds) + [np.inf]:
        if s < theta:
            run += 1
        else:
            if cfg.pff_min_frames <= run <= cfg.pff_max_frames:
                frozen += run
            run = 0
    return frozen / frames.shape[0]


def check_pff_run_scanner(perturb=False):
    rng = np.random.default_rng(19)
    cfg = metrics.MetricConfig(pff_min_frames=2, pff_max_frames=12)
    for _ in range(50):
        frames = rng.standard_normal((int(rng.integers(10, 80)), 3)).cumsum(axis=0)
        m = ds.MotionSequence(frames)
        if abs(metrics.adaptive_pff(m, cfg) - _pff_oracle(frames, cfg)) > 1e-12:
            return False, "run scanner disagrees with oracle"
    return True, "50 random sequences match"


def check_annotation_roundtrip(perturb=False):
    ann = ds.TextAnnotation(
        global_tokens=["popping", "extrovert"],
        local_segments=[ds.LocalSegment(0, 2500, ["walk out", "foot movement"]),
                        ds.LocalSegment(2500, 4000, ["spin"])],
    )
    text = ds.emit_annotation(ann)
    ok = ds.emit_annotation(ds.parse_annotation(text)) == text
    try:
        ds.parse_annotation("Dance style characteristics: x\nDance movement sequence:\n"
                            "- 00:00:05.000 - 00:00:03.000: spin\n")
        ok = False
    except ds.ParseError:
        pass
    return ok, "round trip stable, malformed input rejected"


CHECKS = [
    ("grad_audio_conformer", check_grad_audio_conformer),
    ("grad_cross_conformer", check_grad_cross_conformer),
    ("grad_gtu", check_grad_gtu),
    ("grad_selective_scan", check_grad_selective_scan),
    ("grad_mtmm", check_grad_mtmm),
    ("grad_denoiser", check_grad_denoiser),
    ("scan_kernel_equivalence", check_scan_kernel_equivalence),
    ("schedule_constants", check_schedule_constants),
    ("metric_closed_forms", check_metric_closed_forms),
    ("pff_run_scanner", check_pff_run_scanner),
    ("annotation_roundtrip", check_annotation_roundtrip),
]


def run_selfcheck(perturb_gradient: str | None = None) -> dict:
    """Run every check; optionally corrupt one named check's analytic gradient."""
    results = []
    t0 = time.time()
    for name, fn in CHECKS:
        start = time.time()
        try:
            ok, detail = fn(perturb=(name == perturb_gradient))
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"name": name, "ok": bool(ok), "detail": detail,
                        "seconds": round(time.time() - start, 3)})
    return {
        "ok": all(r["ok"] for r in results),
        "seconds": round(time.time() - t0, 3),
        "checks": results,
    }
