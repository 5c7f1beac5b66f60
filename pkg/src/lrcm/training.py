"""Training: derivative reconstruction losses, the combined objective,
phase plans with module freezing, condition perturbation, the optimizer,
and checkpoint I/O.

Three phases mirror the curriculum: phase 1 trains the backbone on global
text + audio, phase 2 adds local text at a lower learning rate, phase 3
enables the temporal memory module while freezing the audio/text fusion
stages.  Each step derives its RNG from (seed, phase, step), so a run
resumed from a checkpoint replays identically.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffusion
from .denoiser import ConditionEmbeddings, Denoiser, TextEmbedder, build_conditions
from .errors import ConfigError, ContractViolation
from .numerics import (
    Tensor, Tape, add, div, maximum_scalar, mul, reshape, split, sqrt, square,
    sub, sum_, tensor,
)

Array = np.ndarray

CHECKPOINT_MAGIC = "LRCMCKPT1"


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    lambda_j: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_a, self.lambda_j) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("norm floor epsilon must be positive")


def _time_diff(x: Tensor, order: int) -> Tensor:
    for _ in range(order):
        t_len = x.shape[0]
        later = split(x, [1, t_len - 1], axis=0)[1]
        earlier = split(x, [t_len - 1, 1], axis=0)[0]
        x = sub(later, earlier)
    return x


def _normalized_flat(x: Tensor, epsilon: float) -> Tensor:
    flat = reshape(x, (x.size,))
    norm = sqrt(sum_(square(flat)))
    return div(flat, maximum_scalar(norm, epsilon))


def motion_derivative_loss(pred, gt, order: int, epsilon: float = 1e-8) -> Tensor:
    """Squared difference of norm-normalized order-th forward time differences.

    Both sequences are flattened across time and features after differencing,
    each is divided by max(L2 norm, epsilon), and the squared elementwise gap
    is summed.  Positive rescaling of either side (above the floor) is a no-op.
    """
    pred = tensor(pred)
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_arr.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {gt_arr.shape}")
    if order not in (1, 2, 3):
        raise ContractViolation("derivative order must be 1, 2 or 3")
    if pred.shape[0] < order + 1:
        raise ContractViolation(f"need at least {order + 1} frames for order {order}")

    pred_n = _normalized_flat(_time_diff(pred, order), epsilon)
    gt_d = np.diff(gt_arr, n=order, axis=0).ravel()
    gt_n = gt_d / max(np.linalg.norm(gt_d), epsilon)
    return sum_(square(sub(pred_n, gt_n)))


def reconstruct_x0(x_n: Array, eps_hat: Tensor, n: int, sched) -> Tensor:
    """Invert the forward corruption: x0 = (x_n - beta_bar_n * eps_hat) / alpha_bar_n."""
    return mul(sub(tensor(x_n), mul(eps_hat, sched.beta_bar[n])), 1.0 / sched.alpha_bar[n])


@dataclass
class DiffusionOutputs:
    """Everything one sample's training step produces before loss reduction."""

    x0: Array
    x_n: Array
    n: int
    eps: Array
    eps_hat: Tensor


def total_loss(outputs: list[DiffusionOutputs], cfg: LossConfig, sched) -> tuple[Tensor, dict]:
    """Noise loss plus weighted velocity/acceleration/jerk reconstruction terms.

    Derivative terms are computed on the reconstructed clean sequence, not on
    the raw noise prediction.  Returns the batch-mean total and a float
    breakdown for logging.
    """
    n_batch = len(outputs)
    terms = {"diff": [], "vel": [], "acc": [], "jerk": []}
    total = None
    for out in outputs:
        l_diff = mul(sum_(square(sub(out.eps_hat, out.eps))), sched.kappa[out.n])
        sample_total = l_diff
        terms["diff"].append(l_diff.item())
        if cfg.lambda_v or cfg.lambda_a or cfg.lambda_j:
            x0_hat = reconstruct_x0(out.x_n, out.eps_hat, out.n, sched)
            for key, weight, order in (("vel", cfg.lambda_v, 1),
                                       ("acc", cfg.lambda_a, 2),
                                       ("jerk", cfg.lambda_j, 3)):
                if weight == 0.0 or out.x0.shape[0] < order + 1:
                    terms[key].append(0.0)
                    continue
                term = motion_derivative_loss(x0_hat, out.x0, order, cfg.epsilon)
                terms[key].append(term.item())
                sample_total = add(sample_total, mul(term, weight))
        else:
            for key in ("vel", "acc", "jerk"):
                terms[key].append(0.0)
        total = sample_total if total is None else add(total, sample_total)
    total = mul(total, 1.0 / n_batch)
    breakdown = {
        "L_diff": float(np.mean(terms["diff"])),
        "L_vel": float(np.mean(terms["vel"])),
        "L_acc": float(np.mean(terms["acc"])),
        "L_jerk": float(np.mean(terms["jerk"])),
        "L_total": total.item(),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Condition perturbation
# ---------------------------------------------------------------------------

def inject_condition_noise(cond: ConditionEmbeddings, p: float, sigma: float,
                           rng: np.random.Generator) -> ConditionEmbeddings:
    """Independently per modality, add N(0, sigma^2) noise with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ContractViolation("noise probability must be in [0, 1]")

    def maybe(x):
        if x is None:
            return None
        if rng.random() < p:
            return x + sigma * rng.standard_normal(np.shape(x))
        return x

    return ConditionEmbeddings(c_a=maybe(cond.c_a),
                               c_t_global=maybe(cond.c_t_global),
                               c_t_local=maybe(cond.c_t_local))


# ---------------------------------------------------------------------------
# Phase plans and freezing
# ---------------------------------------------------------------------------

PHASE3_FREEZE = (
    "audio_proj.*",
    "text_fusion.*",
    "null_audio",
    "null_text_global",
    "blocks.*.audio.*",
    "blocks.*.cross.*",
)


@dataclass
class PhasePlan:
    phase: int
    learning_rate: float
    batch_size: int
    frozen_modules: tuple[str, ...] = ()
    use_global_text: bool = True
    use_local_text: bool = False
    use_audio: bool = True
    mtmm_enabled: bool = False

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"unknown phase {self.phase}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning rate and batch size must be positive")


def phase_plan(phase: int, learning_rate: float | None = None,
               batch_size: int | None = None) -> PhasePlan:
    """Default plan per phase: (5e-5, 12), (5e-6, 8), (3e-5, 12)."""
    defaults = {
        1: PhasePlan(1, 5.0e-5, 12),
        2: PhasePlan(2, 5.0e-6, 8, use_local_text=True),
        3: PhasePlan(3, 3.0e-5, 12, frozen_modules=PHASE3_FREEZE,
                     use_local_text=True, mtmm_enabled=True),
    }
    if phase not in defaults:
        raise ConfigError(f"unknown phase {phase}")
    plan = defaults[phase]
    if learning_rate is not None:
        plan = replace(plan, learning_rate=learning_rate)
    if batch_size is not None:
        plan = replace(plan, batch_size=batch_size)
    return plan


def resolve_frozen(param_names, patterns) -> set[str]:
    """Expand freeze patterns to parameter names; unmatched patterns are errors."""
    frozen: set[str] = set()
    for pat in patterns:
        hits = {n for n in param_names if fnmatch.fnmatchcase(n, pat)}
        if not hits:
            raise ConfigError(f"freeze pattern {pat!r} matches no parameter")
        frozen |= hits
    return frozen


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """First-order adaptive-moment optimizer with L2 weight decay in the gradient."""

    def __init__(self, params: OrderedDict, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 frozen: set[str] | None = None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.frozen = frozen or set()
        self.names = [n for n in params if n not in self.frozen]
        self.params = params
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def trainable(self) -> list[Tensor]:
        return [self.params[n] for n in self.names]

    def step(self, grads: list[Array]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, g in zip(self.names, grads):
            p = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> list[Array]:
        out = [np.array([float(self.t)])]
        for name in self.names:
            out.append(self.m[name])
            out.append(self.v[name])
        return out

    def load_state_arrays(self, arrays: list[Array]):
        self.t = int(arrays[0][0])
        idx = 1
        for name in self.names:
            self.m[name] = arrays[idx].reshape(self.m[name].shape).copy()
            self.v[name] = arrays[idx + 1].reshape(self.v[name].shape).copy()
            idx += 2


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(stem, model: Denoiser, phase: int, step: int,
                    config_dict: dict | None = None, optimizer: Adam | None = None):
    """JSON manifest + flat float64 binary of parameters in declaration order."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    params = model.params()
    with open(f"{stem}.bin", "wb") as fh:
        for p in params.values():
            fh.write(p.data.astype("<f8").tobytes())
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "phase": phase,
        "step": step,
        "config": config_dict or {},
        "params": [[name, list(p.shape)] for name, p in params.items()],
    }
    if optimizer is not None:
        with open(f"{stem}.opt.bin", "wb") as fh:
            arrays = optimizer.state_arrays()
            fh.write(struct.pack("<I", len(arrays)))
            for arr in arrays:
                flat = np.asarray(arr, dtype="<f8").ravel()
                fh.write(struct.pack("<I", flat.size))
                fh.write(flat.tobytes())
        manifest["optimizer"] = {"names": optimizer.names}
    Path(f"{stem}.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


@dataclass
class Checkpoint:
    manifest: dict
    params: "OrderedDict[str, Array]"
    optimizer_arrays: list[Array] | None = None


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    manifest = json.loads(Path(f"{stem}.json").read_text())
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{stem}.json is not a checkpoint manifest")
    params: OrderedDict[str, Array] = OrderedDict()
    raw = Path(f"{stem}.bin").read_bytes()
    offset = 0
    for name, shape in manifest["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[name] = arr.reshape([int(s) for s in shape]).copy()
        offset += count * 8
    opt_arrays = None
    opt_path = Path(f"{stem}.opt.bin")
    if opt_path.exists():
        blob = opt_path.read_bytes()
        (n_arrays,) = struct.unpack_from("<I", blob, 0)
        pos = 4
        opt_arrays = []
        for _ in range(n_arrays):
            (size,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            opt_arrays.append(np.frombuffer(blob, dtype="<f8", count=size, offset=pos).copy())
            pos += size * 8
    return Checkpoint(manifest=manifest, params=params, optimizer_arrays=opt_arrays)


def apply_checkpoint(model: Denoiser, ckpt: Checkpoint, strict: bool = False) -> list[str]:
    """Load parameters by name; returns names present in the model but not saved."""
    params = model.params()
    missing = []
    for name, p in params.items():
        if name in ckpt.params:
            saved = ckpt.params[name]
            if saved.shape != p.data.shape:
                raise ConfigError(f"checkpoint param {name} has shape {saved.shape}, "
                                  f"model expects {p.data.shape}")
            p.data = saved.copy()
        else:
            missing.append(name)
    if strict and missing:
        raise ConfigError(f"checkpoint missing parameters: {missing[:5]} ...")
    return missing


# ---------------------------------------------------------------------------
# The phase runner
# ---------------------------------------------------------------------------

@dataclass
class PhaseResult:
    log_rows: list[dict]
    final_loss: float
    initial_loss: float


def _pick_training_window(sample, t_seq: int):
    """Current window plus the preceding window (for memory) when one exists."""
    frames = sample.motion.n_frames
    if frames >= 2 * t_seq:
        return (0, t_seq), (t_seq, 2 * t_seq)
    return None, (0, min(frames, t_seq))


def run_phase(plan: PhasePlan, model: Denoiser, samples, steps: int, seed: int, *,
              sched, loss_cfg: LossConfig, embedder: TextEmbedder | None = None,
              condition_dropout: float = 0.1, noise_inject_p: float = 0.05,
              noise_inject_sigma: float = 0.1, weight_decay: float = 1e-4,
              log_path=None, checkpoint_stem=None, config_dict: dict | None = None,
              start_step: int = 0, resume_optimizer: list[Array] | None = None,
              checkpoint_every: int | None = None) -> PhaseResult:
    """Optimize the model for ``steps`` steps under one phase plan.

    Frozen parameters receive no updates (bit-identical afterwards).  The
    per-step RNG stream is `(seed, phase, step)`, making interrupted runs
    resumable with identical losses.
    """
    if not samples:
        raise ContractViolation("empty training set")
    if plan.mtmm_enabled and not model.config.mtmm_enabled:
        raise ConfigError("plan enables the memory module but the model was built without it")
    embedder = embedder or TextEmbedder(dim=model.config.text_dim)
    params = model.params()
    frozen = resolve_frozen(params.keys(), plan.frozen_modules)
    opt = Adam(params, lr=plan.learning_rate, weight_decay=weight_decay, frozen=frozen)
    if resume_optimizer is not None:
        opt.load_state_arrays(resume_optimizer)
    trainable = opt.trainable()
    t_seq = model.config.t_seq

    cond_cache: dict[str, ConditionEmbeddings] = {}

    def conditions_for(sample) -> ConditionEmbeddings:
        cached = cond_cache.get(sample.clip_id)
        if cached is None:
            cached = build_conditions(sample, embedder,
                                      use_global=plan.use_global_text,
                                      use_local=plan.use_local_text,
                                      use_audio=plan.use_audio)
            cond_cache[sample.clip_id] = cached
        return cached

    log_rows: list[dict] = []
    initial_loss = None
    final_loss = 0.0
    for step in range(start_step, start_step + steps):
        rng = np.random.default_rng([int(seed), plan.phase, step])
        picks = rng.integers(0, len(samples), plan.batch_size)

        batch = []
        for idx in picks:
            sample = samples[int(idx)]
            cond_full = conditions_for(sample)
            prev_win, cur_win = _pick_training_window(sample, t_seq)
            lo, hi = cur_win
            x0 = sample.motion.frames[lo:hi]
            cond = cond_full.slice(lo, hi)
            cond = inject_condition_noise(cond, noise_inject_p, noise_inject_sigma, rng)
            drop_audio = rng.random() < condition_dropout
            drop_text = rng.random() < condition_dropout
            memory = None
            if plan.mtmm_enabled and prev_win is not None:
                plo, phi = prev_win
                x_prev = sample.motion.frames[plo:phi]
                eps0 = rng.standard_normal(x_prev.shape)
                x_prev_noisy = diffusion.q_sample(x_prev, 1, eps0, sched)
                cond_prev = cond_full.slice(plo, phi)
                _, memory = model(x_prev_noisy, 1,
                                  None if drop_audio else cond_prev.audio(),
                                  None if drop_text else cond_prev.text(),
                                  capture_memory=True)
            n = int(rng.integers(1, sched.steps + 1))
            eps = rng.standard_normal(x0.shape)
            x_n = diffusion.q_sample(x0, n, eps, sched)
            batch.append((x0, x_n, n, eps,
                          None if drop_audio else cond.audio(),
                          None if drop_text else cond.text(),
                          memory))

        with Tape() as tape:
            outputs = []
            for x0, x_n, n, eps, cond_a, cond_t, memory in batch:
                eps_hat = model(x_n, n, cond_a, cond_t, memory=memory)
                outputs.append(DiffusionOutputs(x0=x0, x_n=x_n, n=n, eps=eps, eps_hat=eps_hat))
            loss, breakdown = total_loss(outputs, loss_cfg, sched)
        grads = tape.gradients(loss, trainable)
        opt.step(grads)

        if initial_loss is None:
            initial_loss = breakdown["L_total"]
        final_loss = breakdown["L_total"]
        log_rows.append({"step": step, **breakdown})
        if checkpoint_stem is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_stem, model, plan.phase, step + 1, config_dict, opt)

    if checkpoint_stem is not None:
        save_checkpoint(checkpoint_stem, model, plan.phase, start_step + steps, config_dict, opt)
    if log_path is not None:
        write_training_log(log_path, log_rows)
    return PhaseResult(log_rows=log_rows, final_loss=final_loss,
                       initial_loss=initial_loss if initial_loss is not None else 0.0)


def write_training_log(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("step,L_diff,L_vel,L_acc,L_jerk,L_total\n")
        for row in rows:
            fh.write(f"{row['step']},{row['L_diff']:.10g},{row['L_vel']:.10g},"
                     f"{row['L_acc']:.10g},{row['L_jerk']:.10g},{row['L_total']:.10g}\n")
