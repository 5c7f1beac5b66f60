"""Temporal memory module for autoregressive segment-to-segment generation.

The tail latents of the previously generated segment are projected, prepended
to the current segment's latents, position-encoded, and run through a
bidirectional selective state-space scan.  The memory half of the result is
discarded; the current half re-enters the residual block through a gated
fusion.  A cold start (empty memory) degrades gracefully to a plain
bidirectional scan over the current segment.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .numerics import (
    Tensor, add, concat, conv1d, layer_norm, matmul, mul, parameter, reverse,
    sigmoid, sinusoidal_table, split, sum_, tanh, tensor, xavier,
)
from .ssm import SelectiveSSM

Array = np.ndarray


@dataclass
class MotionMemory:
    """Latent tail (T_m, d_model) of the preceding segment; T_m may be zero."""

    frames: Array

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ContractViolation("memory must be a 2-D latent array")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @staticmethod
    def empty(d_model: int) -> "MotionMemory":
        return MotionMemory(np.zeros((0, d_model)))


class _ConvMlp:
    """Conv1D front end followed by a pointwise projection (tanh between)."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        self.kernel = kernel
        self.conv_w = parameter(rng.normal(0, 1.0 / math.sqrt(kernel * dim), (kernel, dim, dim)))
        self.conv_b = parameter(np.zeros(dim))
        self.w = parameter(xavier(rng, dim, dim))
        self.b = parameter(np.zeros(dim))

    def params(self) -> OrderedDict:
        return OrderedDict(conv_w=self.conv_w, conv_b=self.conv_b, w=self.w, b=self.b)

    def __call__(self, x: Tensor) -> Tensor:
        h = tanh(conv1d(x, self.conv_w, self.conv_b))
        return add(matmul(h, self.w), self.b)


class _Norm:
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def params(self) -> OrderedDict:
        return OrderedDict(gain=self.gain, bias=self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MtmmBlock:
    """One per-residual-block temporal memory unit."""

    def __init__(self, d_model: int, state: int, memory_frames: int, t_seq: int,
                 conv_kernel: int, rng: np.random.Generator):
        if d_model % 2 != 0:
            raise ConfigError("temporal memory gating needs an even model width")
        self.d_model = d_model
        self.memory_frames = memory_frames
        self.f_eps = _ConvMlp(d_model, conv_kernel, rng)
        self.f_theta = _ConvMlp(d_model, conv_kernel, rng)
        self.ln_in = _Norm(d_model)
        self.fwd = SelectiveSSM(d_model, state, rng)
        self.bwd = SelectiveSSM(d_model, state, rng)
        self.ln_mem = _Norm(d_model)
        self.ln_h = _Norm(d_model)
        self.ln_res = _Norm(d_model)
        self.f_delta_w = parameter(xavier(rng, d_model // 2, 2 * d_model))
        self.f_delta_b = parameter(np.zeros(2 * d_model))
        self.pe = sinusoidal_table(memory_frames + t_seq, d_model)  # constant

    def params(self) -> OrderedDict:
        out: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, sub in (("f_eps", self.f_eps), ("f_theta", self.f_theta),
                            ("ln_in", self.ln_in), ("fwd", self.fwd), ("bwd", self.bwd),
                            ("ln_mem", self.ln_mem), ("ln_h", self.ln_h),
                            ("ln_res", self.ln_res)):
            for name, p in sub.params().items():
                out[f"{prefix}.{name}"] = p
        out["f_delta_w"] = self.f_delta_w
        out["f_delta_b"] = self.f_delta_b
        return out

    def build_input(self, memory: MotionMemory, x_latent: Tensor) -> Tensor:
        """Project, concatenate along time, add positions, normalize."""
        if memory.length and memory.frames.shape[1] != self.d_model:
            raise ContractViolation(
                f"memory width {memory.frames.shape[1]} != model width {self.d_model}")
        parts = []
        if memory.length:
            parts.append(self.f_eps(tensor(memory.frames)))
        parts.append(self.f_theta(x_latent))
        cat = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        total = cat.shape[0]
        if total > self.pe.shape[0]:
            raise ContractViolation(
                f"sequence of {total} rows exceeds positional table {self.pe.shape[0]}")
        return self.ln_in(add(cat, self.pe[:total]))

    def bidirectional_scan(self, x_pos: Tensor) -> Tensor:
        forward = self.fwd(x_pos)
        backward = reverse(self.bwd(reverse(x_pos, axis=0)), axis=0)
        return add(forward, backward)

    def split_and_fuse(self, x_mem: Tensor, x_latent: Tensor,
                       memory_len: int) -> tuple[Tensor, Tensor]:
        t_cur = x_latent.shape[0]
        normed = self.ln_mem(x_mem)
        x_h = split(normed, [memory_len, t_cur], axis=0)[1] if memory_len else normed
        x_res = self.ln_res(add(x_latent, self.ln_h(x_h)))
        half = self.d_model // 2
        h_gate, h_filter = split(x_res, [half, half], axis=1)
        gated = mul(tanh(h_filter), sigmoid(h_gate))
        fused = add(matmul(gated, self.f_delta_w), self.f_delta_b)
        x_out, h_skip = split(fused, [self.d_model, self.d_model], axis=1)
        return x_out, h_skip

    def __call__(self, x_latent: Tensor, memory: MotionMemory | None) -> tuple[Tensor, Tensor]:
        memory = memory if memory is not None else MotionMemory.empty(self.d_model)
        x_pos = self.build_input(memory, x_latent)
        x_mem = self.bidirectional_scan(x_pos)
        return self.split_and_fuse(x_mem, x_latent, memory.length)


def autoregressive_generate(model, total_frames: int, cond_stream, g, sched,
                            memory_frames: int, seed,
                            clip_x0: float | None = None) -> Array:
    """Generate ``total_frames`` in segment chunks, threading latent memory.

    ``cond_stream`` must cover the full duration; each segment is sampled with
    the sliced conditions, and the per-block latent tails captured at the final
    denoising step condition the next segment.  The first segment runs with
    empty memory.
    """
    from . import diffusion

    t_seq = model.config.t_seq
    cond_stream.require_frames(total_frames)
    n_segments = math.ceil(total_frames / t_seq)
    out = []
    memory = None
    for k in range(n_segments):
        lo = k * t_seq
        hi = min(total_frames, lo + t_seq)
        cond_k = cond_stream.slice(lo, hi)
        motion, captured = diffusion.sample(
            model, hi - lo, cond_k.audio(), cond_k.text(), g, sched,
            seed=np.random.SeedSequence([int(seed), 7919, k]), clip_x0=clip_x0,
            memory=memory, capture_memory=True, capture_tail=memory_frames,
        )
        out.append(motion)
        memory = captured
    return np.concatenate(out, axis=0)
