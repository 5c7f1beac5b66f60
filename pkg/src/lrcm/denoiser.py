"""Stacked denoising residual network with audio and text conditioning.

Each residual block runs an audio-latent conformer stage (convolution +
self-attention over the audio-enriched latent), a text-latent cross-conformer
stage (latent queries attending over the fused text feature), and a gated
tanh unit that yields both the next block's latent and a skip contribution.
When the temporal memory module is enabled, it is appended after the gate and
adds its own skip.  Skips are summed, scaled by 1/sqrt(n_blocks), normalized,
and projected back to pose space; the output projection starts at zero so an
untrained model predicts zero noise.

Text enters through a pair of bottleneck projections (broadcast global
embedding, per-frame local embedding) fused into one per-frame feature shared
by every block.  Dropped conditions are replaced by learned null embeddings
(audio, global text) or zero rows (local text).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractViolation, ValidationError
from .mtmm import MotionMemory, MtmmBlock
from .numerics import (
    AttentionParams, Tensor, add, concat, conv1d, layer_norm, matmul, mul,
    multi_head_attention, parameter, sigmoid, sinusoidal_embedding, split,
    tanh, tensor, xavier,
)

Array = np.ndarray

EMBEDDING_MAGIC = b"LRCMEMB1"
TEXT_DIM = 512


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------

class TextCondition(NamedTuple):
    """Global sentence embedding plus per-frame local embedding rows."""

    global_vec: Array | None
    local: Array | None


@dataclass
class ConditionEmbeddings:
    """Bundled per-sample conditions; ``None`` fields mean a dropped modality."""

    c_a: Array | None = None           # (T, D_a) audio features
    c_t_global: Array | None = None    # (D_t,) global text embedding
    c_t_local: Array | None = None     # (T, D_t), zero rows where unlabeled

    def validate(self):
        lengths = set()
        for f in (self.c_a, self.c_t_local):
            if f is not None:
                if not np.all(np.isfinite(f)):
                    raise ValidationError("condition embeddings must be finite")
                lengths.add(f.shape[0])
        if self.c_t_global is not None and not np.all(np.isfinite(self.c_t_global)):
            raise ValidationError("condition embeddings must be finite")
        if len(lengths) > 1:
            raise ContractViolation(f"condition frame counts disagree: {sorted(lengths)}")

    def audio(self) -> Array | None:
        return self.c_a

    def text(self) -> TextCondition | None:
        if self.c_t_global is None and self.c_t_local is None:
            return None
        return TextCondition(self.c_t_global, self.c_t_local)

    def slice(self, lo: int, hi: int) -> "ConditionEmbeddings":
        return ConditionEmbeddings(
            c_a=None if self.c_a is None else self.c_a[lo:hi],
            c_t_global=self.c_t_global,
            c_t_local=None if self.c_t_local is None else self.c_t_local[lo:hi],
        )

    def require_frames(self, n: int):
        for name, f in (("audio", self.c_a), ("local text", self.c_t_local)):
            if f is not None and f.shape[0] < n:
                raise ContractViolation(f"{name} condition covers {f.shape[0]} < {n} frames")


# ---------------------------------------------------------------------------
# Text embeddings: deterministic stub + optional file-backed table
# ---------------------------------------------------------------------------

def stub_embedding(text: str, dim: int = TEXT_DIM) -> Array:
    """Seeded-hash pseudo-embedding: stable across runs, unit norm."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    vec = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def write_embedding_file(path, matrix: Array, tokens: list[str]):
    """Row-major float32 table with a 32-byte header and a JSON key sidecar."""
    matrix = np.asarray(matrix, dtype="<f4")
    count, dim = matrix.shape
    if count != len(tokens):
        raise ContractViolation("token list length != embedding row count")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", dim, count))
        fh.write(b"\x00" * 16)  # header padding to 32 bytes
        fh.write(matrix.tobytes())
    Path(str(path) + ".json").write_text(
        json.dumps({tok: i for i, tok in enumerate(tokens)}, sort_keys=True))


def read_embedding_file(path) -> tuple[Array, dict[str, int]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMBEDDING_MAGIC:
            raise ValidationError(f"{path}: bad embedding magic {magic!r}")
        dim, count = struct.unpack("<II", fh.read(8))
        fh.read(16)
        matrix = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    table = json.loads(Path(str(path) + ".json").read_text())
    return matrix.astype(np.float64), {str(k): int(v) for k, v in table.items()}


class TextEmbedder:
    """Maps token strings to embeddings; file rows when available, stub otherwise."""

    def __init__(self, dim: int = TEXT_DIM, matrix: Array | None = None,
                 table: dict[str, int] | None = None):
        self.dim = dim
        self.matrix = matrix
        self.table = table or {}
        self._cache: dict[str, Array] = {}

    @classmethod
    def from_file(cls, path) -> "TextEmbedder":
        matrix, table = read_embedding_file(path)
        return cls(dim=matrix.shape[1], matrix=matrix, table=table)

    def _lookup(self, token: str) -> Array:
        if self.matrix is not None and token in self.table:
            return self.matrix[self.table[token]]
        return stub_embedding(token, self.dim)

    def embed(self, text: str) -> Array:
        """Embed a canonical comma-joined token string."""
        key = ", ".join(" ".join(p.lower().split()) for p in text.split(","))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.matrix is not None and key in self.table:
            vec = self.matrix[self.table[key]].astype(np.float64)
        else:
            parts = [p for p in key.split(", ") if p]
            vec = np.mean([self._lookup(p) for p in parts], axis=0)
        vec = vec / max(np.linalg.norm(vec), 1e-12)
        self._cache[key] = vec
        return vec


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    pose_dim: int = 61
    d_model: int = 64
    n_blocks: int = 20
    heads: int = 4
    conv_kernel: int = 5
    t_seq: int = 900
    audio_dim: int = 3
    text_dim: int = TEXT_DIM
    text_bottleneck: int = 64
    time_dim: int = 64
    mtmm_enabled: bool = False
    memory_frames: int = 120
    ssm_state: int = 8

    def validate(self):
        if self.n_blocks < 1:
            raise ConfigError("need at least one residual block")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the gated units")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv kernel width must be odd (non-causal padding)")
        for name in ("pose_dim", "t_seq", "audio_dim", "text_dim", "text_bottleneck",
                     "ssm_state", "time_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.memory_frames < 0:
            raise ConfigError("memory_frames must be >= 0")
        if self.time_dim % 2 != 0:
            raise ConfigError("time_dim must be even")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else xavier(rng, n_in, n_out)
        self.w = parameter(w)
        self.b = parameter(np.zeros(n_out))

    def params(self) -> OrderedDict:
        return OrderedDict(w=self.w, b=self.b)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


class Conv(object):
    def __init__(self, kernel: int, c_in: int, c_out: int, rng: np.random.Generator):
        std = 1.0 / math.sqrt(kernel * c_in)
        self.w = parameter(rng.normal(0, std, (kernel, c_in, c_out)))
        self.b = parameter(np.zeros(c_out))

    def params(self) -> OrderedDict:
        return OrderedDict(w=self.w, b=self.b)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b)


class Norm:
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def params(self) -> OrderedDict:
        return OrderedDict(gain=self.gain, bias=self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def _collect(children: list[tuple[str, object]]) -> OrderedDict:
    out: OrderedDict[str, Tensor] = OrderedDict()
    for prefix, child in children:
        if isinstance(child, Tensor):
            out[prefix] = child
            continue
        if isinstance(child, AttentionParams):
            items = child.named().items()
        else:
            items = child.params().items()
        for name, p in items:
            out[f"{prefix}.{name}"] = p
    return out


class AudioConformer:
    """Latent enrichment from audio: conv + self-attention + residual norm."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.conv = Conv(cfg.conv_kernel, cfg.d_model, cfg.d_model, rng)
        self.attn = AttentionParams.create(cfg.d_model, rng)
        self.heads = cfg.heads
        self.ln = Norm(cfg.d_model)

    def params(self) -> OrderedDict:
        return _collect([("conv", self.conv), ("attn", self.attn), ("ln", self.ln)])

    def __call__(self, x: Tensor, audio_proj: Tensor) -> Tensor:
        enriched = self.conv(add(audio_proj, x))
        attended = multi_head_attention(enriched, enriched, enriched, self.heads, self.attn)
        return self.ln(add(x, attended))


class CrossConformer:
    """Latent queries attend over the fused text feature."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.q_conv = Conv(cfg.conv_kernel, cfg.d_model, cfg.d_model, rng)
        self.kv_conv = Conv(cfg.conv_kernel, cfg.d_model, cfg.d_model, rng)
        self.attn = AttentionParams.create(cfg.d_model, rng)
        self.heads = cfg.heads
        self.ln = Norm(cfg.d_model)

    def params(self) -> OrderedDict:
        return _collect([("q_conv", self.q_conv), ("kv_conv", self.kv_conv),
                         ("attn", self.attn), ("ln", self.ln)])

    def __call__(self, x_a: Tensor, text_feat: Tensor) -> Tensor:
        q = self.q_conv(x_a)
        kv = self.kv_conv(text_feat)
        attended = multi_head_attention(q, kv, kv, self.heads, self.attn)
        return self.ln(add(x_a, attended))


class GatedTanhUnit:
    """Expand, split into gate/filter, tanh*sigmoid, project to latent + skip."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.d = cfg.d_model
        self.expand = Linear(cfg.d_model, 2 * cfg.d_model, rng)
        self.proj = Linear(cfg.d_model, 2 * cfg.d_model, rng)

    def params(self) -> OrderedDict:
        return _collect([("expand", self.expand), ("proj", self.proj)])

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        wide = self.expand(x)
        h_gate, h_filter = split(wide, [self.d, self.d], axis=1)
        gated = mul(tanh(h_filter), sigmoid(h_gate))
        projected = self.proj(gated)
        x_next, h_skip = split(projected, [self.d, self.d], axis=1)
        return x_next, h_skip


class TextFusion:
    """Bottleneck the global and local embeddings and fuse them per frame."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.global_proj = Linear(cfg.text_dim, cfg.text_bottleneck, rng)
        self.local_proj = Linear(cfg.text_dim, cfg.text_bottleneck, rng)
        self.joint = Linear(2 * cfg.text_bottleneck, cfg.d_model, rng)

    def params(self) -> OrderedDict:
        return _collect([("global_proj", self.global_proj),
                         ("local_proj", self.local_proj), ("joint", self.joint)])

    def __call__(self, global_vec: Tensor, local: Tensor) -> Tensor:
        t_len = local.shape[0]
        g = tanh(self.global_proj(global_vec))          # (1, bottleneck)
        g_rows = matmul(tensor(np.ones((t_len, 1))), g)  # broadcast along time
        l_rows = tanh(self.local_proj(local))
        return self.joint(concat([g_rows, l_rows], axis=1))


class ResidualBlock:
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.audio = AudioConformer(cfg, rng)
        self.cross = CrossConformer(cfg, rng)
        self.gtu = GatedTanhUnit(cfg, rng)
        self.mtmm = None
        if cfg.mtmm_enabled:
            self.mtmm = MtmmBlock(cfg.d_model, cfg.ssm_state, cfg.memory_frames,
                                  cfg.t_seq, cfg.conv_kernel, rng)

    def params(self) -> OrderedDict:
        children = [("audio", self.audio), ("cross", self.cross), ("gtu", self.gtu)]
        if self.mtmm is not None:
            children.append(("mtmm", self.mtmm))
        return _collect(children)


# ---------------------------------------------------------------------------
# The full denoiser
# ---------------------------------------------------------------------------

class Denoiser:
    """Noise predictor eps_hat(x_n, n, audio, text [, memory])."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng([int(seed), 0x1c5])
        cfg = config
        self.in_proj = Linear(cfg.pose_dim, cfg.d_model, rng)
        self.time_proj1 = Linear(cfg.time_dim, cfg.d_model, rng)
        self.time_proj2 = Linear(cfg.d_model, cfg.d_model, rng)
        self.audio_proj = Linear(cfg.audio_dim, cfg.d_model, rng)
        self.null_audio = parameter(rng.normal(0, 0.02, (1, cfg.audio_dim)))
        self.null_text_global = parameter(rng.normal(0, 0.02, (1, cfg.text_dim)))
        self.text_fusion = TextFusion(cfg, rng)
        self.blocks = [ResidualBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.skip_ln = Norm(cfg.d_model)
        self.out_proj = Linear(cfg.d_model, cfg.pose_dim, rng, zero=True)
        self._params: OrderedDict[str, Tensor] | None = None

    # -- parameter registry ------------------------------------------------

    def params(self) -> OrderedDict:
        if self._params is None:
            children: list[tuple[str, object]] = [
                ("in_proj", self.in_proj),
                ("time_proj1", self.time_proj1),
                ("time_proj2", self.time_proj2),
                ("audio_proj", self.audio_proj),
                ("null_audio", self.null_audio),
                ("null_text_global", self.null_text_global),
                ("text_fusion", self.text_fusion),
            ]
            for i, block in enumerate(self.blocks):
                children.append((f"blocks.{i}", block))
            children.append(("skip_ln", self.skip_ln))
            children.append(("out_proj", self.out_proj))
            self._params = _collect(children)
        return self._params

    @property
    def pose_dim(self) -> int:
        return self.config.pose_dim

    @property
    def t_seq(self) -> int:
        return self.config.t_seq

    # -- condition preparation ----------------------------------------------

    def _audio_rows(self, cond_a: Array | None) -> Tensor:
        if cond_a is None:
            return self.audio_proj(self.null_audio)  # (1, d); broadcasts over time
        cond_a = np.asarray(cond_a, dtype=np.float64)
        if cond_a.shape[1] != self.config.audio_dim:
            raise ContractViolation(
                f"audio features have dim {cond_a.shape[1]}, expected {self.config.audio_dim}")
        return self.audio_proj(tensor(cond_a))

    def _text_rows(self, cond_t: TextCondition | None, t_len: int) -> Tensor:
        cfg = self.config
        if cond_t is None:
            global_vec = self.null_text_global
            local = tensor(np.zeros((t_len, cfg.text_dim)))
        else:
            if cond_t.global_vec is None:
                global_vec = self.null_text_global
            else:
                global_vec = tensor(np.asarray(cond_t.global_vec, dtype=np.float64).reshape(1, -1))
            if cond_t.local is None:
                local = tensor(np.zeros((t_len, cfg.text_dim)))
            else:
                local = tensor(np.asarray(cond_t.local, dtype=np.float64))
        if global_vec.shape[1] != cfg.text_dim or local.shape[1] != cfg.text_dim:
            raise ContractViolation("text embedding width mismatch")
        if local.shape[0] != t_len:
            raise ContractViolation(
                f"local text rows {local.shape[0]} != sequence length {t_len}")
        return self.text_fusion(global_vec, local)

    # -- forward -------------------------------------------------------------

    def forward(self, x, n: int, cond_a=None, cond_t=None, memory=None,
                capture_memory: bool = False, capture_tail: int | None = None):
        cfg = self.config
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        t_len = x.shape[0]
        if t_len > cfg.t_seq:
            raise ContractViolation(f"sequence of {t_len} frames exceeds t_seq={cfg.t_seq}")
        if x.shape[1] != cfg.pose_dim:
            raise ContractViolation(f"pose dim {x.shape[1]} != configured {cfg.pose_dim}")
        if cond_a is not None and np.asarray(cond_a).shape[0] != t_len:
            raise ContractViolation("audio condition length != latent length")

        audio_rows = self._audio_rows(cond_a)
        text_rows = self._text_rows(cond_t, t_len)
        temb_in = tensor(sinusoidal_embedding(float(n), cfg.time_dim).reshape(1, -1))
        temb = self.time_proj2(tanh(self.time_proj1(temb_in)))

        latent = add(self.in_proj(tensor(x)), temb)
        skips = []
        tail = cfg.memory_frames if capture_tail is None else capture_tail
        captured: list[MotionMemory] = []
        for i, block in enumerate(self.blocks):
            x_a = block.audio(latent, audio_rows)
            x_t = block.cross(x_a, text_rows)
            latent, h_skip = block.gtu(x_t)
            skips.append(h_skip)
            if capture_memory:
                captured.append(MotionMemory(latent.data[-tail:].copy() if tail else
                                             np.zeros((0, cfg.d_model))))
            if block.mtmm is not None:
                mem_i = memory[i] if memory is not None else None
                latent, mtmm_skip = block.mtmm(latent, mem_i)
                skips.append(mtmm_skip)

        total = skips[0]
        for s in skips[1:]:
            total = add(total, s)
        total = mul(total, 1.0 / math.sqrt(cfg.n_blocks))
        eps_hat = self.out_proj(self.skip_ln(total))
        if capture_memory:
            return eps_hat, captured
        return eps_hat

    __call__ = forward


# ---------------------------------------------------------------------------
# Condition assembly from dataset samples
# ---------------------------------------------------------------------------

def build_conditions(sample, embedder: TextEmbedder, use_global: bool = True,
                     use_local: bool = True, use_audio: bool = True) -> ConditionEmbeddings:
    """Turn a dataset triple into model-ready condition embeddings."""
    from .dataset import align_local_tokens

    n_frames = sample.motion.n_frames
    c_a = sample.audio.frames.copy() if use_audio else None
    c_t_global = None
    if use_global and sample.text.global_tokens:
        c_t_global = embedder.embed(", ".join(sample.text.global_tokens))
    c_t_local = None
    if use_local and sample.text.local_segments:
        mask = align_local_tokens(sample.text, n_frames, sample.motion.fps)
        rows = np.zeros((n_frames, embedder.dim))
        for f, tokens in enumerate(mask):
            if tokens:
                rows[f] = embedder.embed(", ".join(tokens))
        c_t_local = rows
    cond = ConditionEmbeddings(c_a=c_a, c_t_global=c_t_global, c_t_local=c_t_local)
    cond.validate()
    return cond
