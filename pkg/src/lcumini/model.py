"""Miniature diffusion transformer over concatenated condition-unit tokens.

Every CU map (7xHxW) is patchified and projected by the x-embed layer, tagged
with a shared 2D position table and a per-slot CU embedding, and all CU
tokens are concatenated behind the instruction tokens. A sinusoidal timestep
embedding is added to every token, attention is full and bidirectional, and
the head maps each CU's output tokens back to a 3xHxW velocity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .lcu import CU_CHANNELS, IMAGE_CHANNELS, VOCAB_SIZE, LcuPlusPlus, TextInstruction, build_cu_map
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch: int = 4
    image_size: int = 16
    vocab_size: int = VOCAB_SIZE
    max_cus: int = 4

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.patch <= 0 or self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image_size {self.image_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_cu(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoraAdapter:
    down: Tensor  # d_in x rank, random init
    up: Tensor  # rank x d_out, zero init
    scale: float

    @property
    def n_params(self) -> int:
        return self.down.size + self.up.size


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, Tensor]
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    adapter_config: dict | None = None

    @property
    def dtype(self):
        return self.params["x_embed.weight"].dtype

    def trainable(self) -> dict[str, Tensor]:
        """Tensors the optimizer updates: adapter factors if any, else all base params."""
        if self.adapters:
            out = {}
            for name, ad in self.adapters.items():
                out[f"lora.{name}.down"] = ad.down
                out[f"lora.{name}.up"] = ad.up
            return out
        return dict(self.params)

    def all_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, ad in self.adapters.items():
            out[f"lora.{name}.down"] = ad.down
            out[f"lora.{name}.up"] = ad.up
        return out

    def zero_grad(self) -> None:
        for p in self.all_tensors().values():
            p.zero_grad()


def linear_names(config: ModelConfig) -> list[str]:
    names = ["x_embed", "t_embed"]
    for i in range(config.n_layers):
        names += [f"blocks.{i}.qkv", f"blocks.{i}.attn_out", f"blocks.{i}.fc1", f"blocks.{i}.fc2"]
    names.append("head")
    return names


def init_weights(config: ModelConfig, seed: int = 0, dtype: str = "float32") -> ModelWeights:
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    d = config.model_dim
    p2 = config.patch * config.patch
    params: dict[str, Tensor] = {}

    def lin(name, d_in, d_out, bias=True, std=None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (d_in, d_out)).astype(dt), requires_grad=True)
        if bias:
            params[f"{name}.bias"] = Tensor(np.zeros(d_out, dt), requires_grad=True)

    def table(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, shape).astype(dt), requires_grad=True)

    def norm(name):
        params[f"{name}.gain"] = Tensor(np.ones(d, dt), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(d, dt), requires_grad=True)

    lin("x_embed", CU_CHANNELS * p2, d)
    table("pos_2d", (config.tokens_per_cu, d))
    table("cu_index_embed", (config.max_cus, d))
    table("instr_embed", (config.vocab_size, d))
    table("instr_null", (1, d))
    lin("t_embed", d, d)
    for i in range(config.n_layers):
        norm(f"blocks.{i}.ln1")
        # qkv has no bias: a key bias only shifts scores uniformly per query
        # and would get an identically zero gradient.
        lin(f"blocks.{i}.qkv", d, 3 * d, bias=False)
        lin(f"blocks.{i}.attn_out", d, d)
        norm(f"blocks.{i}.ln2")
        lin(f"blocks.{i}.fc1", d, 4 * d)
        lin(f"blocks.{i}.fc2", 4 * d, d)
    norm("final_ln")
    lin("head", d, IMAGE_CHANNELS * p2, std=0.02)
    return ModelWeights(config, params)


# -- building blocks ------------------------------------------------------------

def linear(w: ModelWeights, name: str, x: Tensor) -> Tensor:
    y = x @ w.params[f"{name}.weight"]
    bias = w.params.get(f"{name}.bias")
    if bias is not None:
        y = y + bias
    ad = w.adapters.get(name)
    if ad is not None:
        y = y + (x @ ad.down @ ad.up) * ad.scale
    return y


def _layer_norm(w: ModelWeights, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, w.params[f"{name}.gain"], w.params[f"{name}.bias"])


def patchify(maps: np.ndarray, patch: int) -> np.ndarray:
    """(..., C, H, W) -> (..., (H/p)*(W/p), C*p*p), row-major over patches."""
    *lead, c, h, wd = maps.shape
    if h % patch or wd % patch:
        raise ShapeError(f"patch {patch} does not divide {h}x{wd}")
    gh, gw = h // patch, wd // patch
    x = maps.reshape(*lead, c, gh, patch, gw, patch)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, channels: int, patch: int, grid: int) -> Tensor:
    """Inverse of :func:`patchify` for a (..., grid*grid, C*p*p) tensor."""
    lead = tokens.shape[:-2]
    k = len(lead)
    x = tokens.reshape(*lead, grid, grid, channels, patch, patch)
    x = x.transpose(*range(k), k + 2, k, k + 3, k + 1, k + 4)
    return x.reshape(*lead, channels, grid * patch, grid * patch)


def x_embed(w: ModelWeights, cu_map, patch: int | None = None) -> Tensor:
    """Patchify a (..., 7, H, W) map and project to (..., tokens, model_dim) plus ``pos_2d``."""
    cfg = w.config
    patch = cfg.patch if patch is None else patch
    data = cu_map.data if isinstance(cu_map, Tensor) else np.asarray(cu_map)
    if data.shape[-3] != CU_CHANNELS:
        raise ShapeError(f"x_embed expects {CU_CHANNELS} channels, got {data.shape}")
    patches = Tensor(patchify(data, patch).astype(w.dtype, copy=False))
    if patches.shape[-2] != cfg.tokens_per_cu:
        raise ShapeError(f"map yields {patches.shape[-2]} tokens, model expects {cfg.tokens_per_cu}")
    return linear(w, "x_embed", patches) + w.params["pos_2d"]


def embed_instruction(w: ModelWeights, instr: TextInstruction) -> Tensor:
    if instr.is_null:
        return w.params["instr_null"].reshape(1, w.config.model_dim)
    if any(i >= w.config.vocab_size for i in instr.token_ids):
        raise IndexError("instruction token id out of range")
    return T.embedding(w.params["instr_embed"], np.array(instr.token_ids))


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; returns (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((len(feats), 1))], axis=1)
    return feats


def _attention(w: ModelWeights, i: int, x: Tensor) -> Tensor:
    cfg = w.config
    b, s, d = x.shape
    nh = cfg.n_heads
    dh = d // nh
    qkv = linear(w, f"blocks.{i}.qkv", x).reshape(b, s, 3, nh, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    out = T.softmax(scores, axis=-1) @ v
    out = out.transpose(0, 2, 1, 3).reshape(b, s, d)
    return linear(w, f"blocks.{i}.attn_out", out)


def _block(w: ModelWeights, i: int, x: Tensor) -> Tensor:
    x = x + _attention(w, i, _layer_norm(w, f"blocks.{i}.ln1", x))
    h = T.gelu(linear(w, f"blocks.{i}.fc1", _layer_norm(w, f"blocks.{i}.ln2", x)))
    return x + linear(w, f"blocks.{i}.fc2", h)


# -- forward passes -------------------------------------------------------------

def forward_batch(w: ModelWeights, maps: np.ndarray, ts: Sequence[float], instr_ids: np.ndarray | None) -> Tensor:
    """Batched forward for samples sharing the CU count and instruction length.

    maps: (B, N, 7, H, W); ts: (B,); instr_ids: (B, L) token ids, or ``None``
    for the null instruction. Returns velocities of shape (B, N, 3, H, W).
    """
    cfg = w.config
    maps = np.asarray(maps)
    if maps.ndim != 5:
        raise ShapeError(f"maps must be (B, N, 7, H, W), got {maps.shape}")
    b, n = maps.shape[:2]
    if n > cfg.max_cus:
        raise ValueError(f"{n} condition units exceed max_cus={cfg.max_cus}")
    if maps.shape[-1] != cfg.image_size or maps.shape[-2] != cfg.image_size:
        raise ShapeError(f"maps are {maps.shape[-2]}x{maps.shape[-1]}, model expects {cfg.image_size}")
    d = cfg.model_dim
    p = cfg.tokens_per_cu

    tokens = x_embed(w, maps)  # (B, N, P, D)
    cu_slot = w.params["cu_index_embed"][:n].reshape(1, n, 1, d)
    tokens = (tokens + cu_slot).reshape(b, n * p, d)

    if instr_ids is None:
        text = w.params["instr_null"].reshape(1, 1, d) + Tensor(np.zeros((b, 1, d), w.dtype))
    else:
        ids = np.asarray(instr_ids)
        if ids.ndim != 2 or ids.shape[0] != b:
            raise ShapeError(f"instr_ids must be (B, L), got {ids.shape}")
        text = T.embedding(w.params["instr_embed"], ids)
    n_text = text.shape[1]

    temb = linear(w, "t_embed", Tensor(timestep_features(np.asarray(ts), d).astype(w.dtype)))
    x = T.concat([text, tokens], axis=1) + temb.reshape(b, 1, d)
    for i in range(cfg.n_layers):
        x = _block(w, i, x)
    x = _layer_norm(w, "final_ln", x)
    out = linear(w, "head", x[:, n_text:, :])  # instruction outputs discarded
    out = out.reshape(b, n, p, out.shape[-1])
    return unpatchify(out, IMAGE_CHANNELS, cfg.patch, cfg.grid)


def stack_maps(lcu: LcuPlusPlus) -> np.ndarray:
    return np.stack([build_cu_map(u).data for u in lcu.units])


def forward(w: ModelWeights, lcu: LcuPlusPlus, t: float, instr: TextInstruction | None = None) -> list[Tensor]:
    """Per-CU velocity predictions, each 3xHxW."""
    instr = lcu.instruction if instr is None else instr
    ids = None if instr.is_null else np.array([instr.token_ids])
    out = forward_batch(w, stack_maps(lcu)[None], [t], ids)
    return [out[0, i] for i in range(lcu.n_units)]
