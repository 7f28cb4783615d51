"""Mask-fill inference: guidance mixing, Euler integration and compositing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lcu import TextInstruction
from .model import ModelWeights, forward_batch
from .tensor import ShapeError, Tensor, no_grad


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    steps: int = 20
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class GenerationSpec:
    """What to generate: instruction, reference images, target input image and mask."""

    instruction: TextInstruction
    input_image: np.ndarray
    mask: np.ndarray
    references: list[np.ndarray] = field(default_factory=list)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def cfg_combine(v_cond, v_uncond, omega: float):
    """``v_uncond + omega * (v_cond - v_uncond)``; ``omega`` 1 and 0 return the branch itself."""
    if np.shape(_arr(v_cond)) != np.shape(_arr(v_uncond)):
        raise ShapeError(f"velocity shapes differ: {np.shape(_arr(v_cond))} vs {np.shape(_arr(v_uncond))}")
    if omega == 1.0:
        return v_cond
    if omega == 0.0:
        return v_uncond
    return v_uncond + (v_cond - v_uncond) * omega


def euler_integrate(
    velocity_fn: Callable[[list[np.ndarray], float], Sequence[np.ndarray]],
    x_init: Sequence[np.ndarray],
    steps: int,
) -> list[np.ndarray]:
    """Integrate from t=0 to t=1 on the uniform grid ``t_k = k / steps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xs = [np.array(x, copy=True) for x in x_init]
    dt = 1.0 / steps
    for k in range(steps):
        vs = velocity_fn(xs, k / steps)
        if len(vs) != len(xs):
            raise ShapeError("velocity_fn returned the wrong number of states")
        xs = [x + dt * np.asarray(v) for x, v in zip(xs, vs)]
        if not all(np.all(np.isfinite(x)) for x in xs):
            raise SamplingError(f"non-finite state at step {k + 1}/{steps}")
    return xs


def composite_masked(generated, input_image, mask) -> np.ndarray:
    """Per-pixel selection ``mask * generated + (1 - mask) * input`` for a binary mask.

    Implemented as a select so unmasked pixels are copied bit-exactly.
    """
    gen, inp, m = _arr(generated), _arr(input_image), _arr(mask)
    if gen.shape != inp.shape:
        raise ShapeError(f"generated {gen.shape} and input {inp.shape} differ")
    try:
        keep = np.broadcast_to(m, gen.shape) > 0
    except ValueError as exc:
        raise ShapeError(f"mask {m.shape} incompatible with image {gen.shape}") from exc
    return np.where(keep, gen, inp)


def _validate(weights: ModelWeights, spec: GenerationSpec):
    size = weights.config.image_size
    shapes = [np.shape(spec.input_image), *[np.shape(r) for r in spec.references]]
    for s in shapes:
        if s != (3, size, size):
            raise ShapeError(f"image of shape {s} does not match model geometry 3x{size}x{size}")
    if np.shape(spec.mask) != (1, size, size):
        raise ShapeError(f"mask of shape {np.shape(spec.mask)} does not match 1x{size}x{size}")
    if len(spec.references) + 1 > weights.config.max_cus:
        raise ShapeError(f"{len(spec.references) + 1} condition units exceed max_cus={weights.config.max_cus}")


def generate(weights: ModelWeights, spec: GenerationSpec, cfg: SampleConfig, stats: dict | None = None) -> np.ndarray:
    """Jointly denoise all CUs, keep the target, composite it into the input and clamp to [0, 1]."""
    _validate(weights, spec)
    dtype = weights.dtype
    size = weights.config.image_size
    cond_images = [np.asarray(r, dtype) for r in spec.references] + [np.asarray(spec.input_image, dtype)]
    masks = [np.ones((1, size, size), dtype)] * len(spec.references) + [np.asarray(spec.mask, dtype)]
    ids = None if spec.instruction.is_null else np.array([spec.instruction.token_ids])
    evals = 0

    def velocity(xs, t):
        nonlocal evals
        maps = np.stack([np.concatenate([img, m, x], axis=0) for img, m, x in zip(cond_images, masks, xs)])[None]
        with no_grad():
            v_c = forward_batch(weights, maps, [t], ids).data[0]
            evals += 1
            if cfg.guidance_scale == 1.0:
                v = v_c
            else:
                v_u = forward_batch(weights, maps, [t], None).data[0]
                evals += 1
                v = cfg_combine(v_c, v_u, cfg.guidance_scale)
        return [v[i] for i in range(len(xs))]

    rng = np.random.default_rng(cfg.seed)
    x_init = [rng.standard_normal((3, size, size)).astype(dtype) for _ in cond_images]
    final = euler_integrate(velocity, x_init, cfg.steps)
    if stats is not None:
        stats["model_evals"] = evals
        stats["steps"] = cfg.steps
        stats["evals_per_step"] = evals / cfg.steps
    out = composite_masked(final[-1], np.asarray(spec.input_image, dtype), spec.mask)
    return np.clip(out, 0.0, 1.0)


# -- metrics --------------------------------------------------------------------

PSNR_CAP_DB = 99.0


def masked_mse(generated: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    sel = np.broadcast_to(np.asarray(mask) > 0, np.shape(target))
    if not sel.any():
        raise ValueError("mask selects no pixels")
    d = np.asarray(generated, np.float64)[sel] - np.asarray(target, np.float64)[sel]
    return float(np.mean(d * d))


def psnr_from_mse(mse: float) -> float:
    """PSNR in dB for [0, 1] images, capped at 99 dB."""
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def evaluate(weights: ModelWeights, samples, cfg: SampleConfig) -> dict:
    """Mean masked-region MSE and PSNR over task samples."""
    mses, psnrs = [], []
    for i, s in enumerate(samples):
        spec = GenerationSpec(s.instruction, s.input_image, s.mask, list(s.references))
        out = generate(weights, spec, SampleConfig(cfg.steps, cfg.guidance_scale, cfg.seed + i))
        mse = masked_mse(out, s.target_image, s.mask)
        mses.append(mse)
        psnrs.append(psnr_from_mse(mse))
    return {"n": len(mses), "masked_mse": float(np.mean(mses)), "masked_psnr_db": float(np.mean(psnrs))}
