"""Linear-path flow matching: interpolants, velocity targets and the split loss.

Orientation: ``t = 0`` is pure noise ``x0``, ``t = 1`` is data ``x1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, mean, mul, sub


@dataclass
class FlowState:
    t: float
    x0: np.ndarray
    x1: np.ndarray
    xt: np.ndarray


@dataclass
class LossBreakdown:
    """Differentiable loss parts; ``total`` is literally ``ref + tar``."""

    total: Tensor
    ref: Tensor
    tar: Tensor

    def values(self) -> tuple[float, float, float]:
        return float(self.total), float(self.ref), float(self.tar)


def sample_timestep(rng: np.random.Generator) -> float:
    return float(rng.uniform(0.0, 1.0))


def _check_pair(x0, x1):
    if np.shape(x0) != np.shape(x1):
        raise ShapeError(f"shape mismatch: {np.shape(x0)} vs {np.shape(x1)}")


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    _check_pair(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    # endpoint-exact at t=0 and t=1
    return ((1.0 - t) * x0 + t * x1).astype(np.result_type(x0, x1), copy=False)


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    _check_pair(x0, x1)
    return np.asarray(x1) - np.asarray(x0)


def make_flow_state(x1: np.ndarray, t: float, rng: np.random.Generator) -> FlowState:
    x1 = np.asarray(x1)
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    return FlowState(t, x0, x1, interpolate(x0, x1, t))


def _mse(v: Tensor, u) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=v.dtype))
    if v.shape != u.shape:
        raise ShapeError(f"prediction {v.shape} and target {u.shape} differ")
    d = sub(v, u)
    return mean(mul(d, d))


def compute_loss(v: Sequence[Tensor], u: Sequence, n_ref: int) -> LossBreakdown:
    """Split MSE: mean over the first ``n_ref`` CUs plus MSE on the last (target) CU.

    Each entry of ``v``/``u`` may carry leading batch dimensions; the per-element
    mean then also averages over the batch.
    """
    if len(v) != len(u):
        raise ShapeError(f"{len(v)} predictions vs {len(u)} targets")
    if n_ref != len(v) - 1:
        raise ValueError(f"n_ref={n_ref} inconsistent with {len(v)} condition units")
    tar = _mse(v[-1], u[-1])
    if n_ref == 0:
        ref = Tensor(np.zeros((), dtype=tar.dtype))
    else:
        parts = [_mse(vi, ui) for vi, ui in zip(v[:-1], u[:-1])]
        ref = parts[0]
        for p in parts[1:]:
            ref = ref + p
        ref = ref * (1.0 / n_ref)
    return LossBreakdown(ref + tar, ref, tar)
