"""Two-stage training: AdamW, global-norm clipping, instruction dropout, LoRA."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flow
from .checkpoint import save_checkpoint, to_bytes
from .lcu import TextInstruction
from .model import LoraAdapter, ModelConfig, ModelWeights, forward_batch, init_weights, linear_names
from .tasks import TaskSample
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteError(TrainingError):
    pass


class StageError(ValueError):
    """Dataset or initialization does not satisfy the two-stage rules."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    uncond_prob: float = 0.1
    guidance_scale: float = 1.0
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    stage: int = 1
    adapter: dict | None = None
    n_samples: int = 2048
    tasks: str = ""
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError(f"uncond_prob {self.uncond_prob} outside [0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.adapter is not None:
            missing = {"rank", "alpha", "targets"} - set(self.adapter)
            if missing:
                raise ValueError(f"adapter config missing {sorted(missing)}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- primitives -----------------------------------------------------------------

def cfg_dropout(instr: TextInstruction, rng: np.random.Generator, p: float) -> TextInstruction:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    return TextInstruction.null() if rng.random() < p else instr


def global_norm(grads: Sequence[np.ndarray | None]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads if g is not None))


def clip_gradients(grads: Sequence[np.ndarray | None], clip_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    g = global_norm(grads)
    if not math.isfinite(g):
        raise NonFiniteError("non-finite gradient norm; step aborted")
    if g <= clip_norm:
        return 1.0
    scale = clip_norm / g
    for gr in grads:
        if gr is not None:
            gr *= scale
    return scale


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One AdamW update using each tensor's ``.grad`` (missing grad counts as zero)."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# -- LoRA -----------------------------------------------------------------------

def attach_lora(weights: ModelWeights, rank: int, alpha: float, targets: Sequence[str], seed: int = 0) -> ModelWeights:
    """Adapted view: base tensors frozen (shared storage), ``down`` random, ``up`` zero."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    known = set(linear_names(weights.config))
    unknown = [t for t in targets if t not in known]
    if unknown:
        raise KeyError(f"unknown adapter targets {unknown}; linear maps are {sorted(known)}")
    rng = np.random.default_rng(seed)
    frozen = {k: Tensor(p.data, requires_grad=False) for k, p in weights.params.items()}
    adapters = {}
    dt = weights.dtype
    for name in targets:
        d_in, d_out = weights.params[f"{name}.weight"].shape
        down = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, rank)).astype(dt), requires_grad=True)
        up = Tensor(np.zeros((rank, d_out), dt), requires_grad=True)
        adapters[name] = LoraAdapter(down, up, alpha / rank)
    cfg = {"rank": rank, "alpha": alpha, "targets": list(targets)}
    return ModelWeights(weights.config, frozen, adapters, cfg)


def detach_lora(weights: ModelWeights) -> ModelWeights:
    """Base model without adapters (storage shared with the adapted view)."""
    return ModelWeights(weights.config, {k: Tensor(p.data, requires_grad=True) for k, p in weights.params.items()})


def lora_param_count(weights: ModelWeights, rank: int, targets: Sequence[str]) -> int:
    return sum(rank * sum(weights.params[f"{t}.weight"].shape) for t in targets)


# -- training loop --------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    total: float
    ref: float
    tar: float
    grad_norm: float
    grad_norm_postclip: float
    was_unconditional: int  # number of samples in the batch that got the null instruction


@dataclass
class TrainReport:
    records: list[StepRecord]
    wall_time: float
    checkpoint_id: str
    weights: ModelWeights
    config: TrainConfig
    n_samples_seen: int = 0

    CSV_COLUMNS = ("step", "total", "ref", "tar", "grad_norm", "was_unconditional")

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def header_lines(self) -> list[str]:
        c = self.config
        return [
            f"# lr={c.lr!r} weight_decay={c.weight_decay!r} clip_norm={c.clip_norm!r} "
            f"uncond_prob={c.uncond_prob!r} guidance_scale={c.guidance_scale!r}",
            f"# stage={c.stage} steps={c.steps} batch_size={c.batch_size} seed={c.seed} checkpoint={self.checkpoint_id}",
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            for line in self.header_lines():
                fh.write(line + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.step, repr(r.total), repr(r.ref), repr(r.tar), repr(r.grad_norm), r.was_unconditional])


def smoothed(values: Sequence[float], window: int = 200) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def sample_cus(sample: TaskSample) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Condition images, masks and data targets per CU (references first)."""
    images, masks, data = [], [], []
    for ref in sample.references:
        images.append(ref)
        masks.append(np.ones_like(sample.mask))
        data.append(ref)
    images.append(sample.input_image)
    masks.append(sample.mask)
    data.append(sample.target_image)
    return images, masks, data


def _prepare(sample: TaskSample, cfg: TrainConfig, rng: np.random.Generator, dtype):
    instr = cfg_dropout(sample.instruction, rng, cfg.uncond_prob)
    t = flow.sample_timestep(rng)
    images, masks, data = sample_cus(sample)
    maps, targets = [], []
    for img, m, x1 in zip(images, masks, data):
        st = flow.make_flow_state(x1.astype(dtype), t, rng)
        maps.append(np.concatenate([img, m, st.xt], axis=0))
        targets.append(flow.velocity_target(st.x0, st.x1))
    return instr, t, np.stack(maps).astype(dtype), np.stack(targets).astype(dtype)


def train_step(
    weights: ModelWeights,
    batch: Sequence[TaskSample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    state: AdamState,
) -> tuple[flow.LossBreakdown, StepRecord]:
    """Forward/backward on one batch, then clip and AdamW.

    Samples are grouped by (CU count, instruction length) so each group runs
    as one batched forward; the group losses are weighted by group size.
    """
    if not batch:
        raise ValueError("empty batch")
    if cfg.stage == 1 and any(s.n_units != 1 for s in batch):
        raise StageError("stage-1 batches may only contain 0-ref samples")
    dtype = weights.dtype
    prepared = [_prepare(s, cfg, rng, dtype) for s in batch]
    groups: dict[tuple, list[int]] = {}
    for i, (instr, _, maps, _) in enumerate(prepared):
        key = (maps.shape[0], None if instr.is_null else len(instr.token_ids))
        groups.setdefault(key, []).append(i)

    trainable = weights.trainable()
    weights.zero_grad()
    total = ref = tar = None
    for (n, text_len), idx in groups.items():
        maps = np.stack([prepared[i][2] for i in idx])
        u = np.stack([prepared[i][3] for i in idx])
        ts = [prepared[i][1] for i in idx]
        ids = None if text_len is None else np.array([prepared[i][0].token_ids for i in idx])
        v = forward_batch(weights, maps, ts, ids)
        lb = flow.compute_loss([v[:, k] for k in range(n)], [u[:, k] for k in range(n)], n - 1)
        frac = len(idx) / len(batch)
        parts = (lb.total * frac, lb.ref * frac, lb.tar * frac)
        if total is None:
            total, ref, tar = parts
        else:
            total, ref, tar = total + parts[0], ref + parts[1], tar + parts[2]
    loss = flow.LossBreakdown(total, ref, tar)
    if not all(math.isfinite(x) for x in loss.values()):
        raise NonFiniteError(f"non-finite loss {loss.values()} (stage {cfg.stage}, step {state.step + 1})")
    total.backward()
    grads = [p.grad for p in trainable.values()]
    pre = global_norm(grads)
    clip_gradients(grads, cfg.clip_norm)
    post = global_norm(grads)
    adamw_step(trainable, state, cfg.lr, cfg.weight_decay)
    n_null = sum(1 for p in prepared if p[0].is_null)
    rec = StepRecord(state.step, *loss.values(), pre, post, n_null)
    return loss, rec


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffled every epoch."""
    buf: list[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch_size]
        buf = buf[batch_size:]


def run_stage(
    stage: int,
    dataset: Sequence[TaskSample],
    cfg: TrainConfig,
    init: ModelWeights | None = None,
    model_config: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    allow_fresh: bool = False,
) -> TrainReport:
    """Run ``cfg.steps`` training steps of the given stage.

    Stage 1 accepts only 0-ref samples. Stage 2 must start from a stage-1
    checkpoint (``init``) unless ``allow_fresh`` is set for the ablation.
    """
    if stage != cfg.stage:
        cfg = TrainConfig(**{**cfg.to_dict(), "stage": stage})
    if not dataset:
        raise StageError("empty dataset")
    if stage == 1:
        bad = [s for s in dataset if s.n_units != 1]
        if bad:
            raise StageError(f"stage 1 trains on 0-ref tasks only; got {len(bad)} N-ref samples (e.g. {bad[0].kind})")
    if stage == 2 and init is None and not allow_fresh:
        raise StageError("stage 2 fine-tunes a stage-1 checkpoint; pass init (or allow_fresh for the ablation)")

    weights = init if init is not None else init_weights(model_config or ModelConfig(), seed=cfg.seed)
    if cfg.adapter:
        weights = attach_lora(weights, cfg.adapter["rank"], cfg.adapter["alpha"], cfg.adapter["targets"], seed=cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(dataset), cfg.batch_size, rng)
    state = AdamState()
    records = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        _, rec = train_step(weights, [dataset[i] for i in idx], cfg, rng, state)
        records.append(rec)
        if step % 500 == 0:
            log.info("stage %d step %d loss %.4f", stage, step, rec.total)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
            save_checkpoint(out / f"checkpoint_step{step:06d}.lcu", weights, cfg.to_dict())
    wall = time.perf_counter() - t0
    if out is not None:
        ckpt_id = save_checkpoint(out / "checkpoint.lcu", weights, cfg.to_dict())
    else:
        ckpt_id = hashlib.sha256(to_bytes(weights, cfg.to_dict())).hexdigest()[:16]
    report = TrainReport(records, wall, ckpt_id, weights, cfg, cfg.steps * cfg.batch_size)
    if out is not None:
        report.write_csv(out / "report.csv")
    return report


def steps_to_reach(values: Sequence[float], level: float, window: int = 200) -> int | None:
    """First 1-based step whose full-window trailing mean is <= ``level``."""
    s = smoothed(values, window)
    hit = np.nonzero(s[window - 1 :] <= level)[0]
    return int(hit[0]) + window if hit.size else None
