"""``lcumini`` command line: train, sample, eval, bench-attention, export-data.

Exit codes: 0 ok, 2 configuration error, 3 dataset/stage or geometry
mismatch, 4 non-finite loss, 5 corrupt checkpoint. Data goes to stdout
(CSV), diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import lcu
from .checkpoint import CheckpointError, load_checkpoint
from .lcu import ConditionUnit, TextInstruction
from .model import ModelConfig
from .ppm import PPMError, read_image, read_mask, write_image
from .sampler import GenerationSpec, SampleConfig, evaluate, generate
from .tasks import EDGE_COND, INPAINT, KINDS, SUBJECT_REF, export_dataset, make_split
from .tensor import Tensor, matmul, no_grad, softmax
from .trainer import NonFiniteError, StageError, TrainConfig, run_stage

log = logging.getLogger("lcumini")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5

STAGE_DEFAULT_TASKS = {1: (INPAINT, EDGE_COND), 2: (INPAINT, SUBJECT_REF, EDGE_COND, SUBJECT_REF)}
N_TEST = 64


class ConfigError(ValueError):
    pass


class GeometryError(ValueError):
    pass


# -- config files ---------------------------------------------------------------

def _fields(*classes) -> dict[str, dataclasses.Field]:
    out = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            out.setdefault(f.name, f)
    return out


def _coerce(key: str, raw, f: dataclasses.Field):
    ftype = str(f.type)
    try:
        if isinstance(raw, str):
            if ftype.startswith("dict"):
                return None if raw.strip() in ("", "none", "null") else json.loads(raw)
            if ftype == "str":
                return raw
            raw = json.loads(raw)
        if ftype == "int":
            if isinstance(raw, bool) or int(raw) != raw:
                raise ValueError
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "str":
            return str(raw)
        return raw
    except (ValueError, TypeError, json.JSONDecodeError):
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {ftype})") from None


def parse_config(text: str, allowed: dict[str, dataclasses.Field]) -> dict:
    """Parse ``key = value`` lines (``#`` comments) or a JSON object; unknown keys are errors."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            items = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
    else:
        items = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            items[k] = v
    unknown = sorted(set(items) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return {k: _coerce(k, v, allowed[k]) for k, v in items.items()}


def _load_config(path: str | None, allowed) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, allowed)


def _seed(arg_seed: int | None, default: int) -> int:
    env = os.environ.get("LCUMINI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LCUMINI_SEED must be an integer, got {env!r}") from None
    return default if arg_seed is None else arg_seed


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    values = _load_config(args.config, _fields(TrainConfig, ModelConfig))
    model_kw = {k: v for k, v in values.items() if k in model_keys}
    train_kw = {k: v for k, v in values.items() if k not in model_keys}
    train_kw["stage"] = args.stage
    train_kw["seed"] = _seed(args.seed, train_kw.get("seed", 0))
    try:
        cfg = TrainConfig(**train_kw)
        model_cfg = ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    if args.stage == 2 and args.init is None and not args.from_scratch:
        raise StageError(
            "two-stage rule: stage 2 fine-tunes a stage-1 checkpoint; pass --init PATH "
            "(or --from-scratch for the ablation baseline)"
        )
    init = None
    if args.init is not None:
        init, _ = load_checkpoint(args.init)
        model_cfg = init.config

    kinds = tuple(k.strip() for k in cfg.tasks.split(",") if k.strip()) or STAGE_DEFAULT_TASKS[args.stage]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"unknown task kinds {bad}")
    split = make_split(kinds, cfg.n_samples, N_TEST, cfg.seed, model_cfg.image_size)

    print(
        f"config: lr={cfg.lr!r} weight_decay={cfg.weight_decay!r} clip_norm={cfg.clip_norm!r} "
        f"uncond_prob={cfg.uncond_prob!r} guidance_scale={cfg.guidance_scale!r} stage={cfg.stage} tasks={','.join(kinds)}",
        file=sys.stderr,
    )
    report = run_stage(args.stage, split.train, cfg, init=init, model_config=model_cfg, out_dir=args.out,
                       allow_fresh=args.from_scratch)
    last = report.records[-1] if report.records else None
    print(
        f"done: {cfg.steps} steps in {report.wall_time:.1f}s, final loss "
        f"{last.total if last else float('nan'):.4f}, checkpoint {report.checkpoint_id}",
        file=sys.stderr,
    )
    return EXIT_OK


def _read_inputs(args, size: int):
    try:
        refs = [read_image(p) for p in (args.ref or [])]
        image = read_image(args.image) if args.image else np.zeros((3, size, size), np.float32)
        mask = read_mask(args.mask) if args.mask else np.ones((1, size, size), np.float32)
    except (OSError, PPMError) as exc:
        raise ConfigError(str(exc)) from exc
    for name, arr in [("image", image), ("mask", mask), *[(f"ref {i}", r) for i, r in enumerate(refs)]]:
        if arr.shape[1:] != (size, size):
            raise GeometryError(f"{name} is {arr.shape[2]}x{arr.shape[1]}, checkpoint expects {size}x{size}")
    return refs, image, mask


def cmd_sample(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    size = weights.config.image_size
    refs, image, mask = _read_inputs(args, size)
    try:
        instr = TextInstruction.from_words(args.prompt or "")
        cfg = SampleConfig(steps=args.steps, guidance_scale=args.omega, seed=_seed(args.seed, 0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stats: dict = {}
    out = generate(weights, GenerationSpec(instr, image, mask, refs), cfg, stats)
    write_image(args.out, out)
    per_step = stats["model_evals"] // cfg.steps
    print(f"sampled {cfg.steps} steps, {per_step} forward pass{'es' if per_step != 1 else ''} per step "
          f"(omega={cfg.guidance_scale!r}), wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    seed = _seed(args.split_seed, 0)
    split = make_split(args.kind, args.n_train, args.n_test, seed, weights.config.image_size)
    cfg = SampleConfig(steps=args.steps, guidance_scale=args.omega, seed=args.sample_seed)
    res = evaluate(weights, split.test, cfg)
    print("kind,n,masked_mse,masked_psnr_db")
    print(f"{args.kind},{res['n']},{res['masked_mse']!r},{res['masked_psnr_db']!r}")
    return EXIT_OK


def _attention_seconds(tokens: int, dim: int, repeats: int, rng) -> float:
    q = Tensor(rng.standard_normal((tokens, dim)).astype(np.float32))
    k = Tensor(rng.standard_normal((tokens, dim)).astype(np.float32))
    v = Tensor(rng.standard_normal((tokens, dim)).astype(np.float32))
    scale = 1.0 / np.sqrt(dim)
    times = []
    with no_grad():
        for _ in range(repeats + 1):
            t0 = time.perf_counter()
            matmul(softmax(matmul(q, k.transpose()) * scale, axis=-1), v)
            times.append(time.perf_counter() - t0)
    return statistics.median(times[1:])  # first run is warm-up


def bench_attention(size: int, patch: int, dim: int, repeats: int = 5, seed: int = 0) -> dict:
    """Token counts, FLOPs and median attention wall time, legacy LCU vs LCU++ (0-ref)."""
    unit = ConditionUnit(np.zeros((3, size, size)), np.ones((1, size, size)), np.zeros((3, size, size)))
    pp = lcu.assemble_lcu_pp(lcu.LcuPlusPlus(TextInstruction.null(), [unit]), patch)
    legacy = lcu.assemble_legacy_lcu_0ref(unit, patch)
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        t_pp = _attention_seconds(pp.total_tokens, dim, repeats, rng)
        t_legacy = _attention_seconds(legacy.total_tokens, dim, repeats, rng)
    f_pp, f_legacy = lcu.attention_cost(pp, dim), lcu.attention_cost(legacy, dim)
    return {
        "height": size, "width": size, "patch": patch, "dim": dim,
        "tokens_lcupp": pp.total_tokens, "tokens_legacy": legacy.total_tokens,
        "token_ratio": legacy.total_tokens / pp.total_tokens,
        "flops_lcupp": f_pp, "flops_legacy": f_legacy, "flop_ratio": f_legacy / f_pp,
        "time_lcupp_s": t_pp, "time_legacy_s": t_legacy, "time_ratio": t_legacy / t_pp,
    }


def cmd_bench_attention(args) -> int:
    if args.repeats < 5:
        raise ConfigError("--repeats must be >= 5")
    rows = []
    for size in args.size:
        if size % args.patch:
            raise ConfigError(f"patch {args.patch} does not divide size {size}")
        rows.append(bench_attention(size, args.patch, args.dim, args.repeats))
    print("# flops = 2*T^2*d (QK^T) + 2*T^2*d (attention x V), T = total tokens", file=sys.stderr)
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return EXIT_OK


def cmd_export_data(args) -> int:
    split = make_split(args.kind, args.n, 1, _seed(args.seed, 0), args.size)
    index = export_dataset(split.train, args.out)
    print(f"wrote {len(split.train)} samples, index {index}", file=sys.stderr)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcumini", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", help="key = value or JSON config file")
    t.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2 without --init (ablation)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", help="target input image (P6); default all-zero")
    s.add_argument("--mask", help="mask (P5/P6, nonzero = generate); default all-ones")
    s.add_argument("--ref", action="append", help="reference image (repeatable)")
    s.add_argument("--prompt", default="", help="instruction words")
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--omega", type=float, default=1.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="masked-region PSNR/MSE on a held-out split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--kind", choices=KINDS, default=INPAINT)
    e.add_argument("--n-train", type=int, default=2048)
    e.add_argument("--n-test", type=int, default=N_TEST)
    e.add_argument("--split-seed", type=int)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--omega", type=float, default=1.0)
    e.add_argument("--sample-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attention", help="legacy LCU vs LCU++ attention cost")
    b.add_argument("--size", type=int, nargs="+", default=[64])
    b.add_argument("--patch", type=int, default=4)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench_attention)

    x = sub.add_parser("export-data", help="write a synthetic dataset as PPM + index.jsonl")
    x.add_argument("--kind", choices=KINDS, default=INPAINT)
    x.add_argument("--n", type=int, default=16)
    x.add_argument("--size", type=int, default=16)
    x.add_argument("--seed", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NonFiniteError as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
