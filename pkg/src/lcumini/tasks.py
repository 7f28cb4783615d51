"""Deterministic synthetic tasks: 0-ref inpainting, 0-ref edge-conditioned
generation and 1-ref subject consistency.

Every generator is a pure function of ``(seed, size)``. Scenes are flat-colored
squares and disks on one of two solid backgrounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lcu import TextInstruction
from .ppm import write_image

INPAINT = "inpaint"
EDGE_COND = "edge_cond"
SUBJECT_REF = "subject_ref"
KINDS = (INPAINT, EDGE_COND, SUBJECT_REF)
ZERO_REF_KINDS = (INPAINT, EDGE_COND)

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.9, 0.1, 0.85),
    "orange": (1.0, 0.55, 0.05),
    "purple": (0.5, 0.1, 0.7),
}
BACKGROUNDS = {"light": (0.85, 0.85, 0.8), "dark": (0.12, 0.12, 0.16)}
SHAPES = ("square", "disk")
EDGE_THRESHOLD = 0.1
_SALT = {INPAINT: 11, EDGE_COND: 23, SUBJECT_REF: 37}


@dataclass
class TaskSample:
    kind: str
    references: list[np.ndarray]
    input_image: np.ndarray
    mask: np.ndarray
    target_image: np.ndarray
    instruction: TextInstruction
    seed: int

    @property
    def n_units(self) -> int:
        return len(self.references) + 1


@dataclass
class Shape:
    kind: str
    color: str
    top: int
    left: int
    side: int

    def footprint(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size]
        inside_box = (yy >= self.top) & (yy < self.top + self.side) & (xx >= self.left) & (xx < self.left + self.side)
        if self.kind == "square":
            return inside_box
        r = self.side / 2.0
        cy, cx = self.top + r, self.left + r
        return inside_box & ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r)

    def box(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), bool)
        m[self.top : self.top + self.side, self.left : self.left + self.side] = True
        return m


def _rng(seed: int, size: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(size), _SALT[kind]])


def _side_range(size: int) -> tuple[int, int]:
    return max(3, size // 5), max(3, size // 2)


def _random_shape(rng, size, color=None, kind=None, side=None) -> Shape:
    lo, hi = _side_range(size)
    side = int(rng.integers(lo, hi + 1)) if side is None else side
    return Shape(
        kind=kind or SHAPES[rng.integers(len(SHAPES))],
        color=color or list(COLORS)[rng.integers(len(COLORS))],
        top=int(rng.integers(0, size - side + 1)),
        left=int(rng.integers(0, size - side + 1)),
        side=side,
    )


def render(shapes: Sequence[Shape], background: str, size: int) -> np.ndarray:
    img = np.empty((3, size, size), np.float32)
    img[:] = np.array(BACKGROUNDS[background], np.float32)[:, None, None]
    for s in shapes:
        fp = s.footprint(size)
        img[:, fp] = np.array(COLORS[s.color], np.float32)[:, None]
    return img


def edge_map(img: np.ndarray) -> np.ndarray:
    """Binary edges from forward-difference gradient magnitude, replicated to 3 channels."""
    dy = np.zeros_like(img)
    dx = np.zeros_like(img)
    dy[:, :-1] = img[:, 1:] - img[:, :-1]
    dx[:, :, :-1] = img[:, :, 1:] - img[:, :, :-1]
    mag = np.sqrt((dy**2 + dx**2).sum(axis=0))
    edges = (mag > EDGE_THRESHOLD).astype(np.float32)
    return np.repeat(edges[None], 3, axis=0)


def _check_size(size: int):
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")


def gen_inpaint_sample(seed: int, size: int = 16) -> TaskSample:
    _check_size(size)
    rng = _rng(seed, size, INPAINT)
    bg = list(BACKGROUNDS)[rng.integers(2)]
    shapes = [_random_shape(rng, size) for _ in range(int(rng.integers(1, 4)))]
    target = render(shapes, bg, size)
    hole = shapes[-1]  # drawn last, so nothing occludes it
    mask = hole.box(size)[None].astype(np.float32)
    inp = target * (1.0 - mask)
    instr = TextInstruction.from_words(["fill", hole.color, hole.kind])
    return TaskSample(INPAINT, [], inp.astype(np.float32), mask, target, instr, seed)


def gen_edge_cond_sample(seed: int, size: int = 16) -> TaskSample:
    _check_size(size)
    rng = _rng(seed, size, EDGE_COND)
    bg = list(BACKGROUNDS)[rng.integers(2)]
    shapes = [_random_shape(rng, size) for _ in range(int(rng.integers(1, 4)))]
    target = render(shapes, bg, size)
    colors = list(dict.fromkeys(s.color for s in shapes))
    instr = TextInstruction.from_words(["render", *colors])
    mask = np.ones((1, size, size), np.float32)
    return TaskSample(EDGE_COND, [], edge_map(target), mask, target, instr, seed)


def gen_subject_ref_sample(seed: int, size: int = 16) -> TaskSample:
    _check_size(size)
    rng = _rng(seed, size, SUBJECT_REF)
    bg_ref = list(BACKGROUNDS)[rng.integers(2)]
    bg_tar = next(b for b in BACKGROUNDS if b != bg_ref)
    subject = _random_shape(rng, size)
    moved = _random_shape(rng, size, color=subject.color, kind=subject.kind, side=subject.side)
    reference = render([subject], bg_ref, size)
    target = render([moved], bg_tar, size)
    instr = TextInstruction.from_words(["place", bg_tar])
    return TaskSample(
        SUBJECT_REF,
        [reference],
        np.zeros((3, size, size), np.float32),
        np.ones((1, size, size), np.float32),
        target,
        instr,
        seed,
    )


GENERATORS = {INPAINT: gen_inpaint_sample, EDGE_COND: gen_edge_cond_sample, SUBJECT_REF: gen_subject_ref_sample}


def generate(kind: str, seed: int, size: int = 16) -> TaskSample:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {KINDS}") from None
    return gen(seed, size)


@dataclass
class Split:
    train: list[TaskSample] = field(default_factory=list)
    test: list[TaskSample] = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.test))


def make_split(kinds: str | Sequence[str], n_train: int, n_test: int, seed: int, size: int = 16) -> Split:
    """Train/test sets over disjoint per-sample seeds.

    Kinds are interleaved round-robin, so a two-kind mix is exactly 1:1.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    kinds = [kinds] if isinstance(kinds, str) else list(kinds)
    seeds = np.random.default_rng(seed).choice(2**31 - 1, n_train + n_test, replace=False)
    samples = [generate(kinds[i % len(kinds)], int(s), size) for i, s in enumerate(seeds)]
    return Split(samples[:n_train], samples[n_train:])


def export_dataset(samples: Sequence[TaskSample], directory: str | Path) -> Path:
    """Write samples as PPM files plus a JSON-lines ``index.jsonl``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    index = out / "index.jsonl"
    with index.open("w") as fh:
        for i, s in enumerate(samples):
            stem = f"{i:05d}_{s.kind}"
            files = {"input": f"{stem}_input.ppm", "mask": f"{stem}_mask.ppm", "target": f"{stem}_target.ppm"}
            write_image(out / files["input"], s.input_image)
            write_image(out / files["mask"], s.mask)
            write_image(out / files["target"], s.target_image)
            refs = []
            for j, r in enumerate(s.references):
                name = f"{stem}_ref{j}.ppm"
                write_image(out / name, r)
                refs.append(name)
            rec = {"kind": s.kind, "seed": s.seed, "files": {**files, "references": refs},
                   "instruction": list(s.instruction.token_ids)}
            fh.write(json.dumps(rec) + "\n")
    return index
