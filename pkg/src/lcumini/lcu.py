"""Condition units and their assembly into transformer inputs.

Each condition unit (CU) stacks an image block, a binary mask and a noisy
latent along the channel axis into a single 7-channel map. An LCU++ input is
an ordered list of such maps (references first, target last) that the model
flattens into tokens and concatenates along the sequence axis.

The legacy LCU layout for 0-ref tasks keeps condition and noise as two
separate 4-channel maps, which doubles the token count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, concat, split

IMAGE_CHANNELS = 3
MASK_CHANNELS = 1
CU_CHANNELS = IMAGE_CHANNELS + MASK_CHANNELS + IMAGE_CHANNELS

TASK_WORDS = ("fill", "render", "place")
COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple")
SHAPE_WORDS = ("square", "disk")
BACKGROUND_WORDS = ("light", "dark")
VOCAB: tuple[str, ...] = TASK_WORDS + COLOR_WORDS + SHAPE_WORDS + BACKGROUND_WORDS
VOCAB_SIZE = len(VOCAB)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

REFERENCE = "reference"
TARGET = "target"


@dataclass(frozen=True)
class TextInstruction:
    token_ids: tuple[int, ...] = ()
    is_null: bool = True

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        object.__setattr__(self, "token_ids", ids)
        if (len(ids) == 0) != self.is_null:
            raise ValueError("instruction token_ids must be empty iff is_null")
        bad = [i for i in ids if not 0 <= i < VOCAB_SIZE]
        if bad:
            raise ValueError(f"token ids {bad} outside vocabulary of size {VOCAB_SIZE}")

    @classmethod
    def null(cls) -> "TextInstruction":
        return cls((), True)

    @classmethod
    def from_ids(cls, ids: Sequence[int]) -> "TextInstruction":
        ids = tuple(ids)
        return cls(ids, len(ids) == 0)

    @classmethod
    def from_words(cls, words: str | Sequence[str]) -> "TextInstruction":
        if isinstance(words, str):
            words = words.split()
        unknown = [w for w in words if w not in WORD_TO_ID]
        if unknown:
            raise ValueError(f"unknown instruction words: {unknown}")
        return cls.from_ids([WORD_TO_ID[w] for w in words])

    def words(self) -> list[str]:
        return [VOCAB[i] for i in self.token_ids]


def _as_chw(x, channels: int, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 3 or arr.shape[0] != channels:
        raise ShapeError(f"{what} must have shape {channels}xHxW, got {arr.shape}")
    return arr


@dataclass
class ConditionUnit:
    """One CU: image block, binary mask (1 = generate) and noisy latent."""

    image: np.ndarray
    mask: np.ndarray
    noisy: np.ndarray
    role: str = TARGET

    def __post_init__(self):
        self.image = _as_chw(self.image, IMAGE_CHANNELS, "image")
        self.mask = _as_chw(self.mask, MASK_CHANNELS, "mask")
        self.noisy = _as_chw(self.noisy, IMAGE_CHANNELS, "noisy")
        hw = self.image.shape[1:]
        if self.mask.shape[1:] != hw or self.noisy.shape[1:] != hw:
            raise ShapeError(
                f"CU blocks disagree on HxW: image {self.image.shape}, mask {self.mask.shape}, noisy {self.noisy.shape}"
            )
        if self.role not in (REFERENCE, TARGET):
            raise ValueError(f"unknown CU role {self.role!r}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be strictly binary")
        if self.role == REFERENCE and not np.all(self.mask == 1):
            raise ValueError("reference CU must carry an all-ones mask")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass
class LcuPlusPlus:
    instruction: TextInstruction
    units: list[ConditionUnit] = field(default_factory=list)

    def __post_init__(self):
        if not self.units:
            raise ValueError("an LCU++ needs at least one condition unit")
        roles = [u.role for u in self.units]
        if roles[-1] != TARGET or roles.count(TARGET) != 1:
            raise ValueError("exactly one target CU is required and it must be last")
        hw = self.units[0].hw
        if any(u.hw != hw for u in self.units):
            raise ShapeError("all condition units must share HxW")

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_ref(self) -> int:
        return len(self.units) - 1

    @property
    def hw(self) -> tuple[int, int]:
        return self.units[0].hw


@dataclass(frozen=True)
class TokenLayout:
    maps: tuple[Tensor, ...]
    tokens_per_cu: int
    total_tokens: int


def build_cu_map(unit: ConditionUnit) -> Tensor:
    """Channel-concatenate ``[image; mask; noisy]`` into a 7xHxW map."""
    return concat([Tensor(unit.image), Tensor(unit.mask), Tensor(unit.noisy)], axis=0)


def split_cu_map(cu_map: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Inverse of :func:`build_cu_map`."""
    if cu_map.ndim != 3 or cu_map.shape[0] != CU_CHANNELS:
        raise ShapeError(f"CU map must be {CU_CHANNELS}xHxW, got {cu_map.shape}")
    image, mask, noisy = split(cu_map, [IMAGE_CHANNELS, MASK_CHANNELS, IMAGE_CHANNELS], axis=0)
    return image, mask, noisy


def _tokens_per_map(h: int, w: int, patch: int) -> int:
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide {h}x{w}")
    return (h // patch) * (w // patch)


def assemble_lcu_pp(lcu: LcuPlusPlus, patch: int) -> TokenLayout:
    per = _tokens_per_map(*lcu.hw, patch)
    maps = tuple(build_cu_map(u) for u in lcu.units)
    return TokenLayout(maps, per, per * len(maps))


def assemble_legacy_lcu_0ref(unit: ConditionUnit, patch: int) -> TokenLayout:
    """Legacy 0-ref layout: ``[I; M]`` and ``[X_t; M]`` as separate token sequences."""
    per = _tokens_per_map(*unit.hw, patch)
    mask = Tensor(unit.mask)
    cond = concat([Tensor(unit.image), mask], axis=0)
    noise = concat([Tensor(unit.noisy), mask], axis=0)
    return TokenLayout((cond, noise), per, 2 * per)


def attention_cost(layout: TokenLayout | int, model_dim: int) -> int:
    """Multiply-add FLOPs of one attention pass: ``2*T^2*d`` for QK^T plus ``2*T^2*d`` for AV."""
    t = layout if isinstance(layout, int) else layout.total_tokens
    if t <= 0 or model_dim <= 0:
        raise ValueError("token count and model_dim must be positive")
    return 2 * t * t * model_dim + 2 * t * t * model_dim
