"""Stage-structured discrete design space for convolutional backbones.

A design picks, per stage, a block depth, a width multiplier and a kernel size,
plus one network-wide quantization bit-width. Designs live in two equivalent
representations: the structured `DesignPoint` and a flat vector in [0, 1]^(3S+1)
used by continuous optimizers. The encoding places each choice at the center of
its cell so decode(encode(x)) is the identity.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class InvalidDesignError(ValueError):
    """Design is not a member of the space it was used with."""


class DimensionMismatchError(ValueError):
    """Encoded vector length does not match the space's encoding width."""


class SpaceTooLargeError(ValueError):
    """Refusing to enumerate a space past the caller's cardinality limit."""


class StageChoice(NamedTuple):
    depth: int
    width: float
    kernel: int


@dataclass(frozen=True)
class DesignPoint:
    """One concrete design: per-stage choices plus a global bit-width."""

    stages: tuple[StageChoice, ...]
    bits: int

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(StageChoice(*s) for s in self.stages))
        if not self.stages:
            raise InvalidDesignError("design needs at least one stage")


def _choice_tuple(name: str, values: Iterable) -> tuple:
    vals = tuple(values)
    if not vals:
        raise ValueError(f"{name} must be non-empty")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {vals}")
    return vals


@dataclass(frozen=True)
class DesignSpace:
    """Cartesian space of per-stage (depth, width, kernel) choices and bit-widths.

    Choice lists are strictly increasing; kernel sizes must be odd. The flat
    encoding is stage-major, (depth, width, kernel) within a stage, bits last.
    """

    num_stages: int
    depth_choices: tuple[int, ...]
    width_choices: tuple[float, ...]
    kernel_choices: tuple[int, ...]
    bits_choices: tuple[int, ...]

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")
        object.__setattr__(self, "depth_choices", _choice_tuple("depth_choices", self.depth_choices))
        object.__setattr__(self, "width_choices", _choice_tuple("width_choices", self.width_choices))
        object.__setattr__(self, "kernel_choices", _choice_tuple("kernel_choices", self.kernel_choices))
        object.__setattr__(self, "bits_choices", _choice_tuple("bits_choices", self.bits_choices))
        if any(d < 1 for d in self.depth_choices):
            raise ValueError("depths must be positive integers")
        if any(w <= 0 for w in self.width_choices):
            raise ValueError("widths must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_choices):
            raise ValueError("kernel sizes must be odd positive integers")
        if any(b < 1 for b in self.bits_choices):
            raise ValueError("bit-widths must be positive integers")

    @property
    def encoding_width(self) -> int:
        return 3 * self.num_stages + 1

    @property
    def cardinality(self) -> int:
        per_stage = len(self.depth_choices) * len(self.width_choices) * len(self.kernel_choices)
        return per_stage**self.num_stages * len(self.bits_choices)

    def _axes(self) -> list[tuple]:
        axes: list[tuple] = []
        for _ in range(self.num_stages):
            axes.extend((self.depth_choices, self.width_choices, self.kernel_choices))
        axes.append(self.bits_choices)
        return axes

    def contains(self, x: DesignPoint) -> bool:
        if len(x.stages) != self.num_stages or x.bits not in self.bits_choices:
            return False
        return all(
            s.depth in self.depth_choices
            and s.width in self.width_choices
            and s.kernel in self.kernel_choices
            for s in x.stages
        )

    def indices_of(self, x: DesignPoint) -> tuple[int, ...]:
        """Flat index tuple, stage-major with bits last; the canonical serialization."""
        if not self.contains(x):
            raise InvalidDesignError(f"design {x} is not in this space")
        idx: list[int] = []
        for s in x.stages:
            idx.append(self.depth_choices.index(s.depth))
            idx.append(self.width_choices.index(s.width))
            idx.append(self.kernel_choices.index(s.kernel))
        idx.append(self.bits_choices.index(x.bits))
        return tuple(idx)

    def design_at(self, indices: Sequence[int]) -> DesignPoint:
        indices = tuple(int(i) for i in indices)
        if len(indices) != self.encoding_width:
            raise DimensionMismatchError(
                f"expected {self.encoding_width} indices, got {len(indices)}"
            )
        axes = self._axes()
        for i, (axis, k) in enumerate(zip(axes, indices)):
            if not 0 <= k < len(axis):
                raise InvalidDesignError(f"index {k} out of range at position {i}")
        stages = tuple(
            StageChoice(
                depth=self.depth_choices[indices[3 * s]],
                width=self.width_choices[indices[3 * s + 1]],
                kernel=self.kernel_choices[indices[3 * s + 2]],
            )
            for s in range(self.num_stages)
        )
        return DesignPoint(stages=stages, bits=self.bits_choices[indices[-1]])


def default_space() -> DesignSpace:
    """The 4-stage space all defaults refer to; ~21.2M designs, too big to enumerate."""
    return DesignSpace(
        num_stages=4,
        depth_choices=(1, 2, 3, 4),
        width_choices=(0.5, 0.75, 1.0, 1.25),
        kernel_choices=(3, 5, 7),
        bits_choices=(4, 8, 16, 32),
    )


def reduced_space() -> DesignSpace:
    """A 128-design space small enough for exhaustive ground truth in tests."""
    return DesignSpace(
        num_stages=2,
        depth_choices=(1, 2),
        width_choices=(0.5, 1.0),
        kernel_choices=(3, 5),
        bits_choices=(8, 32),
    )


def sample_uniform(space: DesignSpace, rng: np.random.Generator) -> DesignPoint:
    """Uniform over the whole space: each axis index drawn independently."""
    indices = [int(rng.integers(len(axis))) for axis in space._axes()]
    return space.design_at(indices)


def encode(x: DesignPoint, space: DesignSpace) -> np.ndarray:
    """Map a design to cell-center coordinates in [0, 1]^(3S+1).

    Index k of an n-choice axis maps to k/(n-1), or 0.5 for a singleton axis.
    """
    indices = space.indices_of(x)
    out = np.empty(space.encoding_width, dtype=float)
    for i, (axis, k) in enumerate(zip(space._axes(), indices)):
        n = len(axis)
        out[i] = 0.5 if n == 1 else k / (n - 1)
    return out


def decode(values: Sequence[float], space: DesignSpace) -> DesignPoint:
    """Snap a continuous vector to the nearest design (round-half-up per axis).

    Values are clamped to [0, 1] first, so any real vector of the right width
    decodes; non-finite input is rejected.
    """
    arr = np.asarray(values, dtype=float)
    if arr.shape != (space.encoding_width,):
        raise DimensionMismatchError(
            f"expected shape ({space.encoding_width},), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("encoded vector has non-finite entries")
    arr = np.clip(arr, 0.0, 1.0)
    indices = []
    for axis, v in zip(space._axes(), arr):
        n = len(axis)
        indices.append(0 if n == 1 else int(math.floor(v * (n - 1) + 0.5)))
    return space.design_at(indices)


def mutate(
    x: DesignPoint, rate: float, space: DesignSpace, rng: np.random.Generator
) -> DesignPoint:
    """Resample each axis independently with probability `rate`.

    A resampled axis always moves to a different value (when the axis has
    more than one choice), so the expected changed-field count is exactly
    rate * number of axes; rate=0 returns x unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mutation rate must be in [0, 1], got {rate}")
    indices = list(space.indices_of(x))
    for i, axis in enumerate(space._axes()):
        if len(axis) > 1 and rng.random() < rate:
            j = int(rng.integers(len(axis) - 1))
            indices[i] = j + 1 if j >= indices[i] else j
    return space.design_at(indices)


def crossover(
    a: DesignPoint, b: DesignPoint, space: DesignSpace, rng: np.random.Generator
) -> DesignPoint:
    """Uniform crossover: each axis comes from parent a or b with equal odds."""
    ia = space.indices_of(a)
    ib = space.indices_of(b)
    child = [ka if rng.random() < 0.5 else kb for ka, kb in zip(ia, ib)]
    return space.design_at(child)


def enumerate_all(space: DesignSpace, limit: int | None = 1_000_000) -> list[DesignPoint]:
    """All designs in lexicographic index order; refuses spaces past `limit`."""
    if limit is not None and space.cardinality > limit:
        raise SpaceTooLargeError(
            f"space has {space.cardinality} designs, enumeration limit is {limit}"
        )
    ranges = [range(len(axis)) for axis in space._axes()]
    return [space.design_at(idx) for idx in itertools.product(*ranges)]
