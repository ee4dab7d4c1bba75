"""Non-overlapping patch decomposition, reassembly and masking.

Images are numpy arrays shaped ``(channels, height, width)``. A patch vector
is flattened channel-major, then row-major inside the patch, and patches are
enumerated in row-major grid order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

LESION = "lesion"
BACKGROUND = "background"


class PatchError(ValueError):
    """Raised for images or patch sets that do not fit the patch grid."""


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    channels: int = 1

    @property
    def N(self) -> int:
        return self.rows * self.cols

    @property
    def patch_length(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.rows * self.patch_size, self.cols * self.patch_size)

    @classmethod
    def for_image(cls, shape: tuple[int, ...], patch_size: int) -> "PatchGrid":
        if len(shape) != 3:
            raise PatchError(f"expected (channels, height, width), got shape {tuple(shape)}")
        if patch_size < 1:
            raise PatchError(f"patch_size must be positive, got {patch_size}")
        c, h, w = shape
        if c < 1:
            raise PatchError("image must have at least one channel")
        for axis, size in (("height", h), ("width", w)):
            if size <= 0 or size % patch_size:
                raise PatchError(f"{axis} {size} is not a positive multiple of patch_size {patch_size}")
        return cls(patch_size=patch_size, rows=h // patch_size, cols=w // patch_size, channels=c)


@dataclass(frozen=True)
class PatchSet:
    grid: PatchGrid
    patches: np.ndarray  # (N, channels * patch_size**2)

    def __post_init__(self):
        p = np.asarray(self.patches)
        if p.ndim != 2 or p.shape[0] != self.grid.N or p.shape[1] != self.grid.patch_length:
            raise PatchError(
                f"grid expects {self.grid.N} patches of length {self.grid.patch_length}, "
                f"got array of shape {p.shape}"
            )

    def __len__(self) -> int:
        return self.grid.N


@dataclass(frozen=True)
class MaskFill:
    """How masked pixels are filled: a constant, or a learned scalar token."""

    kind: Literal["constant", "token"] = "constant"
    value: float = 0.0


@dataclass(frozen=True)
class MaskPlan:
    """Lesion-first patch ordering plus the length of the masked prefix."""

    order: np.ndarray
    labels: tuple[str, ...]
    n: int | None = None
    seed: int = 0
    grid: PatchGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        N = len(order)
        if sorted(order.tolist()) != list(range(N)):
            raise PatchError("order is not a permutation of 0..N-1")
        if len(self.labels) != N:
            raise PatchError(f"{len(self.labels)} labels for {N} patches")
        seen_background = False
        for idx in order:
            if self.labels[idx] == BACKGROUND:
                seen_background = True
            elif self.labels[idx] == LESION:
                if seen_background:
                    raise PatchError("a lesion patch follows a background patch in the order")
            else:
                raise PatchError(f"unknown label {self.labels[idx]!r}")
        if self.n is not None and not 0 <= self.n <= N:
            raise PatchError(f"n={self.n} outside [0, {N}]")
        object.__setattr__(self, "order", order)

    @property
    def N(self) -> int:
        return len(self.order)

    @property
    def masked(self) -> np.ndarray:
        if self.n is None:
            raise PatchError("mask plan has no masked count yet")
        return self.order[: self.n]

    @property
    def visible(self) -> np.ndarray:
        if self.n is None:
            raise PatchError("mask plan has no masked count yet")
        return self.order[self.n :]

    def with_n(self, n: int) -> "MaskPlan":
        return MaskPlan(self.order, self.labels, n=n, seed=self.seed, grid=self.grid)

    def patch_mask(self) -> np.ndarray:
        """Boolean vector over patches, True where masked."""
        out = np.zeros(self.N, dtype=bool)
        out[self.masked] = True
        return out


def patchify(image: np.ndarray, patch_size: int) -> PatchSet:
    image = np.asarray(image)
    grid = PatchGrid.for_image(image.shape, patch_size)
    c, p = grid.channels, patch_size
    blocks = image.reshape(c, grid.rows, p, grid.cols, p)
    # -> (rows, cols, c, p, p): channel-major, then row-major within the patch
    patches = blocks.transpose(1, 3, 0, 2, 4).reshape(grid.N, grid.patch_length)
    return PatchSet(grid, patches)


def unpatchify(patches: PatchSet) -> np.ndarray:
    grid = patches.grid
    c, p = grid.channels, grid.patch_size
    blocks = np.asarray(patches.patches).reshape(grid.rows, grid.cols, c, p, p)
    return blocks.transpose(2, 0, 3, 1, 4).reshape(grid.image_shape)


def pixel_mask(plan: MaskPlan, grid: PatchGrid) -> np.ndarray:
    """(height, width) boolean map that is True inside masked patches."""
    if plan.N != grid.N:
        raise PatchError(f"plan covers {plan.N} patches but grid has {grid.N}")
    cells = plan.patch_mask().reshape(grid.rows, grid.cols)
    p = grid.patch_size
    return np.repeat(np.repeat(cells, p, axis=0), p, axis=1)


def apply_mask(image: np.ndarray, plan: MaskPlan, fill: MaskFill | float = MaskFill()) -> np.ndarray:
    """Return ``x_m``: a copy of ``image`` with the first ``plan.n`` patches filled.

    A float ``fill`` is shorthand for a constant fill. With ``kind="token"``
    the scalar ``fill.value`` is whatever the caller's learned token currently
    holds; the broadcast is identical.
    """
    image = np.asarray(image)
    if plan.grid is not None and plan.grid.image_shape[1:] != image.shape[1:]:
        raise PatchError(f"plan grid {plan.grid.image_shape} does not match image {image.shape}")
    patch_size = plan.grid.patch_size if plan.grid is not None else None
    if patch_size is None:
        raise PatchError("mask plan carries no grid; cannot locate patches")
    grid = PatchGrid.for_image(image.shape, patch_size)
    mask = pixel_mask(plan, grid)
    value = fill if isinstance(fill, (int, float)) else fill.value
    out = image.copy()
    out[:, mask] = value
    return out
