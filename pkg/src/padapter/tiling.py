"""Exact patch tiling: grid geometry, split and assemble.

Patches tile the image without overlap or padding; non-divisible geometries
are rejected outright.  Patch index runs row-major, and
``assemble(split(x)) == x`` holds bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


class GeometryError(ValueError):
    """Image and patch dims do not tile."""


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if min(self.height, self.width, self.patch_h, self.patch_w) < 1:
            raise GeometryError("grid dims must be positive")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise GeometryError(
                f"patches {self.patch_h}x{self.patch_w} do not tile "
                f"{self.height}x{self.width}")

    @property
    def rows(self) -> int:
        return self.height // self.patch_h

    @property
    def cols(self) -> int:
        return self.width // self.patch_w

    @property
    def count(self) -> int:
        return (self.height * self.width) // (self.patch_h * self.patch_w)

    def rect(self, index: int) -> tuple[int, int, int, int]:
        """(y0, x0, y1, x1) pixel rect of patch ``index`` (row-major)."""
        if not 0 <= index < self.count:
            raise ContractError(f"patch index {index} outside [0, {self.count})")
        r, c = divmod(index, self.cols)
        return (r * self.patch_h, c * self.patch_w,
                (r + 1) * self.patch_h, (c + 1) * self.patch_w)


def split(image: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Ordered row-major list of patch copies; works on (C, H, W) images and
    (H, W) masks."""
    spatial = image.shape[-2:]
    if spatial != (grid.height, grid.width):
        raise GeometryError(f"image {spatial} does not match grid "
                            f"{(grid.height, grid.width)}")
    out = []
    for i in range(grid.count):
        y0, x0, y1, x1 = grid.rect(i)
        out.append(np.ascontiguousarray(image[..., y0:y1, x0:x1]))
    return out


def assemble(patches: list[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Inverse of split; requires the complete patch list."""
    if len(patches) != grid.count:
        raise GeometryError(f"need {grid.count} patches, got {len(patches)}")
    lead = patches[0].shape[:-2]
    out = np.empty(lead + (grid.height, grid.width), dtype=np.float64)
    for i, patch in enumerate(patches):
        if patch.shape != lead + (grid.patch_h, grid.patch_w):
            raise GeometryError(f"patch {i} has shape {patch.shape}")
        y0, x0, y1, x1 = grid.rect(i)
        out[..., y0:y1, x0:x1] = patch
    return out
