"""Region geometry: how N stacked image panels map onto patch-token sequences.

A generation run works on N equally sized image regions stacked vertically
into one canvas. Each region is cut into non-overlapping p x p patches, row
major, and the regions' tokens are concatenated region 0..N-1 into a single
latent sequence. Everything downstream (rotary coordinates, attention block
extents, unpatchify) derives from this layout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["RegionLayout", "RegionCoordinates", "LatentSequence"]


@dataclass(frozen=True)
class RegionLayout:
    """Geometry of N vertically stacked regions on a patch grid."""

    n_regions: int
    region_height: int = 32
    region_width: int = 32
    patch_size: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.n_regions < 1:
            raise ShapeError(f"need at least one region, got {self.n_regions}")
        if self.region_height % self.patch_size or self.region_width % self.patch_size:
            raise ShapeError(
                f"region {self.region_height}x{self.region_width} not divisible "
                f"by patch size {self.patch_size}")

    @property
    def grid_height(self) -> int:
        return self.region_height // self.patch_size

    @property
    def grid_width(self) -> int:
        return self.region_width // self.patch_size

    @property
    def tokens_per_region(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def total_tokens(self) -> int:
        return self.n_regions * self.tokens_per_region

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def region_span(self, n: int) -> tuple[int, int]:
        """Half-open token range [start, stop) of region n in the sequence."""
        if not 0 <= n < self.n_regions:
            raise ShapeError(f"region {n} out of range for {self.n_regions} regions")
        start = n * self.tokens_per_region
        return start, start + self.tokens_per_region

    def with_regions(self, n_regions: int) -> "RegionLayout":
        return replace(self, n_regions=n_regions)

    def global_coordinates(self) -> np.ndarray:
        """(row, col) per token in one shared frame spanning the whole stack.

        Region n sits below region n-1, so its rows are offset by n times the
        per-region grid height.
        """
        gh, gw = self.grid_height, self.grid_width
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        per_region = np.stack([rows, cols], axis=1)
        parts = [per_region + np.array([n * gh, 0]) for n in range(self.n_regions)]
        return np.concatenate(parts, axis=0)

    def region_coordinates(self) -> list["RegionCoordinates"]:
        """Per-region coordinate frames, each restarting at (0, 0)."""
        return [RegionCoordinates(n, self.grid_height, self.grid_width)
                for n in range(self.n_regions)]


@dataclass(frozen=True)
class RegionCoordinates:
    """Local patch-grid frame of one region; cell (0,0) is its top-left."""

    region_index: int
    grid_height: int
    grid_width: int

    def __post_init__(self):
        if self.region_index < 0:
            raise ShapeError(f"negative region index {self.region_index}")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ShapeError(
                f"empty region grid {self.grid_height}x{self.grid_width}")

    @property
    def n_tokens(self) -> int:
        return self.grid_height * self.grid_width

    def cells(self) -> np.ndarray:
        """Local (row, col) per token, row-major; always starts at (0, 0)."""
        rows, cols = np.divmod(np.arange(self.n_tokens), self.grid_width)
        return np.stack([rows, cols], axis=1)


@dataclass(frozen=True)
class LatentSequence:
    """Patch tokens for all regions at one noise level.

    tokens is [layout.total_tokens x d], regions contiguous in order; t is
    the current noise level in [0, 1] (1 = pure noise, 0 = clean).
    """

    tokens: Tensor
    layout: RegionLayout
    t: float

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            object.__setattr__(self, "tokens", Tensor(self.tokens))
        if self.tokens.data.ndim != 2:
            raise ShapeError(f"latent tokens must be a matrix, got {self.tokens.shape}")
        if self.tokens.shape[0] != self.layout.total_tokens:
            raise ShapeError(
                f"{self.tokens.shape[0]} tokens do not tile layout with "
                f"{self.layout.total_tokens} cells")
        if not np.isfinite(self.tokens.data).all():
            raise ValueError("latent tokens contain non-finite values")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor, t: float | None = None) -> "LatentSequence":
        return LatentSequence(tokens, self.layout, self.t if t is None else t)
