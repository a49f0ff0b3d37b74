"""Rotary position encoding for 2-D patch grids, in two flavors.

The shared-frame scheme rotates every token by its global (row, col) in the
vertically stacked canvas, so region n's rows continue where region n-1's
stopped. The per-region scheme restarts the frame at (0, 0) inside every
region: the same local cell gets the same rotation in every region, which is
what lets a model trained at one region count run at any other.

Channel convention: interleaved pairs (2k, 2k+1); the first half of the
pairs encodes the row index, the second half the column index, each with the
usual geometric frequency ladder. Text tokens are pinned to (0, 0) — an
identity rotation — so in practice only latent tokens pass through here.
"""

from __future__ import annotations

import numpy as np

from .layout import LatentSequence, RegionCoordinates, RegionLayout
from .tensor import ShapeError, rotate_pairs

__all__ = [
    "RotationTable",
    "rotate_token",
    "apply_original_rope",
    "apply_flexible_rope",
]


class RotationTable:
    """Per-position cos/sin coefficients for one attention head's channels.

    Immutable after construction; rows are cached per (i, j) as they are
    first requested. head_dim must be a multiple of 4 so the channel pairs
    split evenly between the row and column axes.
    """

    def __init__(self, head_dim: int, base: float = 10000.0):
        if head_dim % 2:
            raise ShapeError(f"head_dim must be even, got {head_dim}")
        if head_dim % 4:
            raise ShapeError(
                f"head_dim must be a multiple of 4 to split pairs between "
                f"two axes, got {head_dim}")
        self.head_dim = head_dim
        self.base = float(base)
        self.pairs = head_dim // 2
        axis_channels = head_dim // 2  # channels devoted to each axis
        k = np.arange(self.pairs // 2)
        self._inv_freq = self.base ** (-2.0 * k / axis_channels)
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def angles(self, i: int, j: int) -> np.ndarray:
        """Rotation angle per channel pair at grid cell (i, j)."""
        if i < 0 or j < 0:
            raise ValueError(f"grid coordinates must be non-negative, got ({i}, {j})")
        return np.concatenate([i * self._inv_freq, j * self._inv_freq])

    def pair_coefficients(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        key = (int(i), int(j))
        hit = self._cache.get(key)
        if hit is None:
            theta = self.angles(*key)
            hit = self._cache[key] = (np.cos(theta), np.sin(theta))
        return hit

    def cos_sin(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked cos/sin tables, one row per coordinate pair in coords."""
        coords = np.asarray(coords, dtype=int)
        uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
        rows = [self.pair_coefficients(i, j) for i, j in uniq]
        cos = np.stack([r[0] for r in rows])[inverse]
        sin = np.stack([r[1] for r in rows])[inverse]
        return cos, sin


def rotate_token(token: np.ndarray, i: int, j: int, table: RotationTable) -> np.ndarray:
    """Rotate one head-width vector by its grid position. Norm-preserving."""
    token = np.asarray(token, dtype=np.float64)
    if token.ndim != 1 or token.shape[0] != table.head_dim:
        raise ShapeError(
            f"token length {token.shape} does not match head_dim {table.head_dim}")
    cos, sin = table.pair_coefficients(i, j)
    even, odd = token[0::2], token[1::2]
    out = np.empty_like(token)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def _rotate_sequence(latents: LatentSequence, coords: np.ndarray,
                     table: RotationTable) -> LatentSequence:
    width = latents.width
    if width % table.head_dim:
        raise ShapeError(
            f"token width {width} is not a multiple of head_dim {table.head_dim}")
    if coords.shape[0] != latents.tokens.shape[0]:
        raise ShapeError(
            f"{coords.shape[0]} coordinates for {latents.tokens.shape[0]} tokens")
    heads = width // table.head_dim
    cos, sin = table.cos_sin(coords)
    # every head chunk gets the same rotation, so tile across the row
    cos = np.tile(cos, (1, heads))
    sin = np.tile(sin, (1, heads))
    return latents.with_tokens(rotate_pairs(latents.tokens, cos, sin))


def apply_original_rope(latents: LatentSequence, layout: RegionLayout | None = None,
                        table: RotationTable | None = None) -> LatentSequence:
    """Rotate every token by its position in the shared stacked-canvas frame."""
    layout = layout or latents.layout
    if layout.total_tokens != latents.tokens.shape[0]:
        raise ShapeError(
            f"layout with {layout.total_tokens} cells does not match "
            f"{latents.tokens.shape[0]} latent tokens")
    table = table or RotationTable(latents.width)
    return _rotate_sequence(latents, layout.global_coordinates(), table)


def apply_flexible_rope(latents: LatentSequence,
                        coords: list[RegionCoordinates] | None = None,
                        table: RotationTable | None = None) -> LatentSequence:
    """Rotate every token by its local position, restarting (0,0) per region."""
    if coords is None:
        coords = latents.layout.region_coordinates()
    if not coords:
        raise ShapeError("no region coordinates given")
    for n, rc in enumerate(coords):
        if rc.region_index != n:
            raise ShapeError(
                f"regions must be ordered by index: position {n} holds "
                f"region {rc.region_index}")
    cells = np.concatenate([rc.cells() for rc in coords], axis=0)
    if cells.shape[0] != latents.tokens.shape[0]:
        raise ShapeError(
            f"{cells.shape[0]} region cells for {latents.tokens.shape[0]} tokens")
    table = table or RotationTable(latents.width)
    return _rotate_sequence(latents, cells, table)
