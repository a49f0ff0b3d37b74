"""Procedural toy recipes with ground-truth step images.

Each synthetic "recipe" drops colored primitives one at a time onto a 4x4
cell grid of a 32x32 canvas; the image for step k is the cumulative canvas
after k placements. That gives free paired data where step k+1 provably
contains step k, which is exactly the structure the cross-step metrics and
the overfit checks need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError
from .text import RecipeSpec

__all__ = ["SyntheticRecipe", "make_synthetic_dataset", "CANVAS", "CELL"]

CANVAS = 32          # canvas is CANVAS x CANVAS x 3 floats in [0, 1]
CELL = 8             # 4x4 grid of CELL x CELL cells
BACKGROUND = 0.05

_SHAPES = ("circle", "square", "triangle")
_COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.6, 0.2, 0.8),
    "orange": (0.95, 0.55, 0.1),
}


@dataclass(frozen=True)
class SyntheticRecipe:
    """A recipe plus its per-step ground-truth images ([0,1] float arrays)."""

    recipe: RecipeSpec
    images: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.images) != self.recipe.n_steps:
            raise ParameterError(
                f"{len(self.images)} images for {self.recipe.n_steps} steps")


def _cell_mask(shape: str) -> np.ndarray:
    """Boolean CELL x CELL stencil for one primitive."""
    c = (CELL - 1) / 2.0
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (CELL / 2.0 - 0.5) ** 2
    if shape == "square":
        return (np.abs(yy - c) <= CELL / 2.0 - 1.5) & (np.abs(xx - c) <= CELL / 2.0 - 1.5)
    if shape == "triangle":
        # downward-growing triangle: row y spans y+1 centered pixels
        return np.abs(xx - c) * 2.0 <= yy
    raise ParameterError(f"unknown shape {shape!r}")


_STENCILS = {s: _cell_mask(s) for s in _SHAPES}


def _stamp(canvas: np.ndarray, cell: int, shape: str, color: str) -> np.ndarray:
    out = canvas.copy()
    r, c = divmod(cell, CANVAS // CELL)
    sl = (slice(r * CELL, (r + 1) * CELL), slice(c * CELL, (c + 1) * CELL))
    out[sl][_STENCILS[shape]] = _COLORS[color]
    return out


def make_synthetic_dataset(seed: int = 0, count: int = 8,
                           max_steps: int = 4) -> list[SyntheticRecipe]:
    """Deterministic list of synthetic recipes.

    Step counts are drawn uniformly from 2..max_steps, cells without
    replacement (so every step visibly changes exactly one cell), and each
    caption names its primitive so text/image faithfulness is measurable.
    """
    if max_steps < 2:
        raise ParameterError(f"max_steps must be >= 2, got {max_steps}")
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    n_cells = (CANVAS // CELL) ** 2
    if max_steps > n_cells:
        raise ParameterError(f"max_steps {max_steps} exceeds {n_cells} grid cells")
    rng = np.random.default_rng(seed)
    colors = list(_COLORS)
    out = []
    for _ in range(count):
        n = int(rng.integers(2, max_steps + 1))
        cells = rng.choice(n_cells, size=n, replace=False)
        canvas = np.full((CANVAS, CANVAS, 3), BACKGROUND)
        steps, ingredients, images = [], [], []
        for k in range(n):
            shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
            color = colors[int(rng.integers(len(colors)))]
            canvas = _stamp(canvas, int(cells[k]), shape, color)
            steps.append(f"Add a {color} {shape}.")
            ingredients.append((f"{color} {shape}",))
            images.append(canvas)
        recipe = RecipeSpec(
            goal=f"Arrange {n} shapes on the board.",
            steps=tuple(steps),
            ingredients=tuple(ingredients),
            summary=f"A board with {n} colored shapes placed one per step.",
        )
        out.append(SyntheticRecipe(recipe=recipe, images=tuple(images)))
    return out
