"""Deterministic toy text pipeline: recipes, tokens, embeddings, refinement.

The tokenizer is a lowercasing word/punctuation splitter chosen for one load
bearing property: tokenizing a concatenation equals concatenating the token
lists. Step boundaries inside a jointly encoded recipe are therefore exact
by construction and never re-derived from text.

The encoder has two backends. "hash" maps each token to a fixed row of a
seeded embedding table, so a step's encoding is the same whether the step is
encoded alone or as a slice of the whole recipe. "contextual" (the default)
adds one fixed, seeded self-attention mixing layer over whatever sequence it
is given, so a jointly encoded step sees its neighbors — the difference the
consistency fusion downstream feeds on.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .llm import LLMEndpoint, SchemaError, post_chat
from .tensor import ParameterError, ShapeError, Tensor

__all__ = [
    "RecipeSpec",
    "TokenBlock",
    "WHOLE_RECIPE",
    "TextEncoder",
    "tokenize",
    "detokenize",
    "format_prompt",
    "strip_step_tag",
    "refine_recipe",
    "recipe_from_json",
    "recipe_to_json",
    "REFINE_INSTRUCTION",
]

#: source_step value marking a block that encodes the whole recipe at once.
WHOLE_RECIPE = -1

_TOKEN_RE = re.compile(r"\[[\w-]+\]|\w+|[^\w\s]")
_STEP_TAG_RE = re.compile(r"^\[step-(\d+)\]\s*")


def tokenize(text: str) -> list[str]:
    """Lowercased word/punct tokens; "[step-i]" tags survive as one token.

    Concatenation property: tokenize(a + " " + b) == tokenize(a) + tokenize(b).
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class RecipeSpec:
    """A goal, ordered step texts, optional per-step ingredients and summary."""

    goal: str
    steps: tuple[str, ...]
    ingredients: tuple[tuple[str, ...], ...] | None = None
    summary: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise SchemaError("a recipe needs at least one step")
        for n, s in enumerate(self.steps):
            if not s or not s.strip():
                raise SchemaError(f"step {n + 1} text is empty")
        if self.ingredients is not None:
            ing = tuple(tuple(i) for i in self.ingredients)
            if len(ing) != len(self.steps):
                raise SchemaError(
                    f"{len(ing)} ingredient annotations for {len(self.steps)} steps")
            object.__setattr__(self, "ingredients", ing)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def all_ingredients(self) -> tuple[str, ...]:
        """Recipe-level ingredient list: ordered union of step annotations."""
        if self.ingredients is None:
            return ()
        seen: dict[str, None] = {}
        for step_ing in self.ingredients:
            for item in step_ing:
                seen.setdefault(item)
        return tuple(seen)


def recipe_from_json(obj) -> RecipeSpec:
    """Parse {goal, summary?, steps: [{text, ingredients?}]}; SchemaError if off."""
    if isinstance(obj, (str, bytes)):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"recipe is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise SchemaError(f"recipe must be a JSON object, got {type(obj).__name__}")
    if not isinstance(obj.get("goal"), str):
        raise SchemaError("recipe.goal must be a string")
    steps_raw = obj.get("steps")
    if not isinstance(steps_raw, list) or not steps_raw:
        raise SchemaError("recipe.steps must be a non-empty list")
    texts, ingredients, any_ing = [], [], False
    for n, item in enumerate(steps_raw):
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise SchemaError(f"steps[{n}] must be an object with a text field")
        texts.append(item["text"])
        ing = item.get("ingredients", [])
        if ing and (not isinstance(ing, list)
                    or not all(isinstance(i, str) for i in ing)):
            raise SchemaError(f"steps[{n}].ingredients must be a list of strings")
        any_ing = any_ing or bool(ing)
        ingredients.append(tuple(ing or ()))
    summary = obj.get("summary")
    if summary is not None and not isinstance(summary, str):
        raise SchemaError("recipe.summary must be a string when present")
    return RecipeSpec(goal=obj["goal"], steps=tuple(texts),
                      ingredients=tuple(ingredients) if any_ing else None,
                      summary=summary)


def recipe_to_json(recipe: RecipeSpec) -> dict:
    steps = []
    for n, text in enumerate(recipe.steps):
        entry: dict = {"text": text}
        if recipe.ingredients is not None and recipe.ingredients[n]:
            entry["ingredients"] = list(recipe.ingredients[n])
        steps.append(entry)
    out: dict = {"goal": recipe.goal, "steps": steps}
    if recipe.summary is not None:
        out["summary"] = recipe.summary
    return out


@dataclass(frozen=True)
class TokenBlock:
    """Embedded token vectors for one step (or the whole recipe).

    boundary is the (offset, length) of this block inside a joint encoding,
    when it came from one; independent encodings leave it unset.
    """

    tokens: Tensor
    source_step: int
    boundary: tuple[int, int] | None = None

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            object.__setattr__(self, "tokens", Tensor(self.tokens))
        if self.tokens.data.ndim != 2:
            raise ShapeError(f"token block must be a matrix, got {self.tokens.shape}")
        if self.boundary is not None:
            b, t = self.boundary
            if b < 0 or t != self.n_tokens:
                raise ShapeError(
                    f"boundary {self.boundary} inconsistent with {self.n_tokens} tokens")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def _stable_bucket(token: str, table_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % table_size


class TextEncoder:
    """Seeded hash-table embedder with an optional fixed context-mixing layer."""

    def __init__(self, d: int = 128, seed: int = 0, table_size: int = 4096,
                 backend: str = "contextual"):
        if backend not in ("hash", "contextual"):
            raise ParameterError(f"unknown encoder backend {backend!r}")
        if d < 1 or table_size < 1:
            raise ParameterError(f"bad encoder dims d={d} table_size={table_size}")
        self.d = d
        self.seed = seed
        self.table_size = table_size
        self.backend = backend

    @cached_property
    def _table(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.normal(size=(self.table_size, self.d))

    @cached_property
    def _mix_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed + 0x5EED)
        s = 1.0 / np.sqrt(self.d)
        return tuple(rng.normal(scale=s, size=(self.d, self.d)) for _ in range(3))

    def lookup(self, tokens: list[str]) -> np.ndarray:
        """Context-free per-token table rows; same token, same vector."""
        if not tokens:
            return np.zeros((0, self.d))
        idx = [_stable_bucket(t, self.table_size) for t in tokens]
        return self._table[idx].copy()

    def _mix(self, e: np.ndarray) -> np.ndarray:
        if self.backend == "hash" or e.shape[0] == 0:
            return e
        wq, wk, wv = self._mix_weights
        q, k, v = e @ wq, e @ wk, e @ wv
        logits = q @ k.T / np.sqrt(self.d)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return e + p @ v

    # -- spec'd encoding operations -----------------------------------------

    def embed(self, tokens: list[str], source_step: int = WHOLE_RECIPE) -> TokenBlock:
        """Raw embedding lookup (never mixed), wrapped as a block."""
        return TokenBlock(Tensor(self.lookup(tokens)), source_step)

    def encode_text(self, text: str, source_step: int = WHOLE_RECIPE) -> TokenBlock:
        """Embed one text as its own sequence (backend mixing included)."""
        e = self._mix(self.lookup(tokenize(text)))
        return TokenBlock(Tensor(e), source_step)

    def encode_steps_independent(self, recipe: RecipeSpec) -> list[TokenBlock]:
        """One block per step, each encoded as if it were the only text."""
        recipe = format_prompt(recipe)
        return [self.encode_text(step, source_step=n)
                for n, step in enumerate(recipe.steps)]

    def encode_recipe_joint(self, recipe: RecipeSpec
                            ) -> tuple[TokenBlock, list[tuple[int, int]]]:
        """Whole recipe in one sequence, plus per-step (offset, length).

        The summary (when present) leads the sequence and belongs to no
        step boundary; boundaries tile the rest exactly.
        """
        recipe = format_prompt(recipe)
        summary_tokens = tokenize(recipe.summary) if recipe.summary else []
        step_tokens = [tokenize(s) for s in recipe.steps]
        boundaries = []
        offset = len(summary_tokens)
        for toks in step_tokens:
            boundaries.append((offset, len(toks)))
            offset += len(toks)
        flat = summary_tokens + [t for toks in step_tokens for t in toks]
        e = self._mix(self.lookup(flat))
        return TokenBlock(Tensor(e), WHOLE_RECIPE), boundaries

    def pooled_embedding(self, recipe: RecipeSpec) -> np.ndarray:
        """Mean-pooled joint encoding; a stand-in for a sentence-level vector.

        Deliberately not wired into the denoiser's modulation: conditioning
        there is timestep-only so per-step text isolation stays exact.
        """
        block, _ = self.encode_recipe_joint(recipe)
        if block.n_tokens == 0:
            return np.zeros(self.d)
        return block.tokens.data.mean(axis=0)


def strip_step_tag(text: str) -> str:
    return _STEP_TAG_RE.sub("", text)


def format_prompt(recipe: RecipeSpec) -> RecipeSpec:
    """Prefix step n with "[step-n]" (1-based). Idempotent: retagging an
    already tagged step replaces its tag instead of stacking another."""
    steps = tuple(f"[step-{n + 1}] {strip_step_tag(s)}"
                  for n, s in enumerate(recipe.steps))
    return replace(recipe, steps=steps)


REFINE_INSTRUCTION = (
    "Rewrite each step of the recipe below so that every ingredient used in "
    "that step is named explicitly. Keep the cooking actions, the order of "
    "the steps, and the number of steps exactly as given. Return one line "
    "per step, numbered \"1.\", \"2.\", and so on, with no other text."
)

_NUMBERED_LINE_RE = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


def _refine_prompt(recipe: RecipeSpec) -> str:
    lines = [REFINE_INSTRUCTION, "", f"Goal: {recipe.goal}"]
    if recipe.all_ingredients:
        lines.append("Ingredients: " + ", ".join(recipe.all_ingredients))
    lines.append("Steps:")
    lines += [f"{n + 1}. {strip_step_tag(s)}" for n, s in enumerate(recipe.steps)]
    return "\n".join(lines)


def _mentions_any(text: str, items: tuple[str, ...]) -> bool:
    low = text.lower()
    return any(item.lower() in low for item in items)


def _refine_mock(recipe: RecipeSpec) -> RecipeSpec:
    """Offline rule: steps that mention none of the recipe's ingredients get
    the recipe-level ingredient list appended in parentheses."""
    pantry = recipe.all_ingredients
    if not pantry:
        return recipe
    suffix = " (" + ", ".join(pantry) + ")"
    steps = tuple(s if _mentions_any(s, pantry) else s + suffix
                  for s in recipe.steps)
    return replace(recipe, steps=steps)


def _parse_refined_steps(reply: str, n_steps: int) -> tuple[str, ...]:
    found: dict[int, str] = {}
    for line in reply.splitlines():
        m = _NUMBERED_LINE_RE.match(line)
        if m:
            found[int(m.group(1))] = m.group(2)
    if sorted(found) != list(range(1, n_steps + 1)):
        raise SchemaError(
            f"refiner reply has step numbers {sorted(found)}, expected 1..{n_steps}")
    return tuple(found[n] for n in range(1, n_steps + 1))


def refine_recipe(recipe: RecipeSpec, agent: LLMEndpoint) -> RecipeSpec:
    """Augment step texts with explicit ingredient mentions.

    Never changes the number of steps. Mock mode applies the deterministic
    offline rule; live mode asks the configured chat endpoint and parses one
    numbered line per step.
    """
    if agent.mock:
        return _refine_mock(recipe)
    reply = post_chat(agent, [{"role": "user", "content": _refine_prompt(recipe)}])
    return replace(recipe, steps=_parse_refined_steps(reply, recipe.n_steps))
