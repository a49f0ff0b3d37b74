"""Automatic evaluation of generated step-image sequences.

Three pixel/embedding metrics (goal faithfulness, per-step faithfulness,
cross-step consistency) over a pluggable embedder, plus an LLM judge with
fixed prompt templates. The builtin embedder is a seeded random projection
— useless for absolute quality, exactly right for testing the metric
plumbing — and any real encoder can be swapped in through a one-route HTTP
endpoint.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import requests
from PIL import Image

from .llm import LLMEndpoint, SchemaError, TransportError, post_chat
from .text import tokenize

__all__ = [
    "Embedder",
    "CSCResult",
    "MetricReport",
    "cosine",
    "goal_faithfulness",
    "step_faithfulness_clip",
    "cross_step_consistency",
    "llm_score",
    "judge_recipe",
    "evaluate_sequences",
    "aggregate_reports",
    "SCORE_TEMPLATES",
]

_POOL_GRID = 8  # images are mean-pooled to 8x8 before projection


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(),
                          "big")


def _as_float_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] < 1:
        raise SchemaError(f"expected an H x W x C image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _pool(img: np.ndarray, grid: int = _POOL_GRID) -> np.ndarray:
    """Mean-pool to a grid x grid thumbnail; tiny images are repeated up."""
    H, W, _ = img.shape
    if H < grid:
        img = img.repeat(-(-grid // H), axis=0)
    if W < grid:
        img = img.repeat(-(-grid // W), axis=1)
    H, W, C = img.shape
    rb = (np.arange(grid + 1) * H) // grid
    cb = (np.arange(grid + 1) * W) // grid
    out = np.empty((grid, grid, C))
    for r in range(grid):
        for c in range(grid):
            out[r, c] = img[rb[r]:rb[r + 1], cb[c]:cb[c + 1]].mean(axis=(0, 1))
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        e = np.zeros_like(v)
        e[0] = 1.0
        return e
    return v / n


@dataclass(frozen=True)
class Embedder:
    """Maps images and texts into one shared unit-norm vector space.

    backend "builtin" is a seeded random projection: pooled pixels (plus a
    constant feature) for images, mean hashed-token vectors for text. Any
    other value is treated as a URL and each call POSTs
    {kind: "image"|"text", payload: base64-png | utf8} expecting
    {vector: [float]}; returned vectors are unit-normalized on receipt.
    """

    backend: str = "builtin"
    width: int = 64
    seed: int = 0
    table_size: int = 2048
    timeout: float = 30.0

    def __post_init__(self):
        if self.width < 2:
            raise SchemaError(f"embedding width must be >= 2, got {self.width}")

    def _rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng(self.seed * 7919 + salt)

    def embed_image(self, img) -> np.ndarray:
        img = _as_float_image(img)
        if self.backend != "builtin":
            return self._remote("image", _png_base64(img))
        feats = np.append(_pool(img).reshape(-1), 1.0)
        proj = self._rng(1).normal(size=(feats.size, self.width))
        return _unit(feats @ proj / math.sqrt(feats.size))

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise SchemaError("cannot embed empty text")
        if self.backend != "builtin":
            return self._remote("text", text)
        table = self._rng(2).normal(size=(self.table_size, self.width))
        rows = [table[_digest(tok) % self.table_size] for tok in tokenize(text)]
        return _unit(np.mean(rows, axis=0))

    def _remote(self, kind: str, payload: str) -> np.ndarray:
        try:
            resp = requests.post(self.backend, json={"kind": kind, "payload": payload},
                                 timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransportError(f"embedder endpoint unreachable: {exc!r}") from None
        if resp.status_code != 200:
            raise TransportError(
                f"embedder endpoint returned {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        vec = body.get("vector") if isinstance(body, dict) else None
        if (not isinstance(vec, list) or not vec
                or not all(isinstance(x, (int, float)) for x in vec)):
            raise SchemaError(f"embedder response has no vector: {str(body)[:200]}")
        return _unit(np.asarray(vec, dtype=np.float64))


def _png_base64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


# ---------------------------------------------------------------------------
# embedding metrics


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise SchemaError(f"embedding widths differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(u @ v / (nu * nv))


def goal_faithfulness(final_image, last_caption: str, embedder: Embedder) -> float:
    """100 x cosine between the final image and the last step caption."""
    return 100.0 * cosine(embedder.embed_image(final_image),
                          embedder.embed_text(last_caption))


def step_faithfulness_clip(images, captions, embedder: Embedder) -> float:
    """Mean over steps of 100 x cosine(image_k, caption_k)."""
    if len(images) != len(captions):
        raise SchemaError(
            f"{len(images)} images but {len(captions)} captions")
    if not images:
        raise SchemaError("need at least one (image, caption) pair")
    return float(np.mean([goal_faithfulness(im, cap, embedder)
                          for im, cap in zip(images, captions)]))


def _raw_consistency(images, embedder: Embedder) -> float:
    """Mean l2 distance between embeddings of consecutive images; a single
    image has no transitions, so its raw score is 0."""
    if not images:
        raise SchemaError("cannot score an empty sequence")
    if len(images) == 1:
        return 0.0
    embs = [embedder.embed_image(im) for im in images]
    return float(np.mean([np.linalg.norm(a - b)
                          for a, b in zip(embs, embs[1:])]))


class CSCResult(NamedTuple):
    """Cross-step consistency versus a reference sequence.

    The headline pair is (csc_value, step_count_diff); both raw per-sequence
    scores ride along so either a deviation-style or an absolute reading is
    recoverable.
    """

    csc_value: float
    step_count_diff: int
    raw_generated: float
    raw_reference: float

    @property
    def reported(self) -> float:
        return self.csc_value + self.step_count_diff


def cross_step_consistency(generated, reference, embedder: Embedder) -> CSCResult:
    raw_g = _raw_consistency(generated, embedder)
    raw_r = _raw_consistency(reference, embedder)
    return CSCResult(csc_value=abs(raw_g - raw_r),
                     step_count_diff=abs(len(generated) - len(reference)),
                     raw_generated=raw_g, raw_reference=raw_r)


# ---------------------------------------------------------------------------
# LLM judge

_FIVE_LEVEL = ("Use a five-level scale: 1 (contradicts), 2 (mostly wrong), "
               "3 (partially right), 4 (mostly right), 5 (exact).")

SCORE_TEMPLATES = {
    "step_faithfulness": (
        "You are judging one step of a procedural image sequence. Given the "
        "step caption and a description of the generated image, rate how "
        "faithfully the image realizes the caption. " + _FIVE_LEVEL +
        " Respond with JSON only: {\"score\": s}."),
    "ingredient_accuracy": (
        "You are auditing ingredients in a generated cooking sequence. For "
        "each ingredient named in the recipe, check whether it appears in the "
        "described images when it should. Rate overall accuracy. "
        + _FIVE_LEVEL + " Respond with JSON only: {\"score\": s}."),
    "usability": (
        "You are assessing whether a generated step-image sequence would "
        "actually help someone follow the recipe. Score five aspects, each on "
        "the same five-level scale: ISC (image size consistency), CSR "
        "(cross-step visual coherence of recurring items), DIC (depicted "
        "ingredient correctness), PCL (procedural clarity), RNS (absence of "
        "redundant or nonsense steps). Respond with JSON only: "
        "{\"ISC\": s, \"CSR\": s, \"DIC\": s, \"PCL\": s, \"RNS\": s}."),
}

_USABILITY_KEYS = ("ISC", "CSR", "DIC", "PCL", "RNS")
_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def _mock_level(prompt: str, salt: str = "") -> int:
    return 1 + _digest(prompt + "|" + salt) % 5


def _parse_scores(text: str, keys: tuple[str, ...]) -> dict[str, float]:
    m = _JSON_RE.search(text)
    if not m:
        raise SchemaError(f"judge reply contains no JSON object: {text[:200]}")
    try:
        obj = json.loads(m.group(0))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"judge reply is not valid JSON: {exc}") from None
    out = {}
    for key in keys:
        val = obj.get(key)
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise SchemaError(f"judge reply lacks numeric {key!r}: {obj}")
        if not 1.0 <= float(val) <= 5.0:
            raise SchemaError(f"score {key}={val} outside the 1..5 scale")
        out[key] = float(val)
    return out


def llm_score(descriptions, template_id: str,
              endpoint: LLMEndpoint = LLMEndpoint()) -> float | dict[str, float]:
    """Judge a sequence with one of the fixed templates.

    descriptions is a list of per-step texts (captions or generated-image
    descriptions). Mock endpoints return deterministic scores derived from a
    stable hash of the full prompt, so pipeline tests are reproducible
    without network access. Returns a float for single-score templates and
    an aspect dict for "usability".
    """
    if template_id not in SCORE_TEMPLATES:
        raise SchemaError(f"unknown scoring template {template_id!r}; "
                          f"choose from {sorted(SCORE_TEMPLATES)}")
    prompt = SCORE_TEMPLATES[template_id] + "\n\n" + "\n".join(descriptions)
    multi = template_id == "usability"
    if endpoint.mock:
        if multi:
            return {k: float(_mock_level(prompt, k)) for k in _USABILITY_KEYS}
        return float(_mock_level(prompt))
    reply = post_chat(endpoint, [{"role": "user", "content": prompt}])
    if multi:
        return _parse_scores(reply, _USABILITY_KEYS)
    return _parse_scores(reply, ("score",))["score"]


def judge_recipe(descriptions, endpoint: LLMEndpoint = LLMEndpoint()) -> dict:
    """All judge scores for one sequence: {SF_G, IA, UB:{...}}."""
    return {
        "SF_G": llm_score(descriptions, "step_faithfulness", endpoint),
        "IA": llm_score(descriptions, "ingredient_accuracy", endpoint),
        "UB": llm_score(descriptions, "usability", endpoint),
    }


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricReport:
    """All metric outputs for one generated sequence."""

    goal_faithfulness: float
    step_faithfulness_clip: float
    cross_step_consistency: float   # csc_value + step_count_diff
    csc_value: float
    step_count_diff: int
    raw_generated: float
    raw_reference: float
    llm: dict | None = None

    def __post_init__(self):
        for name in ("goal_faithfulness", "step_faithfulness_clip"):
            val = getattr(self, name)
            if not -100.0 - 1e-9 <= val <= 100.0 + 1e-9:
                raise SchemaError(f"{name}={val} outside [-100, 100]")
        if self.step_count_diff < 0:
            raise SchemaError(f"step_count_diff must be >= 0, "
                              f"got {self.step_count_diff}")

    def to_json(self) -> dict:
        out = {
            "goal_faithfulness": self.goal_faithfulness,
            "step_faithfulness_clip": self.step_faithfulness_clip,
            "cross_step_consistency": self.cross_step_consistency,
            "csc_value": self.csc_value,
            "step_count_diff": self.step_count_diff,
            "raw_generated": self.raw_generated,
            "raw_reference": self.raw_reference,
        }
        if self.llm is not None:
            out["llm"] = self.llm
        return out


def evaluate_sequences(gen_images, captions, ref_images,
                       embedder: Embedder = Embedder(),
                       llm_endpoint: LLMEndpoint | None = None) -> MetricReport:
    """Full report for one generated sequence against its reference."""
    csc = cross_step_consistency(gen_images, ref_images, embedder)
    llm = judge_recipe(captions, llm_endpoint) if llm_endpoint else None
    return MetricReport(
        goal_faithfulness=goal_faithfulness(gen_images[-1], captions[-1], embedder),
        step_faithfulness_clip=step_faithfulness_clip(gen_images, captions, embedder),
        cross_step_consistency=csc.reported,
        csc_value=csc.csc_value,
        step_count_diff=csc.step_count_diff,
        raw_generated=csc.raw_generated,
        raw_reference=csc.raw_reference,
        llm=llm,
    )


def aggregate_reports(reports: list[MetricReport]) -> dict:
    """Corpus means of every numeric field (llm sub-scores included when
    every report carries them)."""
    if not reports:
        raise SchemaError("nothing to aggregate")
    keys = ("goal_faithfulness", "step_faithfulness_clip",
            "cross_step_consistency", "csc_value", "step_count_diff",
            "raw_generated", "raw_reference")
    out: dict = {"count": len(reports)}
    for key in keys:
        out[key] = float(np.mean([getattr(r, key) for r in reports]))
    if all(r.llm is not None for r in reports):
        out["llm"] = {
            "SF_G": float(np.mean([r.llm["SF_G"] for r in reports])),
            "IA": float(np.mean([r.llm["IA"] for r in reports])),
            "UB": {k: float(np.mean([r.llm["UB"][k] for r in reports]))
                   for k in _USABILITY_KEYS},
        }
    return out
