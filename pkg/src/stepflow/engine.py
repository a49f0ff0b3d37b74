"""Miniature diffusion transformer over stacked image regions.

One denoising trajectory carries all N step images at once: the latent
sequence is the vertical stack of per-region patch tokens, and every
timestep runs the block stack twice — once under the pairing mask with
per-step conditioning (each step's text sees only its own region) and once
unmasked over the whole-recipe text (global context) — then blends the two
velocity predictions and takes an Euler step.

Flow convention: x0 is clean data, x1 is noise, z_t = (1-t)*x0 + t*x1, and
the network predicts the straight-line velocity v = x1 - x0. The schedule
runs t from 1 down to 0, so z + dt*v with dt < 0 moves toward data; with
the exact velocity a single step from t=1 lands on x0.

Patch tokens live in a d-wide channel space. In "fixed" mode the patch
embedding is the identity permutation into the first p*p*C channels (zero
padded), so patchify/unpatchify round-trip exactly; "learned" mode uses
trained in/out projections plus a reconstruction term in the loss.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import (
    AttentionParams,
    JointSequence,
    StepMask,
    base_pass,
    build_full_mask,
    build_step_mask,
    fuse_latents,
    joint_attention,
    regional_pass,
)
from .consistency import DEFAULT_CONTEXT_WEIGHT, FusedConditioning, fuse_conditioning
from .layout import LatentSequence, RegionLayout
from .rope import RotationTable, apply_flexible_rope, apply_original_rope
from .tensor import (
    GradTape,
    ParameterError,
    ShapeError,
    Tensor,
    add,
    add_row,
    gelu,
    gradient,
    layer_norm,
    linear,
    mse,
    mul_row,
    scale,
    slice_cols,
)
from .text import RecipeSpec, TextEncoder, TokenBlock, recipe_to_json

__all__ = [
    "ModelConfig",
    "SamplerState",
    "SampleResult",
    "TrainingError",
    "CheckpointError",
    "init_params",
    "timestep_embedding",
    "patchify",
    "unpatchify",
    "dit_block",
    "predict_velocity",
    "denoise_step",
    "sample",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or fails its config-hash check."""


@dataclass(frozen=True)
class ModelConfig:
    """Everything that determines the model and sampler behavior."""

    d: int = 128
    heads: int = 4
    head_dim: int = 32
    depth: int = 4
    patch_size: int = 4
    region_height: int = 32
    region_width: int = 32
    channels: int = 3
    rope_base: float = 10000.0
    rope_scheme: str = "flexible"       # regional pass: "flexible" | "original"
    base_rope_scheme: str = "flexible"  # global pass positional scheme
    alpha: float = 0.1                  # weight of the global pass in fusion
    lam: float = DEFAULT_CONTEXT_WEIGHT  # recipe-context weight in conditioning
    sampler_steps: int = 16
    seed: int = 0
    t_min: float = 0.05                 # training-time floor for noise level
    max_regions: int = 12
    encoder_backend: str = "contextual"
    encoder_table: int = 4096
    patchify_mode: str = "fixed"        # "fixed" | "learned"

    def __post_init__(self):
        if self.d != self.heads * self.head_dim:
            raise ParameterError(
                f"d={self.d} must equal heads*head_dim={self.heads}*{self.head_dim}")
        if self.head_dim % 4:
            raise ParameterError(f"head_dim={self.head_dim} must be a multiple of 4")
        if self.region_height % self.patch_size or self.region_width % self.patch_size:
            raise ParameterError(
                f"region {self.region_height}x{self.region_width} not divisible by "
                f"patch {self.patch_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.sampler_steps < 1:
            raise ParameterError(f"sampler_steps must be >= 1, got {self.sampler_steps}")
        if not 0.0 <= self.t_min < 1.0:
            raise ParameterError(f"t_min must lie in [0, 1), got {self.t_min}")
        if self.depth < 1 or self.max_regions < 1:
            raise ParameterError("depth and max_regions must be positive")
        for name in ("rope_scheme", "base_rope_scheme"):
            if getattr(self, name) not in ("flexible", "original"):
                raise ParameterError(f"{name} must be flexible|original")
        if self.patchify_mode not in ("fixed", "learned"):
            raise ParameterError(f"patchify_mode must be fixed|learned")
        if self.patch_dim > self.d:
            raise ParameterError(
                f"patch dim {self.patch_dim} exceeds embedding width {self.d}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def layout_for(self, n_regions: int) -> RegionLayout:
        return RegionLayout(n_regions, self.region_height, self.region_width,
                            self.patch_size, self.channels)

    def encoder(self) -> TextEncoder:
        return TextEncoder(d=self.d, seed=self.seed, table_size=self.encoder_table,
                           backend=self.encoder_backend)

    def rotation_table(self) -> RotationTable:
        return RotationTable(self.head_dim, base=self.rope_base)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SamplerState:
    """Decreasing noise-level schedule plus the seed that fixes the noise."""

    schedule: tuple[float, ...]
    index: int
    seed: int

    def __post_init__(self):
        ts = self.schedule
        if not ts or any(b >= a for a, b in zip(ts, ts[1:])):
            raise ParameterError(f"schedule must be strictly decreasing: {ts}")
        if not all(0.0 < t <= 1.0 for t in ts):
            raise ParameterError(f"schedule values must lie in (0, 1]: {ts}")


def make_schedule(steps: int) -> tuple[float, ...]:
    """Linear noise levels t_k = (steps-k)/steps, k = 0..steps-1; the Euler
    loop appends the implicit terminal level 0."""
    return tuple((steps - k) / steps for k in range(steps))


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Seeded parameter dict. Modulation and output projections start at
    zero, so every block begins as the identity and the initial velocity
    prediction is exactly zero."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    s = 1.0 / math.sqrt(d)
    p: dict[str, Tensor] = {}

    def w(name, shape, sc=s):
        p[name] = Tensor(rng.normal(scale=sc, size=shape))

    def z(name, shape):
        p[name] = Tensor(np.zeros(shape))

    w("tmlp.w1", (d, d)); z("tmlp.b1", (d,))
    w("tmlp.w2", (d, d)); z("tmlp.b2", (d,))
    for i in range(cfg.depth):
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"block{i}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            z(f"block{i}.attn.{bias}", (d,))
        w(f"block{i}.mlp.w1", (d, 4 * d)); z(f"block{i}.mlp.b1", (4 * d,))
        w(f"block{i}.mlp.w2", (4 * d, d)); z(f"block{i}.mlp.b2", (d,))
        z(f"block{i}.mod.w", (d, 6 * d)); z(f"block{i}.mod.b", (6 * d,))
    z("final.mod.w", (d, 2 * d)); z("final.mod.b", (2 * d,))
    z("final.w", (d, d)); z("final.b", (d,))
    if cfg.patchify_mode == "learned":
        w("patch.enc.w", (cfg.patch_dim, d), sc=1.0 / math.sqrt(cfg.patch_dim))
        z("patch.enc.b", (d,))
        w("patch.dec.w", (d, cfg.patch_dim))
        z("patch.dec.b", (cfg.patch_dim,))
    return p


def _attn_view(params: dict[str, Tensor], i: int, heads: int) -> AttentionParams:
    g = lambda k: params[f"block{i}.attn.{k}"]
    return AttentionParams(g("wq"), g("wk"), g("wv"), g("wo"),
                           g("bq"), g("bk"), g("bv"), g("bo"), heads=heads)


# ---------------------------------------------------------------------------
# patch geometry and channel embedding


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """[H, W, C] -> [h*w, p*p*C] raw patch vectors, row-major over patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects H x W x C, got {image.shape}")
    H, W, C = image.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
    x = image.reshape(H // p, p, W // p, p, C)
    return x.transpose(0, 2, 1, 3, 4).reshape((H // p) * (W // p), p * p * C)


def unpatchify(tokens: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of patchify for the given image shape."""
    H, W, C = shape
    tokens = np.asarray(tokens, dtype=np.float64)
    p = int(round(math.sqrt(tokens.shape[1] // C)))
    if tokens.shape != ((H // p) * (W // p), p * p * C) or H % p or W % p:
        raise ShapeError(f"tokens {tokens.shape} do not tile image {shape}")
    x = tokens.reshape(H // p, W // p, p, p, C)
    return x.transpose(0, 2, 1, 3, 4).reshape(H, W, C)


def encode_patches(patches: np.ndarray, params: dict[str, Tensor],
                   cfg: ModelConfig) -> np.ndarray:
    """Raw patch vectors -> d-wide tokens (identity-pad or learned)."""
    L, pd = patches.shape
    if pd != cfg.patch_dim:
        raise ShapeError(f"patch width {pd} != configured {cfg.patch_dim}")
    if cfg.patchify_mode == "fixed":
        out = np.zeros((L, cfg.d))
        out[:, :pd] = patches
        return out
    return patches @ params["patch.enc.w"].data + params["patch.enc.b"].data


def decode_tokens(tokens: np.ndarray, params: dict[str, Tensor],
                  cfg: ModelConfig) -> np.ndarray:
    """d-wide tokens -> raw patch vectors (slice or learned projection)."""
    if cfg.patchify_mode == "fixed":
        return np.asarray(tokens)[:, :cfg.patch_dim].copy()
    return tokens @ params["patch.dec.w"].data + params["patch.dec.b"].data


def data_tokens(images: list[np.ndarray] | tuple, layout: RegionLayout,
                params: dict[str, Tensor], cfg: ModelConfig) -> np.ndarray:
    """Stack per-region images ([0,1] floats) into one clean token matrix."""
    if len(images) != layout.n_regions:
        raise ShapeError(f"{len(images)} images for {layout.n_regions} regions")
    parts = []
    for img in images:
        patches = patchify(2.0 * np.asarray(img, dtype=np.float64) - 1.0,
                           cfg.patch_size)
        parts.append(encode_patches(patches, params, cfg))
    return np.concatenate(parts, axis=0)


def noise_tokens(rng: np.random.Generator, layout: RegionLayout,
                 cfg: ModelConfig) -> np.ndarray:
    """Pure-noise latents. Fixed mode keeps the padding channels at zero so
    the trajectory stays inside the patch subspace."""
    L = layout.total_tokens
    if cfg.patchify_mode == "fixed":
        out = np.zeros((L, cfg.d))
        out[:, :cfg.patch_dim] = rng.standard_normal((L, cfg.patch_dim))
        return out
    return rng.standard_normal((L, cfg.d))


def region_images(z: LatentSequence, params: dict[str, Tensor],
                  cfg: ModelConfig) -> list[np.ndarray]:
    """Decode each region of a clean latent back to a [0,1] float image."""
    shape = (cfg.region_height, cfg.region_width, cfg.channels)
    out = []
    for n in range(z.layout.n_regions):
        lo, hi = z.layout.region_span(n)
        patches = decode_tokens(z.tokens.data[lo:hi], params, cfg)
        img = 0.5 * (unpatchify(patches, shape) + 1.0)
        out.append(np.clip(img, 0.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# network


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features of the noise level, shape [1, dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * float(t) * freqs
    return np.concatenate([np.cos(args), np.sin(args)])[None, :]


def conditioning_vector(t: float, params: dict[str, Tensor],
                        cfg: ModelConfig) -> Tensor:
    e = Tensor(timestep_embedding(t, cfg.d))
    h = gelu(linear(e, params["tmlp.w1"], params["tmlp.b1"]))
    return linear(h, params["tmlp.w2"], params["tmlp.b2"])


def _modulate(h: Tensor, shift: Tensor, scale_row: Tensor, d: int) -> Tensor:
    one = Tensor(np.ones((1, d)))
    return add_row(mul_row(h, add(scale_row, one)), shift)


def dit_block(x: JointSequence, c: Tensor, mask: StepMask,
              params: dict[str, Tensor], i: int, cfg: ModelConfig) -> JointSequence:
    """Pre-norm block: modulated attention and MLP, gated residuals.

    c is the [1, d] conditioning vector; six modulation rows (shift/scale/
    gate per sublayer) come from a zero-initialized projection of c, so a
    fresh block is the identity map.
    """
    d = cfg.d
    m = linear(c, params[f"block{i}.mod.w"], params[f"block{i}.mod.b"])
    sh1, sc1, g1, sh2, sc2, g2 = (slice_cols(m, k * d, (k + 1) * d)
                                  for k in range(6))
    h = _modulate(layer_norm(x.tokens), sh1, sc1, d)
    attn = joint_attention(x.with_tokens(h), mask, _attn_view(params, i, cfg.heads))
    tokens = add(x.tokens, mul_row(attn.tokens, g1))
    h2 = _modulate(layer_norm(tokens), sh2, sc2, d)
    h2 = linear(gelu(linear(h2, params[f"block{i}.mlp.w1"],
                            params[f"block{i}.mlp.b1"])),
                params[f"block{i}.mlp.w2"], params[f"block{i}.mlp.b2"])
    return x.with_tokens(add(tokens, mul_row(h2, g2)))


def _stack_fn(c: Tensor, params: dict[str, Tensor], cfg: ModelConfig):
    def run(x: JointSequence, mask: StepMask) -> JointSequence:
        for i in range(cfg.depth):
            x = dit_block(x, c, mask, params, i, cfg)
        return x
    return run


def _final_head(tokens: Tensor, c: Tensor, params: dict[str, Tensor],
                cfg: ModelConfig) -> Tensor:
    m = linear(c, params["final.mod.w"], params["final.mod.b"])
    sh, sc = slice_cols(m, 0, cfg.d), slice_cols(m, cfg.d, 2 * cfg.d)
    h = _modulate(layer_norm(tokens), sh, sc, cfg.d)
    return linear(h, params["final.w"], params["final.b"])


def _rotate(z: LatentSequence, scheme: str, table: RotationTable) -> LatentSequence:
    if scheme == "flexible":
        return apply_flexible_rope(z, table=table)
    return apply_original_rope(z, table=table)


def predict_velocity(z_t: LatentSequence, cond: FusedConditioning,
                     recipe_block: TokenBlock, params: dict[str, Tensor],
                     cfg: ModelConfig, mask_mode: str = "paired") -> Tensor:
    """Velocity prediction: paired pass (+ optional global pass, fused).

    mask_mode "paired" applies the step/region pairing mask; "full" is the
    ablation with all attention allowed. The global pass is skipped
    entirely when alpha is 0 — fusion would erase it exactly anyway.
    """
    if mask_mode not in ("paired", "full"):
        raise ParameterError(f"mask_mode must be paired|full, got {mask_mode!r}")
    if cond.n_steps != z_t.layout.n_regions:
        raise ShapeError(
            f"{cond.n_steps} conditioning blocks for "
            f"{z_t.layout.n_regions} regions")
    c = conditioning_vector(z_t.t, params, cfg)
    run = _stack_fn(c, params, cfg)
    table = cfg.rotation_table()

    z_rot = _rotate(z_t, cfg.rope_scheme, table)
    x = JointSequence.from_parts(list(cond.blocks), z_rot)
    build = build_step_mask if mask_mode == "paired" else build_full_mask
    mask = build([b.n_tokens for b in cond.blocks],
                 [z_t.layout.tokens_per_region] * z_t.layout.n_regions)
    v_regional = regional_pass(x, mask, run)

    if cfg.alpha > 0.0:
        z_rot_base = (z_rot if cfg.base_rope_scheme == cfg.rope_scheme
                      else _rotate(z_t, cfg.base_rope_scheme, table))
        v_base = base_pass(recipe_block, z_rot_base, run)
        fused = fuse_latents(v_base, v_regional, cfg.alpha)
    else:
        fused = v_regional
    return _final_head(fused.tokens, c, params, cfg)


def denoise_step(z_t: LatentSequence, t_next: float, cond: FusedConditioning,
                 recipe_block: TokenBlock, params: dict[str, Tensor],
                 cfg: ModelConfig, mask_mode: str = "paired",
                 velocity_fn=None) -> LatentSequence:
    """One Euler update z <- z + (t_next - t)*v toward lower noise.

    velocity_fn, when given, replaces the network prediction (oracle hook
    for sampler checks): it receives z_t and must return a [L, d] Tensor.
    """
    if velocity_fn is not None:
        v = velocity_fn(z_t)
    else:
        v = predict_velocity(z_t, cond, recipe_block, params, cfg, mask_mode)
    dt = float(t_next) - z_t.t
    return z_t.with_tokens(add(z_t.tokens, scale(v, dt)), t=float(t_next))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleResult:
    images: list[np.ndarray]          # per-region uint8 [H, W, C]
    manifest: dict
    latents: LatentSequence
    out_dir: Path | None = None


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def sample(recipe: RecipeSpec, cfg: ModelConfig, params: dict[str, Tensor],
           out_dir=None, seed: int | None = None, mask_mode: str = "paired",
           velocity_fn=None) -> SampleResult:
    """Generate one image per recipe step from a single joint trajectory.

    Deterministic in (recipe, cfg, seed): the same call writes identical
    PNG bytes. When out_dir is given, writes step-XX.png per region, a
    vertically stacked strip.png, and manifest.json.
    """
    n = recipe.n_steps
    if n > cfg.max_regions:
        raise ParameterError(
            f"recipe has {n} steps but the model caps at {cfg.max_regions} regions")
    layout = cfg.layout_for(n)
    enc = cfg.encoder()
    cond = fuse_conditioning(enc, recipe, cfg.lam)
    recipe_block, _ = enc.encode_recipe_joint(recipe)

    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    state = SamplerState(schedule=make_schedule(cfg.sampler_steps), index=0,
                         seed=seed)
    schedule = state.schedule
    z = LatentSequence(Tensor(noise_tokens(rng, layout, cfg)), layout,
                       t=schedule[0])
    for k in range(len(schedule)):
        t_next = schedule[k + 1] if k + 1 < len(schedule) else 0.0
        z = denoise_step(z, t_next, cond, recipe_block, params, cfg,
                         mask_mode=mask_mode, velocity_fn=velocity_fn)

    floats = region_images(z, params, cfg)
    images = [_to_uint8(img) for img in floats]
    per_step_files = [f"step-{k + 1:02d}.png" for k in range(n)]
    manifest = {
        "recipe": recipe_to_json(recipe),
        "seed": seed,
        "alpha": cfg.alpha,
        "lambda": cfg.lam,
        "schedule": [round(t, 12) for t in schedule],
        "per_step_files": per_step_files,
        "mask_mode": mask_mode,
        "n_steps": n,
        "config_hash": cfg.config_hash(),
    }
    result = SampleResult(images=images, manifest=manifest, latents=z)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, img in zip(per_step_files, images):
            Image.fromarray(img).save(out / name, format="PNG")
        Image.fromarray(np.concatenate(images, axis=0)).save(
            out / "strip.png", format="PNG")
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        result.out_dir = out
    return result


# ---------------------------------------------------------------------------
# training


def _adam_update(value, g, m, v, step, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    return value - lr * mhat / (np.sqrt(vhat) + eps), m, v


def train(dataset, cfg: ModelConfig, steps: int, lr: float = 1e-3,
          log_every: int = 50, freeze_noise: bool = False,
          params: dict[str, Tensor] | None = None):
    """Flow-matching training loop with Adam.

    Each step draws a recipe, a noise level t ~ U[t_min, 1], and a noise
    sample; the loss is ||v_hat - (x1 - x0)||^2. freeze_noise pins one
    noise draw per dataset item (the pure-memorization setting used by the
    overfit check). Returns (params, curve) where curve rows are
    (step, loss, grad_norm) for every logged step. Non-finite loss or
    gradient raises TrainingError naming the step.
    """
    if not dataset:
        raise ParameterError("training dataset is empty")
    params = dict(params) if params is not None else init_params(cfg)
    names = sorted(params)
    rng = np.random.default_rng(cfg.seed + 1)
    enc = cfg.encoder()

    prepared = []
    for item in dataset:
        layout = cfg.layout_for(item.recipe.n_steps)
        cond = fuse_conditioning(enc, item.recipe, cfg.lam)
        recipe_block, _ = enc.encode_recipe_joint(item.recipe)
        frozen = (noise_tokens(np.random.default_rng(cfg.seed + 7 + len(prepared)),
                               layout, cfg)
                  if freeze_noise else None)
        prepared.append((item, layout, cond, recipe_block, frozen))

    adam_m = {k: np.zeros_like(params[k].data) for k in names}
    adam_v = {k: np.zeros_like(params[k].data) for k in names}
    curve = []

    for step in range(steps):
        item, layout, cond, recipe_block, frozen = prepared[
            int(rng.integers(len(prepared)))]
        t = float(rng.uniform(cfg.t_min, 1.0))
        x0 = data_tokens(item.images, layout, params, cfg)
        x1 = frozen if frozen is not None else noise_tokens(rng, layout, cfg)
        z_t = LatentSequence(Tensor((1.0 - t) * x0 + t * x1), layout, t=t)
        target = Tensor(x1 - x0)

        tape = GradTape()
        watched = {k: tape.watch(params[k].data) for k in names}
        v_hat = predict_velocity(z_t, cond, recipe_block, watched, cfg)
        loss = mse(v_hat, target)
        if cfg.patchify_mode == "learned":
            raw = np.concatenate(
                [patchify(2.0 * np.asarray(im, dtype=np.float64) - 1.0,
                          cfg.patch_size) for im in item.images])
            enc_t = linear(Tensor(raw), watched["patch.enc.w"],
                           watched["patch.enc.b"])
            dec_t = linear(enc_t, watched["patch.dec.w"], watched["patch.dec.b"])
            loss = add(loss, mse(dec_t, Tensor(raw)))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        grads = gradient(tape, loss)
        grad_norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not np.isfinite(grad_norm):
            raise TrainingError(f"gradient diverged (non-finite) at step {step}")
        for k, g in zip(names, grads):
            new, adam_m[k], adam_v[k] = _adam_update(
                params[k].data, g, adam_m[k], adam_v[k], step + 1, lr)
            params[k] = Tensor(new)
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, loss_val, grad_norm))
    return params, curve


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    blob = json.dumps(asdict(cfg), sort_keys=True)
    arrays = {f"param:{k}": v.data for k, v in params.items()}
    with open(path, "wb") as f:
        np.savez(f, __version__=np.int64(CHECKPOINT_VERSION),
                 __config__=np.frombuffer(blob.encode(), dtype=np.uint8),
                 __config_hash__=np.frombuffer(cfg.config_hash().encode(),
                                               dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    """Load params+config; the stored config hash must match the config."""
    try:
        with np.load(path) as data:
            payload = {k: np.array(v) for k, v in data.items()}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    version = int(payload.get("__version__", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        blob = payload["__config__"].tobytes().decode()
        stored_hash = payload["__config_hash__"].tobytes().decode()
        cfg = ModelConfig(**json.loads(blob))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    if cfg.config_hash() != stored_hash:
        raise CheckpointError(
            f"config hash mismatch: stored {stored_hash}, "
            f"recomputed {cfg.config_hash()}")
    params = {k[len("param:"):]: Tensor(v) for k, v in payload.items()
              if k.startswith("param:")}
    expected = set(init_params(cfg))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        extra = sorted(set(params) - expected)[:3]
        raise CheckpointError(
            f"checkpoint parameters do not match config "
            f"(missing {missing}, unexpected {extra})")
    return params, cfg
