"""Transformer engine: geometry, zero-init, gradients, sampling, training."""

import json
import zlib

import numpy as np
import pytest

from gradcheck import check_gradients
from stepflow.consistency import fuse_conditioning
from stepflow.engine import (
    CheckpointError,
    ModelConfig,
    SamplerState,
    TrainingError,
    data_tokens,
    denoise_step,
    init_params,
    load_checkpoint,
    make_schedule,
    noise_tokens,
    patchify,
    predict_velocity,
    region_images,
    sample,
    save_checkpoint,
    timestep_embedding,
    train,
    unpatchify,
)
from stepflow.layout import LatentSequence
from stepflow.synthetic import SyntheticRecipe, make_synthetic_dataset
from stepflow.tensor import ParameterError, ShapeError, Tensor, mse
from stepflow.text import RecipeSpec

TINY = ModelConfig(d=32, heads=2, head_dim=16, depth=2, region_height=8,
                   region_width=8, patch_size=2, sampler_steps=4,
                   encoder_table=512)


def shrink(img):
    """32x32 synthetic canvas -> 8x8 by 4x4 block averaging."""
    return img.reshape(8, 4, 8, 4, 3).mean(axis=(1, 3))


def tiny_dataset(seed=3, count=2, max_steps=3):
    return [SyntheticRecipe(recipe=it.recipe,
                            images=tuple(shrink(im) for im in it.images))
            for it in make_synthetic_dataset(seed=seed, count=count,
                                             max_steps=max_steps)]


def conditioning_for(recipe, cfg):
    enc = cfg.encoder()
    cond = fuse_conditioning(enc, recipe, cfg.lam)
    block, _ = enc.encode_recipe_joint(recipe)
    return cond, block


# ---------------------------------------------------------------------------
# config


def test_config_defaults_consistent():
    cfg = ModelConfig()
    assert cfg.d == cfg.heads * cfg.head_dim == 128
    assert cfg.patch_dim == 48
    assert cfg.layout_for(3).total_tokens == 3 * 64


@pytest.mark.parametrize("kw", [
    dict(d=100),                       # d != heads*head_dim
    dict(head_dim=30, d=120),          # head_dim not multiple of 4
    dict(region_height=30),            # not divisible by patch
    dict(alpha=1.5),
    dict(lam=-0.1),
    dict(sampler_steps=0),
    dict(t_min=1.0),
    dict(rope_scheme="fancy"),
    dict(patchify_mode="conv"),
    dict(d=32, heads=2, head_dim=16),  # patch_dim 48 > d 32
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ParameterError):
        ModelConfig(**kw)


def test_config_hash_tracks_content():
    a, b = ModelConfig(), ModelConfig(alpha=0.2)
    assert a.config_hash() == ModelConfig().config_hash()
    assert a.config_hash() != b.config_hash()


def test_schedule_decreasing_with_unit_start():
    s = make_schedule(16)
    assert len(s) == 16 and s[0] == 1.0 and s[-1] == pytest.approx(1 / 16)
    assert all(a > b for a, b in zip(s, s[1:]))
    SamplerState(schedule=s, index=0, seed=0)
    with pytest.raises(ParameterError):
        SamplerState(schedule=(0.5, 0.5), index=0, seed=0)
    with pytest.raises(ParameterError):
        SamplerState(schedule=(1.2, 0.5), index=0, seed=0)


# ---------------------------------------------------------------------------
# patch geometry


def test_patchify_counts_and_values():
    img = np.arange(8 * 8 * 3, dtype=float).reshape(8, 8, 3)
    toks = patchify(img, 4)
    assert toks.shape == (4, 48)
    # token 1 is the top-right 4x4 block, row-major within the patch
    assert np.array_equal(toks[1], img[0:4, 4:8].reshape(-1))


def test_patchify_round_trip():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(32, 32, 3))
    for p in (2, 4, 8):
        assert np.array_equal(unpatchify(patchify(img, p), img.shape), img)


def test_patchify_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        patchify(np.zeros((7, 8, 3)), 4)
    with pytest.raises(ShapeError):
        patchify(np.zeros((8, 8)), 4)
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((4, 47)), (8, 8, 3))


def test_fixed_mode_images_round_trip():
    cfg = TINY
    params = init_params(cfg)
    ds = tiny_dataset()
    item = ds[0]
    layout = cfg.layout_for(item.recipe.n_steps)
    x0 = data_tokens(item.images, layout, params, cfg)
    z = LatentSequence(Tensor(x0), layout, t=0.0)
    back = region_images(z, params, cfg)
    for orig, rec in zip(item.images, back):
        assert np.allclose(orig, rec, atol=1e-12)


def test_fixed_mode_noise_stays_in_patch_subspace():
    cfg = TINY
    layout = cfg.layout_for(2)
    x1 = noise_tokens(np.random.default_rng(0), layout, cfg)
    assert x1.shape == (layout.total_tokens, cfg.d)
    assert np.array_equal(x1[:, cfg.patch_dim:], np.zeros_like(x1[:, cfg.patch_dim:]))
    assert np.any(x1[:, :cfg.patch_dim] != 0.0)


# ---------------------------------------------------------------------------
# network behavior


def test_timestep_embedding_shape_and_variation():
    e1, e2 = timestep_embedding(0.1, 32), timestep_embedding(0.9, 32)
    assert e1.shape == (1, 32)
    assert not np.allclose(e1, e2)
    assert np.allclose(timestep_embedding(0.1, 32), e1)


def test_fresh_params_predict_exactly_zero_velocity():
    """Output projection starts at zero, so the first prediction is 0."""
    cfg = TINY
    params = init_params(cfg)
    ds = tiny_dataset()
    item = ds[0]
    layout = cfg.layout_for(item.recipe.n_steps)
    cond, block = conditioning_for(item.recipe, cfg)
    z = LatentSequence(Tensor(noise_tokens(np.random.default_rng(1), layout, cfg)),
                       layout, t=1.0)
    v = predict_velocity(z, cond, block, params, cfg)
    assert np.array_equal(v.data, np.zeros((layout.total_tokens, cfg.d)))


def test_noise_level_modulates_prediction_after_training():
    cfg = TINY
    ds = tiny_dataset(count=1)
    params, _ = train(ds, cfg, steps=10, log_every=10)
    item = ds[0]
    layout = cfg.layout_for(item.recipe.n_steps)
    cond, block = conditioning_for(item.recipe, cfg)
    noise = noise_tokens(np.random.default_rng(2), layout, cfg)
    va = predict_velocity(LatentSequence(Tensor(noise), layout, t=0.9),
                          cond, block, params, cfg)
    vb = predict_velocity(LatentSequence(Tensor(noise), layout, t=0.1),
                          cond, block, params, cfg)
    assert not np.allclose(va.data, vb.data)


def test_alpha_zero_ignores_whole_recipe_text():
    """With fusion weight 0 the global pass must not influence the output."""
    ds = tiny_dataset(count=1)
    item = ds[0]
    base = dict(d=32, heads=2, head_dim=16, depth=1, region_height=8,
                region_width=8, patch_size=2, encoder_table=512)
    layout = ModelConfig(**base).layout_for(item.recipe.n_steps)
    noise = noise_tokens(np.random.default_rng(3), layout, ModelConfig(**base))
    z = LatentSequence(Tensor(noise), layout, t=0.7)

    other = RecipeSpec(goal="different goal entirely",
                       steps=item.recipe.steps)
    outs = {}
    for alpha in (0.0, 0.5):
        cfg = ModelConfig(alpha=alpha, **base)
        params, _ = train([item], cfg, steps=5, log_every=5)
        cond, block = conditioning_for(item.recipe, cfg)
        _, other_block = conditioning_for(other, cfg)
        va = predict_velocity(z, cond, block, params, cfg)
        vb = predict_velocity(z, cond, other_block, params, cfg)
        outs[alpha] = (va.data, vb.data)
    assert np.array_equal(*outs[0.0])
    assert not np.allclose(*outs[0.5])


def test_mask_mode_changes_prediction():
    cfg = TINY
    ds = tiny_dataset(count=1)
    params, _ = train(ds, cfg, steps=5, log_every=5)
    item = ds[0]
    layout = cfg.layout_for(item.recipe.n_steps)
    cond, block = conditioning_for(item.recipe, cfg)
    z = LatentSequence(Tensor(noise_tokens(np.random.default_rng(4), layout, cfg)),
                       layout, t=0.5)
    paired = predict_velocity(z, cond, block, params, cfg, mask_mode="paired")
    full = predict_velocity(z, cond, block, params, cfg, mask_mode="full")
    assert not np.allclose(paired.data, full.data)
    with pytest.raises(ParameterError, match="mask_mode"):
        predict_velocity(z, cond, block, params, cfg, mask_mode="banana")


def test_velocity_gradients_match_finite_differences():
    """End-to-end FD check through rope, both passes, and the block stack."""
    cfg = ModelConfig(d=32, heads=2, head_dim=16, depth=1, region_height=8,
                      region_width=8, patch_size=2, sampler_steps=2,
                      encoder_table=512)
    ds = tiny_dataset(count=1, max_steps=2)
    item = ds[0]
    layout = cfg.layout_for(item.recipe.n_steps)
    cond, block = conditioning_for(item.recipe, cfg)
    params = init_params(cfg)
    # nudge the zero-init tensors so gradients flow everywhere
    rng = np.random.default_rng(7)
    for k in list(params):
        if not np.any(params[k].data):
            params[k] = Tensor(rng.normal(scale=0.05, size=params[k].shape))
    noise = noise_tokens(np.random.default_rng(5), layout, cfg)
    x0 = data_tokens(item.images, layout, params, cfg)
    z_np = 0.4 * x0 + 0.6 * noise
    target = Tensor(noise - x0)

    watch_names = ["block0.attn.wq", "block0.mod.w", "final.b", "tmlp.w2"]

    def build_loss(*watched):
        p = dict(params)
        for name, w in zip(watch_names, watched):
            p[name] = w
        z = LatentSequence(Tensor(z_np), layout, t=0.6)
        v = predict_velocity(z, cond, block, p, cfg)
        return mse(v, target)

    worst = check_gradients(build_loss, [params[n].data for n in watch_names],
                            coords=4, rng=np.random.default_rng(11))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# sampling


def euler_oracle_velocity(x0, x1):
    v = Tensor(x1 - x0)
    return lambda z: v


def test_sampler_with_exact_velocity_recovers_data():
    """Straight-line flow: with the true velocity the Euler chain lands on
    the clean tokens no matter how many steps it takes."""
    ds = tiny_dataset(count=1)
    item = ds[0]
    for steps in (1, 4):
        cfg = ModelConfig(d=32, heads=2, head_dim=16, depth=2, region_height=8,
                          region_width=8, patch_size=2, sampler_steps=steps,
                          encoder_table=512)
        params = init_params(cfg)
        layout = cfg.layout_for(item.recipe.n_steps)
        x0 = data_tokens(item.images, layout, params, cfg)
        x1 = noise_tokens(np.random.default_rng(21), layout, cfg)
        res = sample(item.recipe, cfg, params, seed=21,
                     velocity_fn=euler_oracle_velocity(x0, x1))
        err = float(np.mean((res.latents.tokens.data - x0) ** 2))
        assert err < 1e-10
        assert res.latents.t == 0.0


def test_denoise_step_is_euler_update():
    cfg = TINY
    layout = cfg.layout_for(2)
    z_np = np.random.default_rng(6).normal(size=(layout.total_tokens, cfg.d))
    z = LatentSequence(Tensor(z_np), layout, t=0.5)
    v_np = np.ones_like(z_np)
    out = denoise_step(z, 0.25, None, None, None, cfg,
                       velocity_fn=lambda _: Tensor(v_np))
    assert np.allclose(out.tokens.data, z_np - 0.25, atol=1e-12)
    assert out.t == 0.25


def test_sample_writes_images_and_manifest(tmp_path):
    cfg = TINY
    ds = tiny_dataset(count=1, max_steps=3)
    item = ds[0]
    params = init_params(cfg)
    res = sample(item.recipe, cfg, params, out_dir=tmp_path / "run", seed=9)
    n = item.recipe.n_steps
    assert len(res.images) == n
    assert all(im.shape == (8, 8, 3) and im.dtype == np.uint8 for im in res.images)
    files = sorted(p.name for p in (tmp_path / "run").iterdir())
    expected = [f"step-{k + 1:02d}.png" for k in range(n)]
    assert files == sorted(expected + ["strip.png", "manifest.json"])

    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["per_step_files"] == expected
    assert man["seed"] == 9
    assert man["alpha"] == cfg.alpha
    assert man["lambda"] == cfg.lam
    assert man["mask_mode"] == "paired"
    assert man["config_hash"] == cfg.config_hash()
    assert man["schedule"][0] == 1.0
    assert man["recipe"]["steps"][0]["text"] == item.recipe.steps[0]


def test_sample_is_deterministic_in_seed(tmp_path):
    cfg = TINY
    item = tiny_dataset(count=1)[0]
    params = init_params(cfg)
    a = sample(item.recipe, cfg, params, out_dir=tmp_path / "a", seed=5)
    b = sample(item.recipe, cfg, params, out_dir=tmp_path / "b", seed=5)
    c = sample(item.recipe, cfg, params, out_dir=tmp_path / "c", seed=6)
    for name in a.manifest["per_step_files"] + ["strip.png"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not np.array_equal(a.latents.tokens.data, c.latents.tokens.data)


def test_sample_rejects_too_many_steps():
    cfg = ModelConfig(d=32, heads=2, head_dim=16, depth=1, region_height=8,
                      region_width=8, patch_size=2, max_regions=2,
                      encoder_table=512)
    recipe = RecipeSpec(goal="g", steps=("a", "b", "c"))
    with pytest.raises(ParameterError, match="3 steps"):
        sample(recipe, cfg, init_params(cfg))


# ---------------------------------------------------------------------------
# training


def test_training_reduces_loss_on_fixed_pair():
    cfg = TINY
    ds = tiny_dataset(count=1, max_steps=2)
    params, curve = train(ds, cfg, steps=60, log_every=10, freeze_noise=True)
    first, last = curve[0][1], curve[-1][1]
    assert last < 0.5 * first
    assert all(np.isfinite(l) for _, l, _ in curve)
    assert all(np.isfinite(g) for _, _, g in curve)


def test_training_curve_logging_cadence():
    cfg = TINY
    ds = tiny_dataset(count=1)
    _, curve = train(ds, cfg, steps=7, log_every=3)
    assert [s for s, _, _ in curve] == [0, 3, 6]


@pytest.mark.filterwarnings("ignore:overflow")
def test_training_error_names_the_step():
    cfg = TINY
    item = tiny_dataset(count=1)[0]
    huge = SyntheticRecipe(recipe=item.recipe,
                           images=tuple(np.full_like(im, 1e200)
                                        for im in item.images))
    with pytest.raises(TrainingError, match=r"step 0"):
        train([huge], cfg, steps=3)


def test_training_rejects_empty_dataset():
    with pytest.raises(ParameterError, match="empty"):
        train([], TINY, steps=1)


def test_learned_patchify_trains_reconstruction():
    cfg = ModelConfig(d=32, heads=2, head_dim=16, depth=1, region_height=8,
                      region_width=8, patch_size=2, patchify_mode="learned",
                      encoder_table=512)
    params0 = init_params(cfg)
    assert "patch.enc.w" in params0 and "patch.dec.w" in params0
    assert "patch.enc.w" not in init_params(TINY)

    ds = tiny_dataset(count=1, max_steps=2)
    item = ds[0]

    def recon_err(params):
        from stepflow.engine import patchify as pf
        raw = np.concatenate([pf(2.0 * im - 1.0, cfg.patch_size)
                              for im in item.images])
        enc = raw @ params["patch.enc.w"].data + params["patch.enc.b"].data
        dec = enc @ params["patch.dec.w"].data + params["patch.dec.b"].data
        return float(np.mean((dec - raw) ** 2))

    before = recon_err(params0)
    trained, _ = train(ds, cfg, steps=40, log_every=40)
    assert recon_err(trained) < before


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = TINY
    params, _ = train(tiny_dataset(count=1), cfg, steps=3, log_every=3)
    path = tmp_path / "model.npz"
    save_checkpoint(path, params, cfg)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert sorted(loaded) == sorted(params)
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data)


def test_checkpoint_detects_config_tampering(tmp_path):
    cfg = TINY
    path = tmp_path / "model.npz"
    save_checkpoint(path, init_params(cfg), cfg)
    with np.load(path) as data:
        payload = {k: np.array(v) for k, v in data.items()}
    blob = payload["__config__"].tobytes().decode()
    doctored = json.loads(blob)
    doctored["alpha"] = 0.9
    payload["__config__"] = np.frombuffer(
        json.dumps(doctored, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    with pytest.raises(CheckpointError, match="hash mismatch"):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage_file(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(zlib.compress(b"not a checkpoint"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_missing_params(tmp_path):
    cfg = TINY
    params = init_params(cfg)
    path = tmp_path / "model.npz"
    del params["final.b"]
    save_checkpoint(path, params, cfg)
    with pytest.raises(CheckpointError, match="final.b"):
        load_checkpoint(path)
