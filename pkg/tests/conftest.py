"""Shared fixtures. The trained toy model is expensive (minutes), so it is
built once per session and shared by every test that needs it."""

import time
from types import SimpleNamespace

import pytest

from stepflow.engine import ModelConfig, save_checkpoint, train
from stepflow.synthetic import make_synthetic_dataset


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Default-config model trained 2000 steps on the seed-0 corpus.

    Returns the config, trained params, loss curve, wall time, dataset, and
    a saved checkpoint path for CLI-level tests.
    """
    cfg = ModelConfig()
    dataset = make_synthetic_dataset(seed=0, count=64, max_steps=5)
    t0 = time.time()
    params, curve = train(dataset, cfg, steps=2000, log_every=50)
    elapsed = time.time() - t0
    ckpt = tmp_path_factory.mktemp("toy-model") / "toy.npz"
    save_checkpoint(ckpt, params, cfg)
    return SimpleNamespace(cfg=cfg, params=params, curve=curve,
                           dataset=dataset, elapsed=elapsed, ckpt=ckpt)
