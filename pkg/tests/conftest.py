import json

import numpy as np
import pytest

from vardepth.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_run_config(root, **overrides) -> RunConfig:
    """A config small enough that a full train-all finishes in seconds."""
    raw = {
        "model": {"d_model": 64, "blocks": 2, "heads": 2},
        "data": {"root": str(root / "data"), "train_samples": 8,
                 "val_samples": 2, "test_samples": 2},
        "training": {"tokenizer_epochs": 2, "prior_phase1_epochs": 1,
                     "prior_phase2_epochs": 1, "upsampler_phase1_epochs": 1,
                     "upsampler_phase2_epochs": 1, "batch_size": 4},
        "paths": {"checkpoints": str(root / "ckpt"),
                  "outputs": str(root / "out"), "logs": str(root / "logs")},
    }
    for section, kv in overrides.items():
        raw.setdefault(section, {}).update(kv)
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One tiny dataset trained end to end, shared by pipeline/CLI tests."""
    from vardepth.pipeline import run_datagen, train_all

    root = tmp_path_factory.mktemp("trained_run")
    cfg = tiny_run_config(root)
    run_datagen(cfg)
    train_all(cfg)
    (root / "run.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return root, cfg
