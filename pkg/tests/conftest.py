import numpy as np
import pytest
import torch

from fsvfm.pretrainer import PretrainConfig, Trainer
from fsvfm.synth import SynthConfig, generate_synthetic

torch.set_num_threads(max(torch.get_num_threads(), 2))


def micro_config(**overrides) -> PretrainConfig:
    """Micro-profile training config sized for fast double-precision tests."""
    base = dict(
        mask_strategy="crfr_p",
        epochs=1,
        batch_size=4,
        base_lr=0.016,
        warmup_epochs=0.5,
        seed=5,
        profile="micro",
        image_size=64,
        proj_hidden=128,
        proj_out=64,
    )
    base.update(overrides)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def face_dataset():
    return generate_synthetic(SynthConfig(n_real=12, n_fake=4, seed=3))


@pytest.fixture(scope="session")
def smoke_run():
    """The 200-step overfit run shared by the training-based acceptance
    criteria: micro profile, region-covering masking, 64 synthetic faces,
    one full-batch step per epoch."""
    data = generate_synthetic(SynthConfig(n_real=64, n_fake=0, seed=5))
    config = micro_config(
        epochs=200, batch_size=64, base_lr=0.02, warmup_epochs=20
    )
    trainer = Trainer(data, config)
    payload = trainer.train()
    return {
        "payload": payload,
        "reports": list(trainer.reports),
        "config": config,
        "dataset": data,
    }


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
