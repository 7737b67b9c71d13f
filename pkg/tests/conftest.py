"""Shared fixtures: a small on-disk phantom dataset and a fast train config."""

import pytest
import torch

from memwarp.data import PhantomSpec, synth_dataset
from memwarp.training import AblationFlags, TrainConfig

torch.set_num_threads(2)

TINY_SPEC = PhantomSpec(shape=(24, 24, 8), subjects=6, seed=21, split_ratios=(0.5, 0.25, 0.25))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_phantom")
    synth_dataset(TINY_SPEC, root)
    return root


def tiny_train_config(mode=6, steps=30, seed=0):
    return TrainConfig(
        steps=steps,
        batch_size=2,
        levels=2,
        encoder_channels=(4, 8),
        val_interval=10,
        seed=seed,
        ablation=AblationFlags.from_mode(mode),
    )
