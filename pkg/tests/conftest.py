import numpy as np
import pytest
import torch

from avatar_router.model import AvatarModel, ModelConfig
from avatar_router.synthgen import ClipDims, gen_clip, plan_dataset, sample_trajectory

torch.set_num_threads(1)


def build_clips(count=12, mix=0.25, seed=0):
    dims = ClipDims()
    clips = []
    for item in plan_dataset(count, mix, seed):
        rng = np.random.default_rng(np.random.SeedSequence([item["seed"], 0]))
        clip = gen_clip(sample_trajectory(item["kind"], dims, rng), dims, item["seed"])
        clip.split = item["split"]
        clips.append(clip)
    return clips


@pytest.fixture(scope="session")
def toy_clips():
    return build_clips()


def tiny_model_config(**kw):
    base = dict(layers=2, d_model=16, heads=2, face_queries=2, router_width=8, router_heads=2, router_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return AvatarModel(tiny_model_config())
