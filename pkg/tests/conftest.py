import numpy as np
import pytest
import torch

from smartgen.model import SMART, get_preset, scene_inputs
from smartgen.scene import build_vocab_set, tokenize_scenario
from smartgen.synth import generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(6, kinds=("straight", "arc", "intersection"), n_agents=(3, 5), seed=21,
                           class_weights=(0.7, 0.15, 0.15))


@pytest.fixture(scope="session")
def vocabs(corpus):
    return build_vocab_set(corpus, motion_size=128, road_size=128, seed=0)


@pytest.fixture(scope="session")
def tiny_model(vocabs):
    cfg = get_preset("smart-1m-tiny", dropout=0.0)
    return SMART(cfg, vocabs.class_sizes(), vocabs.sizes()["road"]).init_params(0).eval()


@pytest.fixture(scope="session")
def scene(vocabs, corpus):
    return tokenize_scenario(vocabs, corpus[2])


@pytest.fixture(scope="session")
def inputs(scene):
    return scene_inputs(scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
