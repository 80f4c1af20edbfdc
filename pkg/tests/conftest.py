import pytest
import torch

from composed_retrieval.backends import OracleCaptionBackend, OracleReformulationBackend
from composed_retrieval.network import ModelConfig, init_checkpoint
from composed_retrieval.pipeline import PairSamplingConfig, build_dataset
from composed_retrieval.records import ImageCollection
from composed_retrieval.tokenizer import build_vocabulary
from composed_retrieval.training import TrainConfig, train
from composed_retrieval.world import SyntheticWorldConfig, generate_world

torch.set_num_threads(1)

# Small schema used by most unit tests; the full 480-tuple default world is
# exercised in the acceptance suite.
TINY_ATTRIBUTES = {
    "color": ["red", "blue", "green"],
    "pattern": ["plain", "striped"],
    "object": ["dress", "shirt"],
}


@pytest.fixture(scope="session")
def tiny_world_cfg():
    return SyntheticWorldConfig(attributes=TINY_ATTRIBUTES, image_size=16, seed=7)


@pytest.fixture(scope="session")
def tiny_collection(tiny_world_cfg):
    return generate_world(tiny_world_cfg)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_world_cfg):
    return build_vocabulary(tiny_world_cfg.attributes)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(
        image_size=16,
        patch_size=8,
        d_model=16,
        n_heads=2,
        n_blocks=2,
        mlp_ratio=2,
        text_layers=1,
        max_text_len=12,
        seed=3,
    )


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_model_cfg, tiny_vocab):
    return init_checkpoint(tiny_model_cfg, tiny_vocab)


@pytest.fixture(scope="session")
def tiny_backends(tiny_world_cfg):
    return (
        OracleCaptionBackend(tiny_world_cfg.attributes),
        OracleReformulationBackend(tiny_world_cfg.attributes),
    )


@pytest.fixture(scope="session")
def tiny_triplets(tiny_collection, tiny_backends):
    cap, reform = tiny_backends
    cfg = PairSamplingConfig(strategy="global_random", n_pairs=80, seed=5)
    return build_dataset(tiny_collection, cfg, cap, reform)


@pytest.fixture(scope="session")
def trained_tiny(tiny_triplets, tiny_collection, tiny_model_cfg):
    """A briefly trained checkpoint plus its log, shared across tests."""
    cfg = TrainConfig(batch_size=16, epochs=10, seed=1)
    return train(tiny_triplets, tiny_collection, tiny_model_cfg, cfg)
