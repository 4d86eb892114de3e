import numpy as np
import pytest

from sparsecbm.data import Example
from sparsecbm.model import MaskSet, ModelConfig, init_params


@pytest.fixture
def tiny_config():
    return ModelConfig(
        emb_dim=4,
        hidden_dims=(6, 5),
        enc_out=5,
        n_concepts=2,
        n_concept_classes=3,
        n_task_classes=3,
        vocab_size=12,
        seed=0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    params = init_params(tiny_config)
    # Zero-initialized classifier blocks carry no gradient signal into the
    # task path; give them values so tests exercise the full graph.
    rng = np.random.default_rng(99)
    params.phi[...] = rng.normal(0, 0.5, params.phi.shape)
    return params


@pytest.fixture
def tiny_example():
    rng = np.random.default_rng(5)
    return Example(
        token_ids=rng.integers(0, 12, size=6),
        concept_labels=np.array([1, 2]),
        task_label=2,
    )


def random_masks(n_concepts, n_prunable, seed=0, keep=0.6):
    rng = np.random.default_rng(seed)
    return MaskSet((rng.random((n_concepts, n_prunable)) < keep).astype(np.uint8))
