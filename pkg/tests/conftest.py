import numpy as np
import pytest

from kare.gateway import DeterministicChat, Gateway, MockEmbedding


@pytest.fixture
def gateway():
    """Fully deterministic gateway: mock chat + mock embeddings, no disk cache."""
    return Gateway(DeterministicChat(seed=7), MockEmbedding(dimension=32, seed=7))


def make_gateway(chat=None, embed_dim=32, seed=7, **kwargs):
    chat = chat if chat is not None else DeterministicChat(seed=seed)
    return Gateway(chat, MockEmbedding(dimension=embed_dim, seed=seed), **kwargs)


def unit(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    return arr / np.linalg.norm(arr)
