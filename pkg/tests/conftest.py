import numpy as np
import pytest
import torch

from actiondet.data import ActionVocabulary


@pytest.fixture(autouse=True)
def _seed_everything():
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def vocab():
    return ActionVocabulary(
        classes=[(0, "sit"), (1, "stand"), (2, "walk"),
                 (3, "carry"), (4, "talk")],
        pose_ids=frozenset({0, 1, 2}),
    )


@pytest.fixture
def float64():
    """Run a test under float64 defaults, restoring float32 afterwards."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
