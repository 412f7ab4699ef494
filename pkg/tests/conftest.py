import os
from pathlib import Path

import numpy as np
import pytest

from matres import models, synth

CACHE = Path(os.environ.get("MATRES_MODEL_CACHE", Path(__file__).resolve().parent.parent / ".cache" / "models"))


@pytest.fixture(scope="session")
def pretrained():
    """Default matcher and restorer, trained once and cached on disk."""
    return models.default_models(CACHE)


@pytest.fixture(scope="session")
def corpus():
    return synth.build_corpus(20, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def zero_gradients_after(state, k):
    """Gradient hook that plants a plateau: from iteration ``k`` on, the gradient map is zeroed and
    the optimizer moments are cleared, so Adam momentum cannot keep moving the adapter."""

    def hook(it, grads):
        if it < k:
            return grads
        for moments in state.optimizer.state.values():
            moments.m = np.zeros_like(moments.m)
            moments.v = np.zeros_like(moments.v)
        return {name: np.zeros_like(g) for name, g in grads.items()}

    return hook
