import json

import numpy as np
import pytest

from experiment_config import SynthSpec
from gru_model import HyperParams, init_params
from session_data import Corpus, Session, UnlearnSample, split
from synth_corpus import generate

ITEMS = 20


@pytest.fixture
def toy_corpus() -> Corpus:
    """40 random sessions of length 4..7 over 20 items."""
    rng = np.random.default_rng(11)
    sessions = []
    for session_id in range(1, 41):
        length = int(rng.integers(4, 8))
        sessions.append(Session(session_id, tuple(int(i) for i in rng.integers(1, ITEMS + 1, size=length))))
    return Corpus(sessions=tuple(sessions), item_count=ITEMS, source="toy")


@pytest.fixture
def tiny_hp() -> HyperParams:
    return HyperParams(embed_dim=8, max_prefix_len=20, learn_rate=1e-2, train_batch=8, unlearn_batch=4, seed=3)


@pytest.fixture
def tiny_params(tiny_hp):
    return init_params(tiny_hp, ITEMS)


@pytest.fixture
def ref_params(tiny_hp):
    return init_params(tiny_hp.model_copy(update={"seed": 4}), ITEMS)


@pytest.fixture
def toy_samples(toy_corpus):
    """One unlearning sample from each of the first 12 sessions."""
    return [UnlearnSample.from_session(s, 2 + (s.id % (len(s) - 2))) for s in toy_corpus.sessions[:12]]


@pytest.fixture
def markov_split():
    corpus = generate(SynthSpec(n_sessions=120, n_items=ITEMS, sharpness=50.0, seed=5))
    return split(corpus, seed=5)


def write_config(path, out_dir, **overrides):
    """Write a small, fast experiment config and return its path."""
    config = {
        "dataset": {
            "synth": {"n_sessions": 100, "n_items": 12, "sharpness": 20.0, "seed": 1},
            "min_count": 2,
            "unlearn_ratio": 0.1,
        },
        "model": {"embed_dim": 4, "max_prefix_len": 10, "learn_rate": 0.01, "train_batch": 16,
                  "unlearn_batch": 8},
        "train_epochs": 1,
        "unlearn": {"epochs": 2},
        "out_dir": str(out_dir),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    path.write_text(json.dumps(config))
    return path
