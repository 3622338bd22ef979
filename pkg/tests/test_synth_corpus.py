import numpy as np
import pytest
from pydantic import ValidationError

from experiment_config import SynthSpec
from synth_corpus import generate, popularity, preferred_successors, transition_matrix, write_synth


def test_byte_identical_per_seed(tmp_path):
    spec = SynthSpec(n_sessions=150, n_items=30, seed=4)
    first = write_synth(spec, tmp_path / "a")
    second = write_synth(spec, tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()
    assert first.name == "synth_corpus.txt"


def test_seed_changes_corpus():
    assert generate(SynthSpec(n_sessions=100, seed=1)).digest != generate(SynthSpec(n_sessions=100, seed=2)).digest


def test_shape():
    spec = SynthSpec(n_sessions=200, n_items=25, min_len=3, max_len=8, seed=0)
    corpus = generate(spec)
    assert corpus.session_ids == list(range(1, 201))
    assert corpus.item_count == 25
    assert all(3 <= len(s) <= 8 for s in corpus.sessions)
    assert all(1 <= item <= 25 for s in corpus.sessions for item in s.items)


def test_popularity_is_zipf():
    p = popularity(SynthSpec(n_items=10, popularity_skew=1.0))
    assert p.sum() == pytest.approx(1.0)
    assert p[0] / p[1] == pytest.approx(2.0)


def test_sharp_transitions():
    spec = SynthSpec(n_items=50, sharpness=1e4, seed=0)
    rows = transition_matrix(spec, np.random.default_rng(0))
    np.testing.assert_allclose(rows.sum(axis=1), 1.0)
    assert np.median(rows.max(axis=1)) > 0.9


def test_preferred_successors_exclude_self():
    spec = SynthSpec(n_items=30, n_successors=5)
    chosen = preferred_successors(spec, np.random.default_rng(2))
    assert chosen.shape == (30, 5)
    for i, row in enumerate(chosen):
        assert i not in row
        assert len(set(row.tolist())) == 5


def test_rows_peak_on_their_own_successors():
    spec = SynthSpec(seed=0)
    rows = transition_matrix(spec, np.random.default_rng(spec.seed))
    chosen = preferred_successors(spec, np.random.default_rng(spec.seed))
    top = rows.argmax(axis=1)
    # no item is the favourite successor of many rows
    assert np.bincount(top, minlength=spec.n_items).max() <= 0.1 * spec.n_items
    assert np.mean([top[i] in chosen[i] for i in range(spec.n_items)]) > 0.9


def test_true_transitions_beat_popularity():
    spec = SynthSpec(seed=0)
    corpus = generate(spec)
    rows = transition_matrix(spec, np.random.default_rng(spec.seed))
    pairs = np.array([(a, b) for s in corpus.sessions for a, b in zip(s.items, s.items[1:])]) - 1
    counts = np.bincount(pairs[:, 1], minlength=spec.n_items)
    popular = set(np.argsort(-counts, kind="stable")[:10].tolist())
    popularity_recall = np.mean([b in popular for b in pairs[:, 1]])
    top10 = np.argsort(-rows, axis=1, kind="stable")[:, :10]
    oracle_recall = np.mean([b in top10[a] for a, b in pairs])
    assert oracle_recall >= 2.0 * popularity_recall


@pytest.mark.parametrize("overrides", [{"n_sessions": 99}, {"n_items": 5}, {"min_len": 6, "max_len": 5},
                                       {"sharpness": 0}, {"n_successors": 200}, {"follow_prob": 1.5},
                                       {"bogus": 1}])
def test_invalid_spec(overrides):
    with pytest.raises(ValidationError):
        SynthSpec(**overrides)
