"""
Synthetic Session Corpus

Generates sessions from a seeded first-order Markov chain over items:
1. Item popularity follows a Zipf law with exponent `popularity_skew`
2. Every item gets its own row centre: `follow_prob` spread evenly over
   `n_successors` preferred successors drawn at random (never the item
   itself), the rest spread by popularity
3. Each transition row is a Dirichlet draw around its centre with total
   concentration n_items / sharpness, so a high sharpness gives
   near-deterministic bigrams
4. A session starts from a popularity draw and runs for
   min_len + Poisson(mean_extra_len) items (capped at max_len)

Since the centres differ per row, the best next-item guess depends on the
current item and a popularity ranking is a weak predictor.

The same spec and seed always produce a byte-identical corpus file.
"""

import logging
from pathlib import Path

import numpy as np

from cau_utils import ensure_dir
from experiment_config import SynthSpec
from session_data import Corpus, Session, write_corpus

logger = logging.getLogger(__name__)


def popularity(spec: SynthSpec) -> np.ndarray:
    ranks = np.arange(1, spec.n_items + 1, dtype=np.float64)
    weights = ranks ** -spec.popularity_skew
    return weights / weights.sum()


def preferred_successors(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_items, n_successors) 0-based successor indices; row i never holds i."""
    chosen = np.empty((spec.n_items, spec.n_successors), dtype=np.int64)
    for i in range(spec.n_items):
        others = np.delete(np.arange(spec.n_items), i)
        chosen[i] = rng.choice(others, size=spec.n_successors, replace=False)
    return chosen


def row_centres(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Expected transition rows: preferred successors on top of a popularity background."""
    centres = np.tile((1.0 - spec.follow_prob) * popularity(spec), (spec.n_items, 1))
    chosen = preferred_successors(spec, rng)
    rows = np.repeat(np.arange(spec.n_items), spec.n_successors)
    centres[rows, chosen.ravel()] += spec.follow_prob / spec.n_successors
    return centres


def transition_matrix(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Row i is the successor distribution of item i + 1."""
    centres = row_centres(spec, rng)
    rows = rng.gamma(centres * spec.n_items / spec.sharpness)
    totals = rows.sum(axis=1)
    for i in np.flatnonzero(totals <= 0):
        # every gamma draw underflowed; fall back to a single successor
        rows[i] = 0.0
        rows[i, rng.choice(spec.n_items, p=centres[i])] = 1.0
    return rows / rows.sum(axis=1, keepdims=True)


def generate(spec: SynthSpec) -> Corpus:
    """
    Sample a corpus of spec.n_sessions sessions over items 1..spec.n_items.

    Returns:
        Corpus with session ids 1..n_sessions
    """
    rng = np.random.default_rng(spec.seed)
    base = popularity(spec)
    transitions = transition_matrix(spec, rng)
    cumulative = np.cumsum(transitions, axis=1)

    sessions = []
    for session_id in range(1, spec.n_sessions + 1):
        length = min(spec.min_len + int(rng.poisson(spec.mean_extra_len)), spec.max_len)
        item = int(rng.choice(spec.n_items, p=base))
        items = [item]
        for _ in range(length - 1):
            # inverse-cdf draw, clamped against rounding at the top of the row
            item = min(int(np.searchsorted(cumulative[item], rng.random(), side="right")), spec.n_items - 1)
            items.append(item)
        sessions.append(Session(id=session_id, items=tuple(i + 1 for i in items)))

    corpus = Corpus(sessions=tuple(sessions), item_count=spec.n_items, source=f"synth-{spec.seed}")
    logger.info(f"Generated {len(corpus)} sessions with {corpus.interaction_count()} interactions")
    return corpus


def write_synth(spec: SynthSpec, out_dir) -> Path:
    """Generate and write the corpus to <out_dir>/synth_corpus.txt."""
    path = ensure_dir(out_dir) / "synth_corpus.txt"
    write_corpus(generate(spec), path)
    return path
