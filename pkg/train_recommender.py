"""
Recommender Training

Mini-batch Adam training of the GRU recommender on the next-item
cross-entropy (the recommendation loss). After every epoch the model is
scored on the validation split and the parameters with the best
validation Recall@10 are kept.

The same loop produces both the original model (theta_rec) and the
exact-unlearning baseline (theta_exa, trained on train - D_f).
"""

import logging
import time
from typing import List, Optional

import numpy as np

from cau_utils import iter_batches
from gru_model import AdamState, HyperParams, ParamVector, adam_step, value_and_grad
from rec_metrics import recall_at_k
from session_data import Corpus

logger = logging.getLogger(__name__)

VALID_RECALL_K = 10


def train(params: ParamVector, train_corpus: Corpus, valid_corpus: Corpus, hp: HyperParams, epochs: int,
          history: Optional[List[dict]] = None) -> ParamVector:
    """
    Train a recommender and return the best-on-validation parameters.

    Args:
        params: Initial parameters (left untouched; training works on a copy)
        train_corpus: Training sessions (length >= 2 are used)
        valid_corpus: Validation sessions; when empty the last epoch is kept
        hp: Hyperparameters (train_batch, learn_rate, Adam constants, seed)
        epochs: Number of passes over the training sessions
        history: Optional list that receives one dict per epoch

    Returns:
        theta_rec
    """
    params = params.copy()
    if epochs <= 0:
        return params

    sessions = [s for s in train_corpus.sessions if len(s) >= 2]
    if not sessions:
        raise ValueError("Training corpus has no session with at least 2 items")

    rng = np.random.default_rng(hp.seed)
    adam = AdamState.zeros(len(params))
    best = params.copy()
    best_recall = -np.inf
    total_batches = (len(sessions) + hp.train_batch - 1) // hp.train_batch

    for epoch in range(1, epochs + 1):
        start_time = time.time()
        order = rng.permutation(len(sessions))
        losses = []
        for batch_num, batch in enumerate(iter_batches(order, hp.train_batch), start=1):
            loss, g = value_and_grad(params, "rec", [sessions[i] for i in batch], hp)
            adam_step(params, adam, g, hp)
            losses.append(loss)
            logger.debug(f"Epoch {epoch} batch {batch_num}/{total_batches}: loss {loss:.4f}")

        mean_loss = float(np.mean(losses))
        if len(valid_corpus):
            recall = recall_at_k(params, valid_corpus, VALID_RECALL_K, hp)
            logger.info(
                f"Epoch {epoch}/{epochs}: loss {mean_loss:.4f}, valid Recall@{VALID_RECALL_K} {recall:.4f} "
                f"({(time.time() - start_time):.2f}s)"
            )
        else:
            recall = None
            logger.info(f"Epoch {epoch}/{epochs}: loss {mean_loss:.4f} ({(time.time() - start_time):.2f}s)")
        if history is not None:
            history.append({"epoch": epoch, "loss": mean_loss, "valid_recall": recall})
        # without a validation split the latest epoch wins
        score = float(epoch) if recall is None else recall
        if score > best_recall:
            best_recall = score
            best = params.copy()

    return best
