"""
Recommendation and unlearning metrics.

Recall@k and NDCG@k use leave-one-out ranking of each held-out session's last
item over the full item set. Hit_u@k checks whether an unlearned item still
shows up in the top-k ranking produced from the interactions before it.
U_beta folds Recall@10 and Hit_u@1 into one F-style score.

Ranks are 1-based; score ties go to the lower item id.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from gru_model import HyperParams, ParamVector, encode
from session_data import Corpus, UnlearnSample

logger = logging.getLogger(__name__)

RANK_BATCH_SIZE = 512
DEFAULT_RECALL_KS = (10, 20)
DEFAULT_HIT_KS = (1, 5)
U_BETA_RECALL_K = 10
U_BETA_HIT_K = 1


@dataclass
class MetricsReport:
    recall: Dict[int, float]
    ndcg: Dict[int, float]
    hit_u: Optional[Dict[int, float]]
    u_beta: Optional[float]
    beta: float
    test_positions: int
    unlearn_samples: int
    run_id: str = ""
    extra: Dict[str, float] = field(default_factory=dict)

    def to_rows(self) -> List[Dict]:
        """Flatten to "run_id,metric,k,value" rows."""
        rows = [{"run_id": self.run_id, "metric": "recall", "k": k, "value": v} for k, v in sorted(self.recall.items())]
        rows += [{"run_id": self.run_id, "metric": "ndcg", "k": k, "value": v} for k, v in sorted(self.ndcg.items())]
        if self.hit_u is not None:
            rows += [{"run_id": self.run_id, "metric": "hit_u", "k": k, "value": v} for k, v in sorted(self.hit_u.items())]
        if self.u_beta is not None:
            rows.append({"run_id": self.run_id, "metric": "u_beta", "k": U_BETA_RECALL_K, "value": self.u_beta})
        return rows

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ("recall", "ndcg", "hit_u"):
            if data[key] is not None:
                data[key] = {str(k): v for k, v in sorted(data[key].items())}
        return data


def rank_targets(params: ParamVector, prefixes: Sequence[Sequence[int]], targets: Sequence[int],
                 hp: HyperParams, exclude_prefix: bool = False) -> np.ndarray:
    """
    Rank of each target among all items, scored from its prefix.

    Args:
        params: Model parameters
        prefixes: Item prefixes, one per target
        targets: Ground-truth items in 1..|V|
        hp: Hyperparameters
        exclude_prefix: Drop prefix items (other than the target) from the ranking

    Returns:
        Integer array of 1-based ranks
    """
    ranks = np.zeros(len(targets), dtype=np.int64)
    item_ids = np.arange(1, params.item_count + 1)
    for start in range(0, len(targets), RANK_BATCH_SIZE):
        stop = min(start + RANK_BATCH_SIZE, len(targets))
        scores = encode(params, prefixes[start:stop], hp).logits
        chunk_targets = np.asarray(targets[start:stop], dtype=np.int64)
        if exclude_prefix:
            for row, prefix in enumerate(prefixes[start:stop]):
                seen = np.asarray([i for i in set(prefix) if i != chunk_targets[row]], dtype=np.int64)
                if seen.size:
                    scores[row, seen - 1] = -np.inf
        target_scores = scores[np.arange(stop - start), chunk_targets - 1][:, None]
        higher = (scores > target_scores).sum(axis=1)
        tied_before = ((scores == target_scores) & (item_ids[None, :] < chunk_targets[:, None])).sum(axis=1)
        ranks[start:stop] = 1 + higher + tied_before
    return ranks


def leave_one_out(corpus: Corpus):
    prefixes = [s.items[:-1] for s in corpus.sessions]
    targets = [s.items[-1] for s in corpus.sessions]
    return prefixes, targets


def recall_from_ranks(ranks: np.ndarray, k: int) -> float:
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def ndcg_from_ranks(ranks: np.ndarray, k: int) -> float:
    if not ranks.size:
        return 0.0
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def recall_at_k(params: ParamVector, test: Corpus, k: int, hp: HyperParams, exclude_prefix: bool = False) -> float:
    """Fraction of test sessions whose final item ranks in the top k."""
    prefixes, targets = leave_one_out(test)
    return recall_from_ranks(rank_targets(params, prefixes, targets, hp, exclude_prefix), k)


def ndcg_at_k(params: ParamVector, test: Corpus, k: int, hp: HyperParams, exclude_prefix: bool = False) -> float:
    """Mean single-relevant-item NDCG: 1/log2(rank+1) inside the top k, else 0."""
    prefixes, targets = leave_one_out(test)
    return ndcg_from_ranks(rank_targets(params, prefixes, targets, hp, exclude_prefix), k)


def unlearn_ranks(params: ParamVector, samples: Sequence[UnlearnSample], hp: HyperParams,
                  exclude_prefix: bool = False) -> np.ndarray:
    return rank_targets(params, [s.prefix for s in samples], [s.target for s in samples], hp, exclude_prefix)


def hit_u_at_k(params: ParamVector, samples: Sequence[UnlearnSample], k: int, hp: HyperParams,
               exclude_prefix: bool = False) -> float:
    """Fraction of unlearned items still in the top k from their prefix. Lower is better."""
    if not samples:
        raise ValueError("Hit_u needs at least one unlearning sample")
    return recall_from_ranks(unlearn_ranks(params, samples, hp, exclude_prefix), k)


def u_beta(recall: float, hit_u: float, beta: float) -> float:
    """
    (1 + b^2) * R * (1 - H) / (b^2 * R + (1 - H)).

    Defined as 0 when Recall = 0 and Hit_u = 1.
    """
    if not (0.0 <= recall <= 1.0 and 0.0 <= hit_u <= 1.0):
        raise ValueError(f"Recall and Hit_u must lie in [0, 1], got {recall}, {hit_u}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    kept = 1.0 - hit_u
    denominator = beta ** 2 * recall + kept
    if denominator == 0.0:
        return 0.0
    return (1.0 + beta ** 2) * recall * kept / denominator


def popularity_scores(train: Corpus) -> np.ndarray:
    """Interaction count of each item 1..|V| in the training corpus."""
    counts = np.zeros(train.item_count)
    for session in train.sessions:
        np.add.at(counts, np.asarray(session.items) - 1, 1.0)
    return counts


def popularity_recall_at_k(train: Corpus, test: Corpus, k: int) -> float:
    """Recall@k of recommending the globally most popular items to everyone."""
    counts = popularity_scores(train)
    _, targets = leave_one_out(test)
    targets = np.asarray(targets, dtype=np.int64)
    item_ids = np.arange(1, train.item_count + 1)
    target_counts = counts[targets - 1][:, None]
    ranks = 1 + (counts[None, :] > target_counts).sum(axis=1) + (
        (counts[None, :] == target_counts) & (item_ids[None, :] < targets[:, None])
    ).sum(axis=1)
    return recall_from_ranks(ranks, k)


def report(params: ParamVector, hp: HyperParams, test: Corpus, samples: Sequence[UnlearnSample],
           beta: float, recall_ks: Sequence[int] = DEFAULT_RECALL_KS, hit_ks: Sequence[int] = DEFAULT_HIT_KS,
           run_id: str = "", exclude_prefix: bool = False) -> MetricsReport:
    """
    Assemble every metric for one model.

    With an empty unlearning set the Hit_u fields and U_beta are left out.
    """
    prefixes, targets = leave_one_out(test)
    ranks = rank_targets(params, prefixes, targets, hp, exclude_prefix)
    recall = {k: recall_from_ranks(ranks, k) for k in sorted(set(recall_ks) | {U_BETA_RECALL_K})}
    ndcg = {k: ndcg_from_ranks(ranks, k) for k in sorted(set(recall_ks))}

    hit_u, score = None, None
    if samples:
        u_ranks = unlearn_ranks(params, samples, hp, exclude_prefix)
        hit_u = {k: recall_from_ranks(u_ranks, k) for k in sorted(set(hit_ks) | {U_BETA_HIT_K})}
        score = u_beta(recall[U_BETA_RECALL_K], hit_u[U_BETA_HIT_K], beta)

    return MetricsReport(
        recall=recall,
        ndcg=ndcg,
        hit_u=hit_u,
        u_beta=score,
        beta=beta,
        test_positions=len(targets),
        unlearn_samples=len(samples),
        run_id=run_id,
    )


def write_metrics_csv(reports: Sequence[MetricsReport], path) -> None:
    rows = [row for r in reports for row in r.to_rows()]
    frame = pd.DataFrame(rows, columns=["run_id", "metric", "k", "value"])
    frame.to_csv(path, index=False, float_format="%.10f", lineterminator="\n")


def write_metrics_json(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
