"""
Unlearning Curriculum

Scores how hard each unlearning sample is to forget and orders the
unlearning batches from easy to hard.

Two difficulty measures:
- gradient: -cos(grad L_unlearn, grad L_normal + grad L_kl) per sample, so
  samples whose forgetting direction agrees with the retain direction are easy
- embedding: <session state of the prefix, embedding of the target>, so
  targets the model strongly favours are hard

Two schedules:
- hard: sort ascending by difficulty (stable) and chunk into batches
- soft: sample batches with p ∝ exp(tau * (2t - 1) * (Dif - mean Dif)),
  which favours easy samples early (t < 0.5) and hard samples late
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from cau_utils import ScheduleError
from gru_model import HyperParams, ParamVector, backward, encode, head_cross_entropy, head_kl, head_unlearn
from session_data import UnlearnSample

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
# per-sample gradient rows held at once, in floats
PER_SAMPLE_BUDGET = 4_000_000


class DifficultyKind(str, Enum):
    GRADIENT = "gradient"
    EMBEDDING = "embedding"


class Strategy(str, Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class DifficultyScore:
    sample_ref: int
    score: float
    kind: DifficultyKind


class CurriculumConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metric_kind: DifficultyKind = DifficultyKind.GRADIENT
    strategy: Strategy = Strategy.HARD
    temperature: float = Field(2.0, gt=0)
    refresh_interval: int = Field(1, ge=1)
    # None means the model's unlearn_batch
    batch_size: Optional[int] = Field(None, ge=1)
    with_replacement: bool = False
    seed: int = 0

    def resolved_batch_size(self, hp: HyperParams) -> int:
        return self.batch_size if self.batch_size is not None else hp.unlearn_batch


@dataclass(frozen=True)
class Progress:
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ScheduleError(f"Progress must lie in [0, 1], got {self.t}")

    @classmethod
    def at(cls, step: int, total_steps: int) -> "Progress":
        if total_steps < 1:
            raise ScheduleError(f"total_steps must be >= 1, got {total_steps}")
        return cls(min(step / total_steps, 1.0))


def _gradient_scores(params: ParamVector, ref_params: ParamVector, samples: Sequence[UnlearnSample],
                     hp: HyperParams) -> np.ndarray:
    """Dif_g for a chunk of samples from one forward pass and two per-sample backward passes."""
    prefixes = [s.prefix for s in samples]
    cache = encode(params, prefixes, hp)
    _, d_unlearn = head_unlearn(cache, [s.target for s in samples])
    _, d_normal = head_cross_entropy(cache, [s.successor for s in samples])
    _, d_kl = head_kl(cache, encode(ref_params, prefixes, hp).log_probs)

    # backward is linear in dlogits, so grad L_normal + grad L_kl needs one pass
    g_unlearn = backward(params, cache, d_unlearn, per_sample=True)
    g_retain = backward(params, cache, d_normal + d_kl, per_sample=True)

    cross = np.einsum("bp,bp->b", g_unlearn, g_retain)
    norm_u = np.sqrt(np.einsum("bp,bp->b", g_unlearn, g_unlearn))
    norm_r = np.sqrt(np.einsum("bp,bp->b", g_retain, g_retain))
    degenerate = (norm_u < ZERO_NORM) | (norm_r < ZERO_NORM)
    with np.errstate(divide="ignore", invalid="ignore"):
        cosine = np.where(degenerate, 0.0, cross / (norm_u * norm_r))
    return np.clip(-cosine, -1.0, 1.0)


def _length_chunks(samples: Sequence[UnlearnSample], chunk: int, hp: HyperParams) -> List[List[int]]:
    """Sample refs grouped by prefix window length, so per-sample passes skip padded steps."""
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(min(len(s.prefix), hp.max_prefix_len), []).append(i)
    return [refs[start:start + chunk] for _, refs in sorted(groups.items()) for start in range(0, len(refs), chunk)]


def _embedding_scores(params: ParamVector, samples: Sequence[UnlearnSample], hp: HyperParams) -> np.ndarray:
    h = encode(params, [s.prefix for s in samples], hp).h
    targets = params.E[np.asarray([s.target for s in samples], dtype=np.int64)]
    return np.einsum("bd,bd->b", h, targets)


def dif_gradient(params: ParamVector, ref_params: ParamVector, sample: UnlearnSample, hp: HyperParams) -> float:
    """Gradient unlearning difficulty in [-1, 1]; 0 when either gradient vanishes."""
    return float(_gradient_scores(params, ref_params, [sample], hp)[0])


def dif_embedding(params: ParamVector, sample: UnlearnSample, hp: HyperParams) -> float:
    return float(_embedding_scores(params, [sample], hp)[0])


def difficulty_scores(params: ParamVector, ref_params: ParamVector, samples: Sequence[UnlearnSample],
                      kind: DifficultyKind, hp: HyperParams) -> List[DifficultyScore]:
    """
    Score every sample of D_f with the current parameters.

    Args:
        params: Current (evolving) parameters
        ref_params: Frozen reference model, used by the gradient measure
        samples: The unlearning set D_f
        kind: gradient or embedding
        hp: Hyperparameters

    Returns:
        One DifficultyScore per sample, sample_ref being its index in samples
    """
    kind = DifficultyKind(kind)
    if kind is DifficultyKind.EMBEDDING:
        values = _embedding_scores(params, samples, hp) if samples else np.zeros(0)
    else:
        values = np.zeros(len(samples))
        for refs in _length_chunks(samples, max(1, PER_SAMPLE_BUDGET // len(params)), hp):
            values[refs] = _gradient_scores(params, ref_params, [samples[i] for i in refs], hp)
    if not np.all(np.isfinite(values)):
        raise ScheduleError(f"Non-finite {kind.value} difficulty scores")
    return [DifficultyScore(sample_ref=i, score=float(v), kind=kind) for i, v in enumerate(values)]


def hard_schedule(scores: Sequence[DifficultyScore], batch: int) -> List[List[int]]:
    """
    Easy-to-hard batches: stable ascending sort by score, then sequential chunks.

    Returns:
        Batches of sample refs

    Raises:
        ScheduleError: If there are no scores or batch < 1
    """
    if not scores:
        raise ScheduleError("Cannot schedule an empty unlearning set")
    if batch < 1:
        raise ScheduleError(f"Batch size must be >= 1, got {batch}")
    ordered = [s.sample_ref for s in sorted(scores, key=lambda s: (s.score, s.sample_ref))]
    return [ordered[i:i + batch] for i in range(0, len(ordered), batch)]


ScoreInput = Union[Sequence[DifficultyScore], Sequence[float], np.ndarray]


def _values_and_refs(scores: ScoreInput) -> Tuple[np.ndarray, np.ndarray]:
    if len(scores) and isinstance(scores[0], DifficultyScore):
        return (np.asarray([s.score for s in scores], dtype=np.float64),
                np.asarray([s.sample_ref for s in scores], dtype=np.int64))
    values = np.asarray(scores, dtype=np.float64)
    return values, np.arange(values.size)


def _progress_value(t: Union[Progress, float]) -> float:
    return t.t if isinstance(t, Progress) else Progress(float(t)).t


def soft_probabilities(scores: ScoreInput, t: Union[Progress, float], temperature: float) -> np.ndarray:
    """p_x ∝ exp(tau * (2t - 1) * (Dif(x) - mean Dif)), normalised in log space."""
    values, _ = _values_and_refs(scores)
    if values.size == 0:
        raise ScheduleError("Cannot build sampling probabilities from no scores")
    if temperature <= 0:
        raise ScheduleError(f"Temperature must be positive, got {temperature}")
    logits = temperature * (2.0 * _progress_value(t) - 1.0) * (values - values.mean())
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def soft_draw_batch(scores: ScoreInput, t: Union[Progress, float], temperature: float, batch: int, seed: int,
                    step: int = 0) -> List[int]:
    """
    Weighted draw of `batch` samples without replacement.

    Each sample gets the key log(u) / p (the log of u^(1/p)) with u uniform in
    (0, 1]; the `batch` largest keys win. The generator is seeded with
    (seed, step) so a draw is reproducible on its own.

    Returns:
        Sample refs in draw order
    """
    _, refs = _values_and_refs(scores)
    if batch > refs.size:
        raise ScheduleError(f"Batch of {batch} exceeds the {refs.size} available samples")
    if batch < 1:
        raise ScheduleError(f"Batch size must be >= 1, got {batch}")
    probs = soft_probabilities(scores, t, temperature)
    rng = np.random.default_rng([seed, step])
    u = 1.0 - rng.random(refs.size)
    with np.errstate(divide="ignore"):
        keys = np.log(u) / probs
    order = np.argsort(-keys, kind="stable")[:batch]
    return [int(r) for r in refs[order]]


def soft_epoch_batches(score_fn: Callable[[], List[DifficultyScore]], n_samples: int, batch: int,
                       temperature: float, seed: int, step_offset: int, total_steps: int,
                       refresh_interval: int = 1, with_replacement: bool = False
                       ) -> Iterator[Tuple[int, Progress, List[int], List[DifficultyScore]]]:
    """
    One epoch of soft-sampled batches, ceil(n / batch) steps long.

    Scores come from `score_fn` (called lazily, so the caller's parameter
    updates between steps are seen) and are refreshed every
    `refresh_interval` global steps. Without replacement, the batches of an
    epoch partition the samples; with replacement, every step draws from all
    of them. The epoch ends early once the global step reaches
    `total_steps`.

    Yields:
        (global step, progress, sample refs, scores used for the draw)
    """
    if n_samples == 0:
        raise ScheduleError("Cannot schedule an empty unlearning set")
    batch = min(batch, n_samples)
    remaining = list(range(n_samples))
    scores = None
    for i in range(math.ceil(n_samples / batch)):
        step = step_offset + i
        if step >= total_steps:
            return
        if scores is None or step % refresh_interval == 0:
            scores = score_fn()
        progress = Progress.at(step, total_steps)
        pool = [scores[j] for j in (range(n_samples) if with_replacement else remaining)]
        refs = soft_draw_batch(pool, progress, temperature, min(batch, len(pool)), seed, step)
        if not with_replacement:
            taken = set(refs)
            remaining = [j for j in remaining if j not in taken]
        yield step, progress, refs, scores


def sample_id(sample: UnlearnSample) -> str:
    return f"{sample.session_id}:{sample.position_t}"


def dump_rows(scores: Sequence[DifficultyScore], samples: Sequence[UnlearnSample], epoch: int) -> List[dict]:
    return [
        {"sample_id": sample_id(samples[s.sample_ref]), "kind": s.kind.value, "score": s.score, "epoch": epoch}
        for s in scores
    ]


def write_difficulty_dump(rows: Sequence[dict], path) -> None:
    """Write "sample_id,kind,score,epoch" rows."""
    frame = pd.DataFrame(list(rows), columns=["sample_id", "kind", "score", "epoch"])
    frame.to_csv(path, index=False, float_format="%.10f", lineterminator="\n")
