"""
Unlearning Engine

Runs one unlearning mode against a trained recommender (theta_rec) and a
forget set D_f:

- cau:           curriculum batches, Pareto (min-norm) weighting of the
                 unlearn / normal / KL gradients
- equal_weights: curriculum batches, fixed weights (1/3, 1/3, 1/3)
- random_order:  Pareto weighting, batches shuffled every epoch
- ga_only:       curriculum batches, gradient ascent on the unlearn loss only
- retrain:       train from scratch on the corpus with D_f spliced out
- original:      theta_rec itself, nothing to do

Every unlearning step takes the three batch-mean gradients, weights them,
and applies an Adam step; each run starts from fresh optimizer moments.
The normal and KL tasks use the unlearning samples' own prefixes, or only
the auxiliary retain pairs when those are enabled. A frozen copy of
theta_rec serves as the KL reference.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from cau_utils import DivergenceError, ScheduleError
from curriculum import (
    CurriculumConfig,
    DifficultyScore,
    Strategy,
    difficulty_scores,
    dump_rows,
    hard_schedule,
    soft_epoch_batches,
)
from gru_model import (
    AdamState,
    HyperParams,
    ParamVector,
    adam_step,
    backward,
    batch_losses,
    encode,
    head_cross_entropy,
    head_kl,
    head_unlearn,
    init_params,
)
from pareto_solver import combine, gram, normalize_gradients, solve_min_norm
from session_data import Corpus, SplitCorpus, UnlearnSample, splice_unlearned
from train_recommender import train

logger = logging.getLogger(__name__)

TASKS = ("unlearn", "normal", "kl")
ZERO_GRADIENT = 1e-12


class Mode(str, Enum):
    CAU = "cau"
    EQUAL_WEIGHTS = "equal_weights"
    RANDOM_ORDER = "random_order"
    GA_ONLY = "ga_only"
    RETRAIN = "retrain"
    ORIGINAL = "original"


VARIANT_MODES = (Mode.EQUAL_WEIGHTS, Mode.RANDOM_ORDER, Mode.GA_ONLY)


class UnlearnRunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Mode = Mode.CAU
    epochs: int = Field(100, ge=0)
    # caps the run at T steps; also sets the soft-sampling progress scale
    total_steps: Optional[int] = Field(None, ge=1)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)
    pareto_tol: float = Field(1e-6, gt=0)
    pareto_max_iter: int = Field(100, ge=1)
    normalize_gradients: bool = False
    auxiliary_retain: bool = False
    # None means the unlearning batch size
    auxiliary_size: Optional[int] = Field(None, ge=0)
    unlearn_floor: bool = False
    # None means 1 / (10 |V|)
    floor_prob: Optional[float] = Field(None, gt=0, lt=1)
    divergence_factor: float = Field(5.0, gt=1)
    divergence_patience: int = Field(3, ge=1)
    # None means the training epochs of the experiment
    retrain_epochs: Optional[int] = Field(None, ge=0)
    seed: int = 0

    def resolved_floor_prob(self, item_count: int) -> float:
        return self.floor_prob if self.floor_prob is not None else 1.0 / (10.0 * item_count)


@dataclass
class RunArtifacts:
    """
    Result of one run. `params` is theta_app (theta_exa for retrain).

    Only `timings` varies between identical runs.
    """

    mode: Mode
    params: ParamVector
    alpha_trace: List[Dict] = field(default_factory=list)
    loss_trace: List[Dict] = field(default_factory=list)
    difficulty_rows: List[Dict] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    epochs_run: int = 0
    steps_run: int = 0

    def write_alpha_trace(self, path) -> None:
        frame = pd.DataFrame(self.alpha_trace, columns=["epoch", "step", "alpha1", "alpha2", "alpha3"])
        frame.to_csv(path, index=False, float_format="%.10f", lineterminator="\n")

    def write_loss_trace(self, path) -> None:
        frame = pd.DataFrame(self.loss_trace, columns=["epoch", "unlearn", "normal", "kl"])
        frame.to_csv(path, index=False, float_format="%.10f", lineterminator="\n")


@dataclass(frozen=True)
class RetainPair:
    """Next-item pair (prefix -> successor) at 1-based `position` of a training session."""

    session_id: int
    position: int
    prefix: Tuple[int, ...]
    successor: int


class RetainSampler:
    """
    Uniform sampler of retain pairs from the training sessions.

    A pair predicts the item at position p (2 <= p <= n) from the items
    before it. In a session holding unlearned positions only p below the
    first unlearned position is allowed, so neither the forgotten pair nor
    any prefix containing a forgotten item is ever drawn.
    """

    def __init__(self, train_corpus: Corpus, samples: Sequence[UnlearnSample]):
        first_cut: Dict[int, int] = {}
        for s in samples:
            first_cut[s.session_id] = min(first_cut.get(s.session_id, s.position_t), s.position_t)
        self.sessions = train_corpus.by_id
        self.positions: List[Tuple[int, int]] = []
        for session in train_corpus.sessions:
            last = len(session)
            if session.id in first_cut:
                last = min(last, first_cut[session.id] - 1)
            self.positions.extend((session.id, p) for p in range(2, last + 1))

    def draw(self, size: int, seed: int, step: int = 0) -> List[RetainPair]:
        size = min(size, len(self.positions))
        if size <= 0:
            return []
        rng = np.random.default_rng([seed, step])
        picks = rng.choice(len(self.positions), size=size, replace=False)
        pairs = []
        for i in picks:
            session_id, p = self.positions[i]
            items = self.sessions[session_id].items
            pairs.append(RetainPair(session_id=session_id, position=p, prefix=items[:p - 1], successor=items[p - 1]))
        return pairs


def auxiliary_retain_batch(train_corpus: Corpus, samples: Sequence[UnlearnSample], size: int, seed: int,
                           step: int = 0) -> List[RetainPair]:
    """Draw `size` retain pairs that never touch an unlearned position. Deterministic per (seed, step)."""
    return RetainSampler(train_corpus, samples).draw(size, seed, step)


class DivergenceGuard:
    """
    Aborts when the epoch-mean normal loss stays above factor x its initial value for `patience` epochs.

    Both values are taken over the forget set's own prefixes (predicting the
    successor of each forgotten item): the baseline as the mean over D_f at
    theta_ref, the epoch value as the sample-weighted mean over the D_f
    samples visited in that epoch.
    """

    def __init__(self, baseline: float, factor: float, patience: int):
        self.baseline = baseline
        self.factor = factor
        self.patience = patience
        self.strikes = 0

    def update(self, epoch: int, normal_loss: float) -> None:
        limit = self.factor * self.baseline
        if not np.isfinite(normal_loss) or normal_loss > limit:
            self.strikes += 1
            logger.warning(
                f"Epoch {epoch}: normal loss {normal_loss:.4f} above {limit:.4f} "
                f"({self.strikes}/{self.patience})"
            )
        else:
            self.strikes = 0
        if self.strikes >= self.patience:
            raise DivergenceError(
                f"Normal loss exceeded {self.factor:g}x its initial value {self.baseline:.4f} for "
                f"{self.patience} consecutive epochs (last {normal_loss:.4f} at epoch {epoch})"
            )


def _initial_normal_loss(params: ParamVector, samples: Sequence[UnlearnSample], hp: HyperParams) -> float:
    return float(batch_losses(params, samples, hp, params)["normal"].mean())


def _task_gradients(params: ParamVector, ref_params: ParamVector, batch: Sequence[UnlearnSample],
                    retain: Sequence[RetainPair], hp: HyperParams, floor_logp: Optional[float],
                    unlearn_only: bool = False) -> Tuple[Dict[str, np.ndarray], List[np.ndarray]]:
    """
    Per-row losses and batch-mean gradients of the unlearn, normal and KL tasks.

    The normal and KL tasks run over the auxiliary retain pairs when there
    are any, otherwise over the batch's own prefixes. Samples whose
    log P(target) is already below the floor give no unlearn gradient.

    Returns:
        ({'unlearn', 'normal', 'kl', 'forget_normal'} -> per-row losses, gradients),
        'forget_normal' being -log P(successor) on the batch's own prefixes
    """
    prefixes = [s.prefix for s in batch]
    cache = encode(params, prefixes, hp)
    u_loss, u_dlogits = head_unlearn(cache, [s.target for s in batch])
    forget_normal, n_dlogits = head_cross_entropy(cache, [s.successor for s in batch])
    if floor_logp is not None:
        u_dlogits = u_dlogits * (u_loss >= floor_logp)[:, None]
    g_unlearn = backward(params, cache, u_dlogits / len(batch))

    n_loss = forget_normal
    if retain:
        prefixes = [x.prefix for x in retain]
        cache = encode(params, prefixes, hp)
        n_loss, n_dlogits = head_cross_entropy(cache, [x.successor for x in retain])
    kl_loss, kl_dlogits = head_kl(cache, encode(ref_params, prefixes, hp).log_probs)
    losses = {"unlearn": u_loss, "normal": n_loss, "kl": kl_loss, "forget_normal": forget_normal}
    if unlearn_only:
        return losses, [g_unlearn]

    size = len(prefixes)
    g_normal = backward(params, cache, n_dlogits / size)
    g_kl = backward(params, cache, kl_dlogits / size)
    return losses, [g_unlearn, g_normal, g_kl]


def pareto_weights(gradients: Sequence[np.ndarray], config: UnlearnRunConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Min-norm weights and the common direction for the task gradients.

    Tasks with an exactly zero gradient (the KL task at theta = theta_ref)
    are left out of the Gram problem and weighted 0; otherwise the min-norm
    point would be d = 0 and unlearning could never start.
    """
    if config.normalize_gradients:
        gradients = normalize_gradients(gradients)
    m = len(gradients)
    active = [i for i, g in enumerate(gradients) if np.linalg.norm(g) > ZERO_GRADIENT]
    alpha = np.zeros(m)
    if not active:
        alpha[:] = 1.0 / m
    elif len(active) == 1:
        alpha[active[0]] = 1.0
    else:
        sub = solve_min_norm(gram([gradients[i] for i in active]), tol=config.pareto_tol,
                             max_iter=config.pareto_max_iter)
        alpha[active] = sub
    return alpha, combine(gradients, alpha)


class _UnlearnRun:
    """State of one unlearning run (cau or a variant)."""

    def __init__(self, params: ParamVector, samples: Sequence[UnlearnSample], config: UnlearnRunConfig,
                 hp: HyperParams, retain_source: Optional[Corpus]):
        self.samples = list(samples)
        self.config = config
        self.hp = hp
        self.mode = Mode(config.mode)
        self.theta = params.copy()
        self.ref = params.copy()
        self.adam = AdamState.zeros(len(self.theta))
        self.batch_size = min(config.curriculum.resolved_batch_size(hp), len(self.samples))
        self.steps_per_epoch = math.ceil(len(self.samples) / self.batch_size)
        self.total_steps = config.total_steps or config.epochs * self.steps_per_epoch
        self.floor_logp = math.log(config.resolved_floor_prob(params.item_count)) if config.unlearn_floor else None

        self.retain_sampler = None
        if config.auxiliary_retain:
            if retain_source is None:
                raise ValueError("Auxiliary retain batches need the training corpus")
            self.retain_sampler = RetainSampler(retain_source, self.samples)
        self.retain_size = config.auxiliary_size if config.auxiliary_size is not None else self.batch_size

        self.artifacts = RunArtifacts(mode=self.mode, params=self.theta)

    def _scores(self) -> List[DifficultyScore]:
        return difficulty_scores(self.theta, self.ref, self.samples, self.config.curriculum.metric_kind, self.hp)

    def _epoch_batches(self, epoch: int, step: int) -> Iterator[List[int]]:
        curriculum = self.config.curriculum
        if self.mode is Mode.RANDOM_ORDER:
            order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.samples))
            for start in range(0, len(order), self.batch_size):
                yield [int(i) for i in order[start:start + self.batch_size]]
            return

        if curriculum.strategy is Strategy.HARD:
            scores = self._scores()
            self.artifacts.difficulty_rows.extend(dump_rows(scores, self.samples, epoch))
            yield from hard_schedule(scores, self.batch_size)
            return

        batches = soft_epoch_batches(
            self._scores, len(self.samples), self.batch_size, curriculum.temperature, curriculum.seed,
            step_offset=step, total_steps=self.total_steps, refresh_interval=curriculum.refresh_interval,
            with_replacement=curriculum.with_replacement,
        )
        for i, (_, progress, refs, scores) in enumerate(batches):
            if i == 0:
                self.artifacts.difficulty_rows.extend(dump_rows(scores, self.samples, epoch))
            logger.debug(f"Epoch {epoch}: soft draw at t={progress.t:.4f}")
            yield refs

    def _weights(self, gradients: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        if self.mode is Mode.GA_ONLY:
            return np.array([1.0, 0.0, 0.0]), gradients[0]
        if self.mode is Mode.EQUAL_WEIGHTS:
            alpha = np.full(3, 1.0 / 3.0)
            return alpha, combine(gradients, alpha)
        return pareto_weights(gradients, self.config)

    def run(self) -> RunArtifacts:
        start_time = time.time()
        guard = None
        if self.mode is not Mode.GA_ONLY and self.total_steps > 0:
            guard = DivergenceGuard(_initial_normal_loss(self.ref, self.samples, self.hp),
                                    self.config.divergence_factor, self.config.divergence_patience)

        step, epoch = 0, 0
        while step < self.total_steps:
            epoch += 1
            epoch_start = time.time()
            sums = dict.fromkeys(TASKS + ("forget_normal",), 0.0)
            counts = dict.fromkeys(sums, 0)
            for refs in self._epoch_batches(epoch, step):
                if step >= self.total_steps:
                    break
                batch = [self.samples[i] for i in refs]
                retain = self.retain_sampler.draw(self.retain_size, self.config.seed, step) if self.retain_sampler else []
                losses, gradients = _task_gradients(
                    self.theta, self.ref, batch, retain, self.hp, self.floor_logp,
                    unlearn_only=self.mode is Mode.GA_ONLY,
                )
                alpha, direction = self._weights(gradients)
                adam_step(self.theta, self.adam, direction, self.hp)
                self.artifacts.alpha_trace.append(
                    {"epoch": epoch, "step": step, "alpha1": alpha[0], "alpha2": alpha[1], "alpha3": alpha[2]}
                )
                for name, values in losses.items():
                    sums[name] += float(values.sum())
                    counts[name] += values.size
                step += 1

            means = {name: sums[name] / max(counts[name], 1) for name in sums}
            self.artifacts.loss_trace.append({"epoch": epoch, **{task: means[task] for task in TASKS}})
            logger.info(
                f"Epoch {epoch} ({self.mode.value}): unlearn {means['unlearn']:.4f}, normal {means['normal']:.4f}, "
                f"kl {means['kl']:.4f} ({(time.time() - epoch_start):.2f}s)"
            )
            if guard is not None:
                guard.update(epoch, means["forget_normal"])

        self.artifacts.epochs_run = epoch
        self.artifacts.steps_run = step
        self.artifacts.timings["unlearn_seconds"] = time.time() - start_time
        return self.artifacts


def _check_forget_set(samples: Sequence[UnlearnSample]) -> None:
    if not samples:
        raise ScheduleError("Unlearning needs a non-empty forget set")


def unlearn_cau(params: ParamVector, samples: Sequence[UnlearnSample], config: UnlearnRunConfig, hp: HyperParams,
                retain_source: Optional[Corpus] = None) -> RunArtifacts:
    """
    Curriculum-ordered, Pareto-weighted unlearning of D_f.

    Args:
        params: theta_rec (left untouched)
        samples: Forget set D_f, non-empty
        config: Run configuration; its mode is ignored
        hp: Hyperparameters
        retain_source: Training corpus, required only for auxiliary retain batches

    Returns:
        RunArtifacts holding theta_app and the traces

    Raises:
        ScheduleError: If D_f is empty
        DivergenceError: If the divergence guard trips
    """
    _check_forget_set(samples)
    config = config.model_copy(update={"mode": Mode.CAU})
    return _UnlearnRun(params, samples, config, hp, retain_source).run()


def unlearn_variant(params: ParamVector, samples: Sequence[UnlearnSample], config: UnlearnRunConfig,
                    hp: HyperParams, retain_source: Optional[Corpus] = None) -> RunArtifacts:
    """Ablation run: equal_weights, random_order or ga_only (the latter without divergence guard)."""
    if Mode(config.mode) not in VARIANT_MODES:
        raise ValueError(f"Variant mode must be one of {[m.value for m in VARIANT_MODES]}, got {config.mode}")
    _check_forget_set(samples)
    return _UnlearnRun(params, samples, config, hp, retain_source).run()


def retrain(hp: HyperParams, train_corpus: Corpus, samples: Sequence[UnlearnSample], valid_corpus: Corpus,
            epochs: int) -> ParamVector:
    """theta_exa: train from the seed's initial parameters on the corpus with D_f spliced out."""
    spliced = splice_unlearned(train_corpus, samples)
    logger.info(f"Retraining on {len(spliced)} sessions after splicing out {len(samples)} interactions")
    return train(init_params(hp, train_corpus.item_count), spliced, valid_corpus, hp, epochs)


def run_mode(mode, params: ParamVector, samples: Sequence[UnlearnSample], config: UnlearnRunConfig, hp: HyperParams,
             split_corpus: SplitCorpus) -> RunArtifacts:
    """
    Dispatch any mode and time it.

    Args:
        mode: A Mode value
        params: theta_rec
        samples: Forget set D_f
        config: Run configuration (its mode is replaced by `mode`)
        hp: Hyperparameters
        split_corpus: Train/valid/test corpora

    Returns:
        RunArtifacts with the resulting parameters
    """
    mode = Mode(mode)
    config = config.model_copy(update={"mode": mode})
    start_time = time.time()
    if mode is Mode.ORIGINAL:
        artifacts = RunArtifacts(mode=mode, params=params.copy())
    elif mode is Mode.RETRAIN:
        if config.retrain_epochs is None:
            raise ValueError("Retrain needs retrain_epochs")
        theta_exa = retrain(hp, split_corpus.train, samples, split_corpus.valid, config.retrain_epochs)
        artifacts = RunArtifacts(mode=mode, params=theta_exa, epochs_run=config.retrain_epochs)
    elif mode is Mode.CAU:
        artifacts = unlearn_cau(params, samples, config, hp, split_corpus.train)
    else:
        artifacts = unlearn_variant(params, samples, config, hp, split_corpus.train)
    artifacts.timings["seconds"] = time.time() - start_time
    logger.info(f"Completed {mode.value} run in {artifacts.timings['seconds']:.2f}s")
    return artifacts
