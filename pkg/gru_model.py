"""
GRU Session Recommender

A single-layer GRU over item embeddings with tied output weights: the
final hidden state is scored against every item embedding (logits = h E^T).
All gradients are exact and hand-derived (backpropagation through time in
numpy), so they can be checked against finite differences.

Parameters live in one flat float64 vector with a fixed ordering:
    E rows (|V|+1) x d, W_z, W_r, W_h (d x d), U_z, U_r, U_h (d x d), b_z, b_r, b_h (d)
Row 0 of E is the padding embedding; it stays zero and never receives a
gradient.

Gate equations (row-vector convention, x is the item embedding):
    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * c
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from cau_utils import PADDING_ITEM

logger = logging.getLogger(__name__)

GATE_BLOCKS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
LOSS_SELECTORS = ("unlearn", "normal", "kl", "rec")


class HyperParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(64, ge=1)
    max_prefix_len: int = Field(20, ge=1)
    learn_rate: float = Field(1e-3, gt=0)
    train_batch: int = Field(256, ge=1)
    unlearn_batch: int = Field(128, ge=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    init_scale: Optional[float] = Field(None, gt=0)
    seed: int = 0

    def resolved_init_scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 1.0 / np.sqrt(self.embed_dim)


def param_layout(item_count: int, embed_dim: int) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """Offset and shape of every parameter block inside the flat vector."""
    d = embed_dim
    shapes = [("E", (item_count + 1, d))]
    shapes += [(name, (d, d)) for name in GATE_BLOCKS[:6]]
    shapes += [(name, (d,)) for name in GATE_BLOCKS[6:]]
    layout = {}
    offset = 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout


def flat_length(item_count: int, embed_dim: int) -> int:
    """
    Number of parameters of a model over item_count items.

    Args:
        item_count: Number of real items |V|
        embed_dim: Embedding and hidden size d

    Returns:
        (|V|+1) d + 6 d^2 + 3 d
    """
    d = embed_dim
    return (item_count + 1) * d + 6 * d * d + 3 * d


class ParamVector:
    """Flat parameter vector with structured, zero-copy views of each block."""

    def __init__(self, flat: np.ndarray, item_count: int, embed_dim: int):
        expected = flat_length(item_count, embed_dim)
        if flat.shape != (expected,):
            raise ValueError(f"Flat parameter vector must have length {expected}, got {flat.shape}")
        self.flat = np.ascontiguousarray(flat, dtype=np.float64)
        self.item_count = item_count
        self.embed_dim = embed_dim
        self.layout = param_layout(item_count, embed_dim)

    def block(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.flat[offset:offset + int(np.prod(shape))].reshape(shape)

    @property
    def E(self) -> np.ndarray:
        return self.block("E")

    def padding_slice(self) -> slice:
        return slice(0, self.embed_dim)

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.item_count, self.embed_dim)

    def __len__(self) -> int:
        return self.flat.size


@dataclass
class SessionState:
    h: np.ndarray


@dataclass
class ScoreVector:
    logits: np.ndarray
    log_probs: np.ndarray


@dataclass
class _Step:
    ids: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    rh: np.ndarray
    c: np.ndarray
    mask: np.ndarray


@dataclass
class EncodeCache:
    """Everything a backward pass needs from one batched forward pass."""

    steps: List[_Step]
    h: np.ndarray
    logits: np.ndarray
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, shifted by the row maximum."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def init_params(hp: HyperParams, item_count: int) -> ParamVector:
    """
    Draw every parameter uniformly from (-init_scale, +init_scale).

    Args:
        hp: Hyperparameters (embed_dim, init_scale, seed)
        item_count: Number of real items |V|

    Returns:
        ParamVector with the padding embedding row zeroed
    """
    if item_count < 1:
        raise ValueError(f"item_count must be >= 1, got {item_count}")
    scale = hp.resolved_init_scale()
    rng = np.random.default_rng(hp.seed)
    flat = rng.uniform(-scale, scale, size=flat_length(item_count, hp.embed_dim))
    params = ParamVector(flat, item_count, hp.embed_dim)
    params.E[PADDING_ITEM] = 0.0
    return params


def _window(prefix: Sequence[int], max_len: int) -> Tuple[int, ...]:
    return tuple(prefix[-max_len:]) if len(prefix) > 0 else ()


def encode(params: ParamVector, prefixes: Sequence[Sequence[int]], hp: HyperParams) -> EncodeCache:
    """
    Batched forward pass over a list of prefixes.

    Prefixes are truncated to their last max_prefix_len items and left-padded
    with item 0; padded steps leave the hidden state untouched, so an empty
    prefix yields h = 0 and uniform scores.

    Args:
        params: Model parameters
        prefixes: Item-id sequences, items in 1..|V|
        hp: Hyperparameters (max_prefix_len)

    Returns:
        EncodeCache with final states (B, d) and logits / log-probs (B, |V|)

    Raises:
        ValueError: If a prefix holds an item outside 1..|V|
    """
    windows = [_window(p, hp.max_prefix_len) for p in prefixes]
    batch = len(windows)
    d = params.embed_dim
    length = max((len(w) for w in windows), default=0)
    ids = np.zeros((batch, length), dtype=np.int64)
    for b, w in enumerate(windows):
        if w:
            ids[b, length - len(w):] = w
    if ids.size and (ids.max() > params.item_count or ids.min() < 0):
        raise ValueError(f"Prefix items must lie in 1..{params.item_count}")

    E = params.E
    W_z, W_r, W_h = params.block("W_z"), params.block("W_r"), params.block("W_h")
    U_z, U_r, U_h = params.block("U_z"), params.block("U_r"), params.block("U_h")
    b_z, b_r, b_h = params.block("b_z"), params.block("b_r"), params.block("b_h")

    h = np.zeros((batch, d))
    steps = []
    for t in range(length):
        step_ids = ids[:, t]
        x = E[step_ids]
        mask = (step_ids != PADDING_ITEM).astype(np.float64)[:, None]
        z = _sigmoid(x @ W_z + h @ U_z + b_z)
        r = _sigmoid(x @ W_r + h @ U_r + b_r)
        rh = r * h
        c = np.tanh(x @ W_h + rh @ U_h + b_h)
        h_next = (1.0 - z) * h + z * c
        steps.append(_Step(step_ids, x, h, z, r, rh, c, mask))
        h = mask * h_next + (1.0 - mask) * h

    logits = h @ E[1:].T
    return EncodeCache(steps=steps, h=h, logits=logits, log_probs=log_softmax(logits))


def forward(params: ParamVector, prefix: Sequence[int], hp: HyperParams) -> Tuple[SessionState, ScoreVector]:
    """
    Session state and scores over items 1..|V| for a single prefix.

    Args:
        params: Model parameters
        prefix: Item ids, possibly empty
        hp: Hyperparameters

    Returns:
        (SessionState, ScoreVector); index j of the scores is item j + 1
    """
    cache = encode(params, [prefix], hp)
    return SessionState(h=cache.h[0]), ScoreVector(logits=cache.logits[0], log_probs=cache.log_probs[0])


class _GradSink:
    """Accumulates parameter gradients either summed over the batch or per sample."""

    def __init__(self, params: ParamVector, batch: int, per_sample: bool):
        self.per_sample = per_sample
        self.batch = batch
        size = len(params)
        self.flat = np.zeros((batch, size)) if per_sample else np.zeros(size)
        self.layout = params.layout

    def block(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        n = int(np.prod(shape))
        if self.per_sample:
            return self.flat[:, offset:offset + n].reshape((self.batch,) + shape)
        return self.flat[offset:offset + n].reshape(shape)

    def add_outer(self, name: str, left: np.ndarray, right: np.ndarray) -> None:
        if self.per_sample:
            self.block(name)[...] += np.einsum("bi,bj->bij", left, right)
        else:
            self.block(name)[...] += left.T @ right

    def add_bias(self, name: str, delta: np.ndarray) -> None:
        if self.per_sample:
            self.block(name)[...] += delta
        else:
            self.block(name)[...] += delta.sum(axis=0)

    def add_embedding(self, ids: np.ndarray, delta: np.ndarray) -> None:
        gE = self.block("E")
        if self.per_sample:
            gE[np.arange(self.batch), ids] += delta
        else:
            np.add.at(gE, ids, delta)


def backward(params: ParamVector, cache: EncodeCache, dlogits: np.ndarray, per_sample: bool = False) -> np.ndarray:
    """
    Backpropagate d(loss)/d(logits) through the tied output layer and the GRU.

    Args:
        params: Parameters used for the forward pass
        cache: Output of encode on the same parameters
        dlogits: (B, |V|) gradient of the total loss w.r.t. the logits
        per_sample: Return one gradient row per batch element instead of the sum

    Returns:
        Flat gradient (P,) or per-sample gradients (B, P); padding row zero
    """
    batch = dlogits.shape[0]
    sink = _GradSink(params, batch, per_sample)
    E = params.E

    if per_sample:
        sink.block("E")[:, 1:] += dlogits[:, :, None] * cache.h[:, None, :]
    else:
        sink.block("E")[1:] += dlogits.T @ cache.h
    dh = dlogits @ E[1:]

    W_z, W_r, W_h = params.block("W_z"), params.block("W_r"), params.block("W_h")
    U_z, U_r, U_h = params.block("U_z"), params.block("U_r"), params.block("U_h")

    for step in reversed(cache.steps):
        dg = step.mask * dh
        dh_prev = (1.0 - step.mask) * dh + dg * (1.0 - step.z)
        dz = dg * (step.c - step.h_prev)
        da_h = dg * step.z * (1.0 - step.c ** 2)

        sink.add_outer("W_h", step.x, da_h)
        sink.add_outer("U_h", step.rh, da_h)
        sink.add_bias("b_h", da_h)
        drh = da_h @ U_h.T
        dh_prev += drh * step.r
        da_r = drh * step.h_prev * step.r * (1.0 - step.r)
        da_z = dz * step.z * (1.0 - step.z)

        sink.add_outer("W_z", step.x, da_z)
        sink.add_outer("U_z", step.h_prev, da_z)
        sink.add_bias("b_z", da_z)
        sink.add_outer("W_r", step.x, da_r)
        sink.add_outer("U_r", step.h_prev, da_r)
        sink.add_bias("b_r", da_r)

        dh_prev += da_z @ U_z.T + da_r @ U_r.T
        dx = da_h @ W_h.T + da_z @ W_z.T + da_r @ W_r.T
        sink.add_embedding(step.ids, dx)
        dh = dh_prev

    if per_sample:
        sink.block("E")[:, PADDING_ITEM] = 0.0
    else:
        sink.block("E")[PADDING_ITEM] = 0.0
    return sink.flat


def _one_hot(targets: Sequence[int], item_count: int) -> np.ndarray:
    onehot = np.zeros((len(targets), item_count))
    onehot[np.arange(len(targets)), np.asarray(targets, dtype=np.int64) - 1] = 1.0
    return onehot


def head_cross_entropy(cache: EncodeCache, targets: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-row -log P(target) and its gradient w.r.t. the logits.

    Args:
        cache: Forward pass over the batch prefixes
        targets: One item id per row

    Returns:
        (losses (B,), dlogits (B, |V|)) with dlogits = P - onehot(target)
    """
    idx = np.asarray(targets, dtype=np.int64) - 1
    rows = np.arange(len(idx))
    losses = -cache.log_probs[rows, idx]
    dlogits = cache.probs - _one_hot(targets, cache.logits.shape[1])
    return losses, dlogits


def head_unlearn(cache: EncodeCache, targets: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-row +log P(target): gradient ascent on the target's likelihood.

    Args:
        cache: Forward pass over the unlearning prefixes
        targets: The items to forget, one per row

    Returns:
        (losses (B,), dlogits (B, |V|)), the negated cross-entropy pair
    """
    losses, dlogits = head_cross_entropy(cache, targets)
    return -losses, -dlogits


def head_kl(cache: EncodeCache, ref_log_probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-row KL(P_ref || P_theta) with the reference treated as constant.

    Args:
        cache: Forward pass of the current parameters
        ref_log_probs: (B, |V|) log-probabilities of the reference model on the same prefixes

    Returns:
        (losses (B,), dlogits (B, |V|)) with dlogits = P_theta - P_ref
    """
    ref_probs = np.exp(ref_log_probs)
    losses = (ref_probs * (ref_log_probs - cache.log_probs)).sum(axis=1)
    dlogits = cache.probs - ref_probs
    return losses, dlogits


def _successor(item) -> int:
    return item.successor


def _rec_pairs(sessions) -> Tuple[List[Tuple[int, ...]], List[int], np.ndarray]:
    """Expand sessions into (prefix, next item) pairs weighted 1 / (n - 1) each."""
    prefixes, targets, weights = [], [], []
    for session in sessions:
        items = session.items
        n = len(items)
        if n < 2:
            raise ValueError(f"Session {session.id} needs at least 2 items for the recommendation loss")
        for t in range(1, n):
            prefixes.append(items[:t])
            targets.append(items[t])
            weights.append(1.0 / (n - 1))
    return prefixes, targets, np.asarray(weights)


def _selector_dlogits(params, selector, batch, hp, ref_params) -> Tuple[EncodeCache, np.ndarray, np.ndarray]:
    """Forward the batch and return (cache, per-row losses, per-row dlogits) for one loss."""
    if selector not in LOSS_SELECTORS:
        raise ValueError(f"Unknown loss selector {selector!r}; expected one of {LOSS_SELECTORS}")
    if selector == "rec":
        prefixes, targets, weights = _rec_pairs(batch)
        cache = encode(params, prefixes, hp)
        losses, dlogits = head_cross_entropy(cache, targets)
        return cache, losses * weights, dlogits * weights[:, None]

    prefixes = [x.prefix for x in batch]
    cache = encode(params, prefixes, hp)
    if selector == "unlearn":
        losses, dlogits = head_unlearn(cache, [x.target for x in batch])
    elif selector == "normal":
        losses, dlogits = head_cross_entropy(cache, [_successor(x) for x in batch])
    else:
        if ref_params is None:
            raise ValueError("The kl loss needs ref_params (a frozen copy of the trained model)")
        ref_log_probs = encode(ref_params, prefixes, hp).log_probs
        losses, dlogits = head_kl(cache, ref_log_probs)
    return cache, losses, dlogits


def grad(params: ParamVector, loss_selector: str, batch: Sequence, hp: HyperParams,
         ref_params: Optional[ParamVector] = None) -> np.ndarray:
    """
    Exact gradient of the batch-mean loss.

    Args:
        params: Current parameters
        loss_selector: 'unlearn', 'normal', 'kl' (samples) or 'rec' (sessions)
        batch: Non-empty list of unlearn samples / retain pairs, or sessions for 'rec'
        hp: Hyperparameters
        ref_params: Frozen reference parameters, required for 'kl'

    Returns:
        Flat gradient aligned with params.flat
    """
    return value_and_grad(params, loss_selector, batch, hp, ref_params)[1]


def value_and_grad(params: ParamVector, loss_selector: str, batch: Sequence, hp: HyperParams,
                   ref_params: Optional[ParamVector] = None) -> Tuple[float, np.ndarray]:
    """
    Batch-mean loss and its gradient from one forward pass.

    Args:
        params: Current parameters
        loss_selector: 'unlearn', 'normal', 'kl' or 'rec'
        batch: Non-empty samples, retain pairs or sessions
        hp: Hyperparameters
        ref_params: Frozen reference parameters, required for 'kl'

    Returns:
        (mean loss, flat gradient)

    Raises:
        ValueError: If the batch is empty or the selector unknown
    """
    if not batch:
        raise ValueError("Cannot take a gradient over an empty batch")
    cache, losses, dlogits = _selector_dlogits(params, loss_selector, batch, hp, ref_params)
    return float(losses.sum() / len(batch)), backward(params, cache, dlogits / len(batch))


def per_sample_grads(params: ParamVector, loss_selector: str, batch: Sequence, hp: HyperParams,
                     ref_params: Optional[ParamVector] = None) -> np.ndarray:
    """
    Gradient of each sample's own loss.

    Args:
        params: Current parameters
        loss_selector: 'unlearn', 'normal' or 'kl'
        batch: Unlearning samples or retain pairs
        hp: Hyperparameters
        ref_params: Frozen reference parameters, required for 'kl'

    Returns:
        (B, P) array, row b the gradient of sample b alone

    Raises:
        ValueError: For the 'rec' selector
    """
    if loss_selector == "rec":
        raise ValueError("Per-sample gradients are defined for unlearn, normal and kl only")
    cache, _, dlogits = _selector_dlogits(params, loss_selector, batch, hp, ref_params)
    return backward(params, cache, dlogits, per_sample=True)


def loss_rec(params: ParamVector, session, hp: HyperParams) -> float:
    """
    Mean next-item cross-entropy over positions 1..n-1 of one session.

    Args:
        params: Model parameters
        session: A session of at least 2 items
        hp: Hyperparameters

    Returns:
        The session's recommendation loss
    """
    _, losses, _ = _selector_dlogits(params, "rec", [session], hp, None)
    return float(losses.sum())


def loss_unlearn(params: ParamVector, sample, hp: HyperParams) -> float:
    """
    log P(target | prefix) of one unlearning sample; maximised away by unlearning.

    Args:
        params: Model parameters
        sample: UnlearnSample
        hp: Hyperparameters

    Returns:
        A value <= 0, higher meaning the target is still well remembered
    """
    _, losses, _ = _selector_dlogits(params, "unlearn", [sample], hp, None)
    return float(losses[0])


def loss_normal(params: ParamVector, sample, hp: HyperParams) -> float:
    """
    -log P(successor | prefix): the sample's prefix must still predict the item after the target.

    Args:
        params: Model parameters
        sample: UnlearnSample or RetainPair
        hp: Hyperparameters

    Returns:
        Cross-entropy of the successor, >= 0
    """
    _, losses, _ = _selector_dlogits(params, "normal", [sample], hp, None)
    return float(losses[0])


def loss_kl(params: ParamVector, ref_params: ParamVector, sample, hp: HyperParams) -> float:
    """
    KL(P_ref || P_theta) on the sample's prefix.

    Args:
        params: Current parameters
        ref_params: Frozen reference parameters
        sample: UnlearnSample or RetainPair
        hp: Hyperparameters

    Returns:
        Divergence >= 0, zero when params equals ref_params
    """
    _, losses, _ = _selector_dlogits(params, "kl", [sample], hp, ref_params)
    return float(losses[0])


def batch_loss(params: ParamVector, loss_selector: str, batch: Sequence, hp: HyperParams,
               ref_params: Optional[ParamVector] = None) -> float:
    """
    Batch-mean value of one loss (the quantity `grad` differentiates).

    Args:
        params: Current parameters
        loss_selector: 'unlearn', 'normal', 'kl' or 'rec'
        batch: Samples, retain pairs or sessions
        hp: Hyperparameters
        ref_params: Frozen reference parameters, required for 'kl'

    Returns:
        Mean loss over the batch
    """
    _, losses, _ = _selector_dlogits(params, loss_selector, batch, hp, ref_params)
    return float(losses.sum() / len(batch))


def batch_losses(params: ParamVector, batch: Sequence, hp: HyperParams, ref_params: ParamVector) -> Dict[str, np.ndarray]:
    """
    Per-sample unlearn, normal and KL values of unlearning samples from one forward pass.

    Args:
        params: Current parameters
        batch: Unlearning samples
        hp: Hyperparameters
        ref_params: Frozen reference parameters

    Returns:
        {'unlearn', 'normal', 'kl'} -> (B,) arrays
    """
    prefixes = [x.prefix for x in batch]
    cache = encode(params, prefixes, hp)
    unlearn, _ = head_unlearn(cache, [x.target for x in batch])
    normal, _ = head_cross_entropy(cache, [x.successor for x in batch])
    kl, _ = head_kl(cache, encode(ref_params, prefixes, hp).log_probs)
    return {"unlearn": unlearn, "normal": normal, "kl": kl}


def adam_step(params: ParamVector, adam: AdamState, g: np.ndarray, hp: HyperParams) -> Tuple[ParamVector, AdamState]:
    """
    One bias-corrected Adam update, applied in place.

    The padding embedding row is never moved.

    Args:
        params: Parameters to update
        adam: Optimizer moments, advanced by one step
        g: Descent direction, same length as params
        hp: Hyperparameters (learn_rate, Adam constants)

    Returns:
        (params, adam), the same objects after the update

    Raises:
        ValueError: On mismatched vector lengths
    """
    if g.shape != params.flat.shape or adam.m.shape != g.shape:
        raise ValueError("Gradient, parameter and moment vectors must share one length")
    g = g.copy()
    g[params.padding_slice()] = 0.0

    adam.step += 1
    b1, b2 = hp.adam_beta1, hp.adam_beta2
    adam.m *= b1
    adam.m += (1.0 - b1) * g
    adam.v *= b2
    adam.v += (1.0 - b2) * g * g
    m_hat = adam.m / (1.0 - b1 ** adam.step)
    v_hat = adam.v / (1.0 - b2 ** adam.step)
    update = hp.learn_rate * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
    update[params.padding_slice()] = 0.0
    params.flat -= update
    return params, adam
