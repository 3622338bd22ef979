"""
Session Corpus Preparation

Turns raw interaction logs into the chronological session corpus used by
every other stage:
1. Reads "user<TAB>item<TAB>timestamp" rows (one session per user) or
   session-lines files (one session of space-separated items per line)
2. Applies k-core filtering on items and sessions, iterated to a fixpoint
3. Splits sessions 8:1:1 into train / validation / test
4. Selects the unlearning request set (session, position) pairs

Item ids are re-indexed densely from 1; id 0 is reserved for padding and
never stored inside a session. A Corpus is immutable once built.
"""

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from cau_utils import (
    CorpusExhaustedError,
    CorpusParseError,
    CorpusSizeError,
    EmptyCorpusError,
    UnlearnSelectionError,
    hash_lines,
)

logger = logging.getLogger(__name__)

MIN_SPLIT_SESSIONS = 10
MAX_UNLEARN_RATIO = 0.5


class InteractionFormat(str, Enum):
    USER_ITEM_TIME = "user-item-time"
    SESSION_LINES = "session-lines"


@dataclass(frozen=True)
class Session:
    id: int
    items: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Corpus:
    """
    Ordered sessions over the item set 1..item_count.

    `source` names where the corpus came from; `digest` is the md5 of its
    canonical text form and is filled in automatically.
    """

    sessions: Tuple[Session, ...]
    item_count: int
    source: str = ""
    digest: str = field(default="", compare=False)

    def __post_init__(self):
        seen = set()
        for session in self.sessions:
            if session.id in seen:
                raise ValueError(f"Duplicate session id {session.id} in corpus {self.source!r}")
            seen.add(session.id)
            for item in session.items:
                if not 1 <= item <= self.item_count:
                    raise ValueError(
                        f"Session {session.id} holds item {item} outside 1..{self.item_count}"
                    )
        object.__setattr__(self, "digest", hash_lines(corpus_lines(self)))

    def __len__(self) -> int:
        return len(self.sessions)

    @cached_property
    def by_id(self) -> Dict[int, Session]:
        return {s.id: s for s in self.sessions}

    @property
    def session_ids(self) -> List[int]:
        return [s.id for s in self.sessions]

    def interaction_count(self) -> int:
        return sum(len(s) for s in self.sessions)


@dataclass(frozen=True)
class SplitCorpus:
    train: Corpus
    valid: Corpus
    test: Corpus
    seed: int

    def __post_init__(self):
        train_ids, valid_ids, test_ids = (set(c.session_ids) for c in (self.train, self.valid, self.test))
        if train_ids & valid_ids or train_ids & test_ids or valid_ids & test_ids:
            raise ValueError("Train, validation and test splits share session ids")


@dataclass(frozen=True)
class UnlearnSample:
    """One interaction to forget: item `target` at 1-based `position_t` of a session."""

    session_id: int
    position_t: int
    prefix: Tuple[int, ...]
    target: int
    successor: int

    @classmethod
    def from_session(cls, session: Session, position_t: int) -> "UnlearnSample":
        if not 2 <= position_t <= len(session) - 1:
            raise UnlearnSelectionError(
                f"Position {position_t} of session {session.id} (length {len(session)}) "
                "needs a non-empty prefix and a successor"
            )
        return cls(
            session_id=session.id,
            position_t=position_t,
            prefix=session.items[:position_t - 1],
            target=session.items[position_t - 1],
            successor=session.items[position_t],
        )


def corpus_lines(corpus: Corpus) -> List[str]:
    """Canonical text lines of a corpus: a header then one line per session."""
    lines = [f"items={corpus.item_count} sessions={len(corpus.sessions)}"]
    lines.extend(f"{s.id}\t{' '.join(str(i) for i in s.items)}" for s in corpus.sessions)
    return lines


def corpus_digest(corpus: Corpus) -> str:
    """md5 of the canonical corpus lines; equal corpora share a digest whatever their source."""
    return hash_lines(corpus_lines(corpus))


def _reindex(sessions: Sequence[Tuple[int, Sequence]], order: Iterable, source: str) -> Corpus:
    """Map raw item keys onto 1..|V| following `order` and build a Corpus."""
    mapping = {}
    for key in order:
        if key not in mapping:
            mapping[key] = len(mapping) + 1
    rebuilt = tuple(Session(sid, tuple(mapping[i] for i in items)) for sid, items in sessions)
    return Corpus(sessions=rebuilt, item_count=len(mapping), source=source)


def _parse_int(token: str, path: str, line_number: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise CorpusParseError(path, line_number, f"non-integer {what} {token!r}") from None


def _load_user_item_time(path: Path) -> List[Tuple[int, List[int]]]:
    events = defaultdict(list)
    user_order = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f, delimiter="\t")
        for line_number, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise CorpusParseError(str(path), line_number, f"expected 3 tab-separated fields, got {len(row)}")
            user, item_token, time_token = (cell.strip() for cell in row)
            item = _parse_int(item_token, str(path), line_number, "item")
            try:
                timestamp = float(time_token)
            except ValueError:
                raise CorpusParseError(str(path), line_number, f"unsortable timestamp {time_token!r}") from None
            if user not in events:
                user_order.append(user)
            # file order breaks timestamp ties
            events[user].append((timestamp, line_number, item))

    sessions = []
    for session_id, user in enumerate(user_order, start=1):
        ordered = sorted(events[user])
        sessions.append((session_id, [item for _, _, item in ordered]))
    return sessions


def _load_session_lines(path: Path) -> List[Tuple[int, List[int]]]:
    sessions = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            items = [_parse_int(token, str(path), line_number, "item") for token in tokens]
            sessions.append((len(sessions) + 1, items))
    return sessions


def load_interactions(path, format: str = InteractionFormat.SESSION_LINES) -> Corpus:
    """
    Load a raw interaction file into a Corpus.

    Args:
        path: Path to the TSV file
        format: 'user-item-time' (one session per user, sorted by timestamp)
                or 'session-lines' (one session per line)

    Returns:
        Corpus with items re-indexed densely from 1 in order of first appearance

    Raises:
        CorpusParseError: If a row cannot be parsed (the message names the line)
        EmptyCorpusError: If the file holds no interactions
    """
    path = Path(path)
    fmt = InteractionFormat(format)
    if fmt is InteractionFormat.USER_ITEM_TIME:
        sessions = _load_user_item_time(path)
    else:
        sessions = _load_session_lines(path)

    if not sessions:
        raise EmptyCorpusError(f"No interactions found in {path}")

    corpus = _reindex(sessions, (i for _, items in sessions for i in items), source=path.name)
    logger.info(f"Loaded {len(corpus)} sessions over {corpus.item_count} items from {path}")
    return corpus


def preprocess(raw: Corpus, min_count: int = 5) -> Corpus:
    """
    Filter items and sessions with fewer than min_count interactions.

    Filtering repeats until nothing changes, then sessions shorter than 2
    are dropped and items are re-indexed densely (ascending by old id).

    Raises:
        EmptyCorpusError: If the input corpus is empty
        CorpusExhaustedError: If filtering removes every session
    """
    if not raw.sessions:
        raise EmptyCorpusError("Cannot preprocess an empty corpus")

    sessions = [(s.id, list(s.items)) for s in raw.sessions]
    rounds = 0
    while True:
        rounds += 1
        counts = Counter(item for _, items in sessions for item in items)
        changed = False
        kept = []
        for session_id, items in sessions:
            filtered = [item for item in items if counts[item] >= min_count]
            if len(filtered) != len(items):
                changed = True
            if len(filtered) < min_count:
                changed = True
                continue
            kept.append((session_id, filtered))
        sessions = kept
        if not changed:
            break

    sessions = [(sid, items) for sid, items in sessions if len(items) >= 2]
    if not sessions:
        raise CorpusExhaustedError(
            f"Filtering with min_count={min_count} removed every session of {raw.source!r}"
        )

    corpus = _reindex(sessions, sorted({i for _, items in sessions for i in items}), source=raw.source)
    logger.info(
        f"Preprocessed {len(raw)} -> {len(corpus)} sessions, "
        f"{raw.item_count} -> {corpus.item_count} items in {rounds} rounds"
    )
    return corpus


def _subset(corpus: Corpus, indexes: Iterable[int], tag: str) -> Corpus:
    picked = tuple(corpus.sessions[i] for i in sorted(indexes))
    return Corpus(sessions=picked, item_count=corpus.item_count, source=f"{corpus.source}:{tag}")


def split(corpus: Corpus, seed: int) -> SplitCorpus:
    """
    Shuffle sessions with a seeded generator and cut them 8:1:1.

    Validation and test each get floor(n / 10) sessions; the remainder goes
    to train. Sessions keep their corpus order inside each split.

    Raises:
        CorpusSizeError: If the corpus has fewer than 10 sessions
    """
    n = len(corpus)
    if n < MIN_SPLIT_SESSIONS:
        raise CorpusSizeError(f"Need at least {MIN_SPLIT_SESSIONS} sessions to split, got {n}")

    order = np.random.default_rng(seed).permutation(n)
    n_held_out = n // 10
    test_idx = order[:n_held_out]
    valid_idx = order[n_held_out:2 * n_held_out]
    train_idx = order[2 * n_held_out:]

    result = SplitCorpus(
        train=_subset(corpus, train_idx, "train"),
        valid=_subset(corpus, valid_idx, "valid"),
        test=_subset(corpus, test_idx, "test"),
        seed=seed,
    )
    logger.info(f"Split {n} sessions into {len(result.train)}/{len(result.valid)}/{len(result.test)}")
    return result


def eligible_positions(corpus: Corpus) -> List[Tuple[int, int]]:
    """All (session_id, position_t) with a non-empty prefix and a successor."""
    return [(s.id, t) for s in corpus.sessions for t in range(2, len(s))]


def select_unlearn(train: Corpus, ratio: float, seed: int, max_per_session: int = 1) -> List[UnlearnSample]:
    """
    Sample the unlearning set D_f uniformly over eligible positions.

    Selects ceil(ratio * eligible) positions, at most max_per_session per
    session. The result is sorted by (session_id, position_t).

    Raises:
        UnlearnSelectionError: If ratio is outside (0, 0.5], no position is
            eligible, or the per-session cap makes the quota unreachable
    """
    if not 0 < ratio <= MAX_UNLEARN_RATIO:
        raise UnlearnSelectionError(f"Unlearn ratio must be in (0, {MAX_UNLEARN_RATIO}], got {ratio}")
    if max_per_session < 1:
        raise UnlearnSelectionError(f"max_per_session must be >= 1, got {max_per_session}")

    eligible = eligible_positions(train)
    if not eligible:
        raise UnlearnSelectionError("No session has an eligible unlearning position")

    quota = math.ceil(ratio * len(eligible) - 1e-9)
    rng = np.random.default_rng(seed)
    per_session = Counter()
    chosen = []
    for index in rng.permutation(len(eligible)):
        session_id, position = eligible[index]
        if per_session[session_id] >= max_per_session:
            continue
        per_session[session_id] += 1
        chosen.append((session_id, position))
        if len(chosen) == quota:
            break

    if len(chosen) < quota:
        raise UnlearnSelectionError(
            f"Only {len(chosen)} of {quota} unlearning positions fit with max_per_session={max_per_session}"
        )

    sessions = train.by_id
    samples = [UnlearnSample.from_session(sessions[sid], t) for sid, t in sorted(chosen)]
    logger.info(f"Selected {len(samples)} unlearning samples from {len(eligible)} eligible positions")
    return samples


def splice_unlearned(train: Corpus, samples: Sequence[UnlearnSample]) -> Corpus:
    """
    Remove every unlearned interaction from its session (train - D_f).

    Sessions that shrink below length 2 are dropped; the item set is kept.
    """
    removals = defaultdict(set)
    for sample in samples:
        removals[sample.session_id].add(sample.position_t - 1)

    spliced = []
    for session in train.sessions:
        drop = removals.get(session.id)
        if not drop:
            spliced.append(session)
            continue
        items = tuple(item for i, item in enumerate(session.items) if i not in drop)
        if len(items) >= 2:
            spliced.append(Session(session.id, items))
    return Corpus(sessions=tuple(spliced), item_count=train.item_count, source=f"{train.source}-spliced")


def write_corpus(corpus: Corpus, path) -> None:
    """Persist a corpus in its canonical line-oriented form."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in corpus_lines(corpus):
            f.write(line + "\n")


def read_corpus(path) -> Corpus:
    """
    Read a corpus written by write_corpus.

    Raises:
        CorpusParseError: If the header or a session line is malformed
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise EmptyCorpusError(f"Corpus file {path} is empty")

    header = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
    if set(header) != {"items", "sessions"}:
        raise CorpusParseError(str(path), 1, "expected header 'items=<n> sessions=<n>'")
    item_count = _parse_int(header["items"], str(path), 1, "item count")
    expected = _parse_int(header["sessions"], str(path), 1, "session count")

    sessions = []
    for line_number, line in enumerate(lines[1:], start=2):
        if "\t" not in line:
            raise CorpusParseError(str(path), line_number, "expected 'session_id<TAB>items'")
        id_token, items_token = line.split("\t", 1)
        session_id = _parse_int(id_token, str(path), line_number, "session id")
        items = tuple(_parse_int(tok, str(path), line_number, "item") for tok in items_token.split())
        sessions.append(Session(session_id, items))

    if len(sessions) != expected:
        raise CorpusParseError(str(path), 1, f"header announces {expected} sessions, found {len(sessions)}")
    return Corpus(sessions=tuple(sessions), item_count=item_count, source=path.stem)


def write_unlearn_set(samples: Sequence[UnlearnSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sample in samples:
            f.write(f"{sample.session_id}\t{sample.position_t}\n")


def read_unlearn_set(path, corpus: Corpus) -> List[UnlearnSample]:
    """Read "session_id<TAB>position_t" rows and rebuild samples from the corpus."""
    path = Path(path)
    sessions = corpus.by_id
    samples = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise CorpusParseError(str(path), line_number, "expected 'session_id<TAB>position_t'")
            session_id = _parse_int(fields[0], str(path), line_number, "session id")
            position = _parse_int(fields[1], str(path), line_number, "position")
            if session_id not in sessions:
                raise CorpusParseError(str(path), line_number, f"unknown session id {session_id}")
            samples.append(UnlearnSample.from_session(sessions[session_id], position))
    return samples
