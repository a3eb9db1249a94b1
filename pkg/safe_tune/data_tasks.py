"""
Synthetic classification tasks and JSONL dataset files.

Token 0 is padding and never appears inside a sequence. Every generated dataset
is split 80/10/10 into train/valid/probe by a seeded permutation; the probe split
only feeds importance scoring.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from safe_tune.exceptions import DatasetError
from safe_tune.models import ExampleRecord
from safe_tune.transformer import Batch

logger = logging.getLogger(__name__)

TASK_KINDS = ("parity", "majority", "copy_first_token")
SPLITS = ("train", "valid", "probe")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MARKER = 1
SECOND_MARKER = 2


@dataclass(frozen=True)
class Example:
    tokens: Tuple[int, ...]
    label: int
    split: str = "train"


@dataclass
class Dataset:
    examples: List[Example]
    n_classes: int
    vocab_size: int

    def split(self, name: str) -> List[Example]:
        return [e for e in self.examples if e.split == name]

    @property
    def train(self) -> List[Example]:
        return self.split("train")

    @property
    def valid(self) -> List[Example]:
        return self.split("valid")

    @property
    def probe(self) -> List[Example]:
        return self.split("probe")

    @property
    def max_len(self) -> int:
        return max(len(e.tokens) for e in self.examples)

    def label_counts(self) -> List[int]:
        counts = [0] * self.n_classes
        for e in self.examples:
            counts[e.label] += 1
        return counts


def assign_splits(n: int, seed: int) -> List[str]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_valid = int(round(SPLIT_FRACTIONS[1] * n))
    tags = ["probe"] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_valid:
            tags[idx] = "valid"
    return tags


def _parity(rng: np.random.Generator, seq_len: int, vocab: int, rate: float) -> Tuple[List[int], int]:
    is_marker = rng.random(seq_len) < rate
    filler = rng.integers(2, vocab, size=seq_len)
    tokens = np.where(is_marker, MARKER, filler)
    return tokens.tolist(), int(is_marker.sum() % 2)


def _majority(rng: np.random.Generator, seq_len: int, vocab: int, rate: float) -> Tuple[List[int], int]:
    draw = rng.random(seq_len)
    filler = rng.integers(3, vocab, size=seq_len) if vocab > 3 else np.full(seq_len, SECOND_MARKER)
    tokens = np.where(draw < rate, MARKER, np.where(draw < 2 * rate, SECOND_MARKER, filler))
    ones, twos = int((tokens == MARKER).sum()), int((tokens == SECOND_MARKER).sum())
    if ones == twos:
        # Break the tie by turning one position into a randomly chosen marker.
        winner = MARKER if rng.random() < 0.5 else SECOND_MARKER
        spots = np.flatnonzero(tokens != winner)
        tokens[spots[rng.integers(len(spots))]] = winner
        ones, twos = int((tokens == MARKER).sum()), int((tokens == SECOND_MARKER).sum())
    return tokens.tolist(), 0 if ones > twos else 1


def _copy_first(rng: np.random.Generator, seq_len: int, vocab: int, n_classes: int) -> Tuple[List[int], int]:
    tokens = rng.integers(1, vocab, size=seq_len)
    return tokens.tolist(), int((int(tokens[0]) - 1) * n_classes // (vocab - 1))


def gen_task(kind: str, n: int, seq_len: int, vocab: int, seed: int, marker_rate: float = 0.1,
             n_classes: int = 2) -> Dataset:
    """
    Generates a labeled synthetic task.

    Args:
        kind: parity (label = number of marker tokens mod 2), majority (label = the more
            frequent of two markers) or copy_first_token (label = bucket of the first token)
        n: number of examples, at least 10
        seq_len: tokens per example
        vocab: vocabulary size including the padding id
        seed: generator seed; equal seeds give identical datasets
        marker_rate: per-position probability of a marker token
        n_classes: bucket count for copy_first_token

    Returns:
        Dataset with train/valid/probe split tags
    """
    if kind not in TASK_KINDS:
        raise DatasetError(f"unknown task kind '{kind}', expected one of {', '.join(TASK_KINDS)}")
    if n < 10:
        raise DatasetError(f"a task needs at least 10 examples, got {n}")
    if seq_len < 1:
        raise DatasetError("seq_len must be positive")
    if vocab < 3:
        raise DatasetError("vocabulary needs padding, a marker and at least one filler token")
    if kind == "copy_first_token" and not 2 <= n_classes <= vocab - 1:
        raise DatasetError(f"copy_first_token needs 2 <= n_classes <= {vocab - 1}")

    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        if kind == "parity":
            rows.append(_parity(rng, seq_len, vocab, marker_rate))
        elif kind == "majority":
            rows.append(_majority(rng, seq_len, vocab, marker_rate))
        else:
            rows.append(_copy_first(rng, seq_len, vocab, n_classes))

    classes = 2 if kind in ("parity", "majority") else n_classes
    tags = assign_splits(n, seed)
    examples = [Example(tuple(tokens), label, tag) for (tokens, label), tag in zip(rows, tags)]
    dataset = Dataset(examples=examples, n_classes=classes, vocab_size=vocab)
    logger.info(f"Generated {kind} task: {n} examples, label counts {dataset.label_counts()}")
    return dataset


def save_jsonl(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in dataset.examples:
            fh.write(ExampleRecord(tokens=list(e.tokens), label=e.label, split=e.split).model_dump_json())
            fh.write("\n")
    return path


def load_jsonl(path: Union[str, Path], vocab_size: int, n_classes: int, seed: int = 0,
               max_len: Optional[int] = None) -> Dataset:
    """
    Reads one {"tokens": [...], "label": k[, "split": ...]} object per line.

    Lines without a split tag are split 80/10/10 by ``seed``; a file must tag every
    line or none. Errors carry the 1-based line number.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}")

    records: List[Tuple[int, ExampleRecord]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = ExampleRecord.model_validate_json(line)
        except ValidationError as e:
            raise DatasetError(f"malformed example: {e.errors()[0]['msg']}", line=lineno)
        if record.label >= n_classes:
            raise DatasetError(f"label {record.label} out of range for {n_classes} classes", line=lineno)
        bad = [t for t in record.tokens if t <= 0 or t >= vocab_size]
        if bad:
            raise DatasetError(f"token id {bad[0]} outside [1, {vocab_size})", line=lineno)
        if max_len is not None and len(record.tokens) > max_len:
            raise DatasetError(f"sequence of length {len(record.tokens)} exceeds {max_len}", line=lineno)
        records.append((lineno, record))

    if not records:
        raise DatasetError(f"{path}: empty dataset")
    tagged = [r.split is not None for _, r in records]
    if any(tagged) and not all(tagged):
        first = next(lineno for (lineno, _), t in zip(records, tagged) if not t)
        raise DatasetError("split tag missing (other lines carry one)", line=first)
    tags = [r.split for _, r in records] if all(tagged) else assign_splits(len(records), seed)
    examples = [Example(tuple(r.tokens), r.label, tag) for (_, r), tag in zip(records, tags)]
    logger.info(f"Loaded {len(examples)} examples from {path}")
    return Dataset(examples=examples, n_classes=n_classes, vocab_size=vocab_size)


def make_batches(examples: Sequence[Example], batch_size: int, seq_len: int,
                 shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
    """Right-padded batches in order, or in a seeded shuffle; the last batch may be short."""
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield Batch.from_sequences([e.tokens for e in chunk], [e.label for e in chunk], seq_len)


def probe_batches(examples: Sequence[Example], probe_rows: int, batch_size: int, seq_len: int) -> List[Batch]:
    """Leading probe examples until they hold at least ``probe_rows`` token rows."""
    chosen: List[Example] = []
    rows = 0
    for e in examples:
        if rows >= probe_rows:
            break
        chosen.append(e)
        rows += len(e.tokens)
    if rows < 2:
        raise DatasetError("probe split holds fewer than 2 token rows")
    return list(make_batches(chosen, batch_size, seq_len))
