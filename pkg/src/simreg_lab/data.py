"""Corpora, tokenization, batching and token-frequency analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPECIALS = ("<unk>", "<eos>")


class Tokenizer:
    """Byte-level or whitespace-word tokenizer.

    Byte mode maps each byte to its value and appends two special ids
    (``<unk>`` = 256, ``<eos>`` = 257).  Word mode numbers the vocabulary
    file's lines from 0 and appends the same specials after them; words not
    in the vocabulary map to ``<unk>``.
    """

    def __init__(self, mode: str = "byte", vocab: Sequence[str] | None = None):
        if mode not in ("byte", "word"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        if mode == "word" and not vocab:
            raise ValueError("word mode requires a vocabulary")
        self.mode = mode
        self.words = list(vocab) if mode == "word" else []
        self._index = {w: i for i, w in enumerate(self.words)}
        base = 256 if mode == "byte" else len(self.words)
        self.unk_id = base
        self.eos_id = base + 1
        self.vocab_size = base + len(SPECIALS)

    @classmethod
    def from_vocab_file(cls, path) -> "Tokenizer":
        words = [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls("word", [w for w in words if w])

    def encode(self, text) -> np.ndarray:
        if self.mode == "byte":
            data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
            return np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        if isinstance(text, (bytes, bytearray)):
            text = text.decode("utf-8", errors="replace")
        return np.array([self._index.get(w, self.unk_id) for w in text.split()], dtype=np.int64)

    def decode(self, ids) -> bytes | str:
        ids = [int(i) for i in ids]
        if self.mode == "byte":
            return bytes(i for i in ids if i < 256)
        names = self.words + list(SPECIALS)
        return " ".join(names[i] for i in ids)


def tokenize(text, mode: str = "byte", vocab: Sequence[str] | None = None) -> np.ndarray:
    return Tokenizer(mode, vocab).encode(text)


def detokenize(ids, mode: str = "byte", vocab: Sequence[str] | None = None):
    return Tokenizer(mode, vocab).decode(ids)


def read_corpus(path, mode: str = "byte", vocab_path=None) -> tuple[np.ndarray, Tokenizer]:
    """Tokenize a raw-bytes file as one document."""
    tok = Tokenizer.from_vocab_file(vocab_path) if mode == "word" else Tokenizer(mode)
    if mode == "word" and vocab_path is None:
        raise ValueError("word mode requires a vocabulary file")
    return tok.encode(Path(path).read_bytes()), tok


def zipf_probabilities(vocab: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    logw = -exponent * np.log(ranks)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def zipf_corpus(vocab: int, exponent: float, length: int, seed: int) -> np.ndarray:
    """I.i.d. ids where id ``r - 1`` has probability proportional to ``r^-s``."""
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    if not exponent > 0:
        raise ValueError("exponent must be positive")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(zipf_probabilities(vocab, exponent))
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(length), side="right").astype(np.int64)


def split_corpus(ids: np.ndarray, holdout: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation split; the last ``holdout`` share is validation."""
    cut = len(ids) - int(round(len(ids) * holdout))
    return ids[:cut], ids[cut:]


@dataclass
class TokenBatch:
    """Inputs ``[batch, seq_len]`` and next-token labels of the same shape."""

    sequences: np.ndarray
    labels: np.ndarray
    window_ids: np.ndarray


def num_windows(length: int, seq_len: int) -> int:
    return length // (seq_len + 1)


def windows(ids: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping windows of ``seq_len + 1`` ids, shape ``[W, seq_len + 1]``."""
    w = num_windows(len(ids), seq_len)
    return np.asarray(ids[: w * (seq_len + 1)]).reshape(w, seq_len + 1)


def batch_iterator(ids, batch: int, seq_len: int, seed: int, shuffle: bool = True,
                   epochs: int | None = None) -> Iterator[TokenBatch]:
    """Yield batches of disjoint windows, reshuffled each epoch.

    The window order of epoch ``e`` depends only on ``seed`` and ``e``.  A
    trailing partial batch is dropped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < batch * (seq_len + 1):
        raise ValueError(f"corpus of {len(ids)} ids is too short for batch {batch} x {seq_len + 1}")
    win = windows(ids, seq_len)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.arange(len(win))
        if shuffle:
            np.random.default_rng([seed, epoch]).shuffle(order)
        for start in range(0, len(order) - batch + 1, batch):
            sel = order[start:start + batch]
            chunk = win[sel]
            yield TokenBatch(chunk[:, :-1].copy(), chunk[:, 1:].copy(), sel)
        epoch += 1


@dataclass
class FrequencyReport:
    token_ids: np.ndarray
    counts: np.ndarray
    coverage: np.ndarray
    head_fraction: float
    head_types: int
    head_share: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "token_id", "count", "cumulative_share"])
            for r, (tid, cnt, cov) in enumerate(zip(self.token_ids, self.counts, self.coverage), start=1):
                writer.writerow([r, int(tid), int(cnt), repr(float(cov))])


def token_frequency_report(ids, head_fraction: float = 0.02) -> FrequencyReport:
    """Rank types by count; head share is the coverage of the top ``ceil(p * types)``."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("empty corpus")
    types, counts = np.unique(ids, return_counts=True)
    order = np.lexsort((types, -counts))
    types, counts = types[order], counts[order]
    coverage = np.cumsum(counts) / counts.sum()
    coverage[-1] = 1.0
    k = min(len(types), max(1, math.ceil(head_fraction * len(types))))
    return FrequencyReport(types, counts, coverage, head_fraction, k, float(coverage[k - 1]))
