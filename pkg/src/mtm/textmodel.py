"""Tokenizer, vocabulary and the bag-of-embeddings classifier.

The classifier is embedding lookup, mean pooling over non-PAD positions, one
tanh hidden layer and a shared output head of ``c_max`` columns of which the
first ``num_classes`` are used.
"""
from __future__ import annotations

import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor

PAD, UNK, MASK = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<mask>")

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> Vocab:
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                tok, sep, idx = line.rstrip("\n").partition("\t")
                if not sep or not idx.isdigit():
                    raise ValueError(f"{path}:{lineno}: expected 'token<TAB>id'")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        return cls([t for _, t in pairs])


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Tokens with count >= ``min_count``, most frequent first, ties lexicographic."""
    counts = Counter()
    n = 0
    for text in corpus:
        counts.update(tokenize(text))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


@dataclass(frozen=True)
class TokenSeqs:
    """Padded id matrix ``(batch, max_len)`` and original lengths."""

    ids: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, idx) -> TokenSeqs:
        if not isinstance(idx, slice):
            idx = np.atleast_1d(np.asarray(idx))
        return TokenSeqs(self.ids[idx], self.lengths[idx])


def encode(text: str, vocab: Vocab, max_len: int) -> tuple[list[int], int]:
    """Token ids truncated and PAD-padded to ``max_len``, plus the unpadded length."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id(t) for t in tokenize(text)][:max_len]
    n = len(ids)
    return ids + [PAD] * (max_len - n), n


def encode_batch(texts: Iterable[str], vocab: Vocab, max_len: int) -> TokenSeqs:
    rows, lengths = [], []
    for text in texts:
        ids, n = encode(text, vocab, max_len)
        rows.append(ids)
        lengths.append(n)
    return TokenSeqs(np.array(rows, dtype=np.int64).reshape(-1, max_len), np.array(lengths, dtype=np.int64))


PARAM_NAMES = ("embedding", "w_hidden", "b_hidden", "w_out", "b_out")


@dataclass
class EncoderParams:
    embedding: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        v, d = self.embedding.shape
        h = self.w_hidden.shape[1]
        c = self.w_out.shape[1]
        expected = {"w_hidden": (d, h), "b_hidden": (h,), "w_out": (h, c), "b_out": (c,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in PARAM_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def dims(self) -> dict:
        v, d = self.embedding.shape
        return {"vocab": v, "d": d, "h": self.w_hidden.shape[1], "c_max": self.w_out.shape[1]}

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, arrays: Mapping[str, np.ndarray]) -> EncoderParams:
        return cls(**{name: np.array(arrays[name], dtype=np.float64) for name in PARAM_NAMES})

    def copy(self) -> EncoderParams:
        return EncoderParams.from_dict(self.as_dict())

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        """Register every field as a differentiable leaf of ``graph``."""
        return {name: graph.param(arr) for name, arr in self.as_dict().items()}


def init_params(vocab_size: int, d: int, h: int, c_max: int, rng: np.random.Generator) -> EncoderParams:
    """Embeddings U(-0.1, 0.1); layers U(-1, 1)/sqrt(fan_in); biases zero."""
    return EncoderParams(
        embedding=rng.uniform(-0.1, 0.1, (vocab_size, d)),
        w_hidden=rng.uniform(-1.0, 1.0, (d, h)) / np.sqrt(d),
        b_hidden=np.zeros(h),
        w_out=rng.uniform(-1.0, 1.0, (h, c_max)) / np.sqrt(h),
        b_out=np.zeros(c_max),
    )


def _as_nodes(params, graph: Graph) -> Mapping[str, Tensor]:
    if isinstance(params, EncoderParams):
        return params.bind(graph)
    return params


def pooled_hidden(params, batch: TokenSeqs, graph: Graph) -> Tensor:
    """tanh hidden state ``(batch, h)`` of the mean of non-PAD embeddings."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if (batch.lengths <= 0).any():
        bad = int(np.flatnonzero(batch.lengths <= 0)[0])
        raise ValueError(f"sequence {bad} has length 0; nothing to pool")
    p = _as_nodes(params, graph)
    b, L = batch.ids.shape
    weights = (batch.ids != PAD) / (batch.ids != PAD).sum(axis=1, keepdims=True)
    emb = graph.gather(p["embedding"], batch.ids)
    pooled = graph.sum(graph.multiply(emb, weights.reshape(b, L, 1)), axis=1)
    return graph.tanh(graph.add(graph.matmul(pooled, p["w_hidden"]), p["b_hidden"]))


def classify_forward(params, batch: TokenSeqs, num_classes: int, graph: Graph) -> Tensor:
    """Logits ``(batch, num_classes)`` recorded on ``graph``.

    ``params`` is either :class:`EncoderParams` (bound as fresh leaves) or a
    mapping of parameter name to graph node, e.g. adapted parameters.
    """
    p = _as_nodes(params, graph)
    c_max = p["w_out"].shape[1]
    if not 1 <= num_classes <= c_max:
        raise ValueError(f"num_classes={num_classes} outside [1, {c_max}]")
    hidden = pooled_hidden(p, batch, graph)
    logits = graph.add(graph.matmul(hidden, p["w_out"]), p["b_out"])
    if num_classes < c_max:
        logits = graph.matmul(logits, np.eye(c_max)[:, :num_classes])
    return logits
