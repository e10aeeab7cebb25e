"""Label-free masked-token pretraining of the encoder.

The encoder is order-invariant, so the representation of every position in a
sequence is the sequence's pooled hidden state. A masked position is predicted
from that state through a |V|-way head that exists only during pretraining.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NonFiniteError, Tensor
from .textmodel import MASK, PAD, EncoderParams, TokenSeqs, pooled_hidden

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class MaskedBatch:
    inputs: TokenSeqs
    rows: np.ndarray  # sequence index of each target
    cols: np.ndarray  # position of each target
    targets: np.ndarray  # original token id of each target
    rate: float


def mask_tokens(batch: TokenSeqs, rate: float, rng_seed) -> MaskedBatch:
    """Replace each non-PAD position by MASK with probability ``rate``.

    If nothing gets selected, the first non-PAD position of the first sequence
    that has one is forced, so there is always at least one target.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"mask rate must be in (0, 1], got {rate}")
    live = batch.ids != PAD
    if not live.any():
        raise ValueError("batch has no non-PAD tokens to mask")
    rng = np.random.default_rng(rng_seed)
    chosen = (rng.random(batch.ids.shape) < rate) & live
    if not chosen.any():
        first_row = int(np.flatnonzero(live.any(axis=1))[0])
        chosen[first_row, int(np.flatnonzero(live[first_row])[0])] = True
    rows, cols = np.nonzero(chosen)
    ids = batch.ids.copy()
    ids[rows, cols] = MASK
    return MaskedBatch(TokenSeqs(ids, batch.lengths.copy()), rows, cols, batch.ids[rows, cols], rate)


@dataclass
class PretrainHead:
    weight: np.ndarray  # (h, |V|)
    bias: np.ndarray  # (|V|,)

    @classmethod
    def zeros(cls, hidden: int, vocab_size: int) -> PretrainHead:
        return cls(np.zeros((hidden, vocab_size)), np.zeros(vocab_size))


def mlm_loss(params, head, masked: MaskedBatch, graph: Graph) -> Tensor:
    """Mean cross-entropy of the original ids at masked positions.

    ``params`` and ``head`` are name->node mappings (or the plain dataclasses,
    which are bound as leaves).
    """
    if masked.targets.size == 0:
        raise ValueError("masked batch has no targets")
    if isinstance(head, PretrainHead):
        head = {"weight": graph.param(head.weight), "bias": graph.param(head.bias)}
    vocab_size = head["weight"].shape[1]
    if masked.targets.max() >= vocab_size:
        raise ValueError(f"target id {int(masked.targets.max())} >= vocabulary size {vocab_size}")
    hidden = pooled_hidden(params, masked.inputs, graph)
    at_targets = graph.gather(hidden, masked.rows)
    logits = graph.add(graph.matmul(at_targets, head["weight"]), head["bias"])
    return graph.softmax_xent(logits, masked.targets)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 0.05
    mask_rate: float = 0.15
    seed: int = 0


def pretrain_run(corpus: TokenSeqs, params: EncoderParams, config: PretrainConfig):
    """Plain gradient descent on :func:`mlm_loss`.

    Returns ``(params, trace)`` where ``trace`` is a list of ``(step, loss)``
    measured before each update. The pretraining head is discarded.
    """
    if config.steps < 0:
        raise ValueError("steps must be >= 0")
    if config.steps == 0:
        return params.copy(), []
    usable = np.flatnonzero(corpus.lengths > 0)
    if usable.size == 0:
        raise ValueError("corpus has no non-empty sequences")
    rng = np.random.default_rng(config.seed)
    arrays = {k: v.copy() for k, v in params.as_dict().items()}
    head = PretrainHead.zeros(params.w_hidden.shape[1], params.embedding.shape[0])
    arrays["head.weight"], arrays["head.bias"] = head.weight, head.bias

    trace = []
    for step in range(config.steps):
        pick = rng.choice(usable, size=min(config.batch_size, usable.size), replace=False)
        masked = mask_tokens(corpus[np.sort(pick)], config.mask_rate, rng.integers(2**63))
        graph = Graph()
        try:
            nodes = {k: graph.param(v) for k, v in arrays.items()}
            loss = mlm_loss(nodes, {"weight": nodes["head.weight"], "bias": nodes["head.bias"]}, masked, graph)
        except NonFiniteError as exc:
            raise DivergenceError(f"pretraining diverged at step {step}: {exc}", step) from exc
        value = float(loss.value)
        trace.append((step, value))
        grads = graph.backward(loss, list(nodes.values()))
        for name, node in nodes.items():
            with np.errstate(over="ignore", invalid="ignore"):  # checked just below
                arrays[name] = arrays[name] - config.lr * grads.array(node)
            if not np.isfinite(arrays[name]).all():
                raise DivergenceError(f"pretraining diverged at step {step}: {name} non-finite", step)
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.5f", step, value)

    return EncoderParams.from_dict({k: v for k, v in arrays.items() if not k.startswith("head.")}), trace
