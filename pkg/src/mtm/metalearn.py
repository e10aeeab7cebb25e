"""MAML over episodes: inner adaptation on support sets, meta-update through
the summed query losses of the adapted parameters."""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .autodiff import Graph, NonFiniteError, Tensor
from .pretrain import DivergenceError
from .tasks import Episode, TaskSpec, episode_stream, sample_episode
from .textmodel import UNK, EncoderParams, TokenSeqs, Vocab, classify_forward, encode

log = logging.getLogger(__name__)


class SplitViolation(ValueError):
    """A test-split episode reached meta-training."""


@dataclass(frozen=True)
class LabeledSet:
    seqs: TokenSeqs
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class EncodedEpisode:
    task_id: str
    split: str
    support: LabeledSet | None
    query: LabeledSet | None


class TextEncoder:
    """Caches text -> ids. Empty texts pool a single UNK so they stay usable."""

    def __init__(self, vocab: Vocab, max_len: int):
        self.vocab, self.max_len = vocab, max_len
        self._cache: dict[str, tuple[list[int], int]] = {}

    def _one(self, text):
        hit = self._cache.get(text)
        if hit is None:
            ids, n = encode(text, self.vocab, self.max_len)
            if n == 0:
                ids, n = [UNK] + ids[1:], 1
            hit = self._cache[text] = (ids, n)
        return hit

    def labeled(self, pairs, num_classes) -> LabeledSet:
        rows = [self._one(ex.text) for ex, _ in pairs]
        ids = np.array([r[0] for r in rows], dtype=np.int64).reshape(-1, self.max_len)
        lengths = np.array([r[1] for r in rows], dtype=np.int64)
        labels = np.array([c for _, c in pairs], dtype=np.int64)
        return LabeledSet(TokenSeqs(ids, lengths), labels, num_classes)

    def episode(self, ep: Episode) -> EncodedEpisode:
        c = ep.num_classes
        query = self.labeled(ep.query, c) if ep.query else None
        return EncodedEpisode(ep.task_id, ep.split, self.labeled(ep.support, c), query)


def encode_episode(ep: Episode, vocab: Vocab, max_len: int) -> EncodedEpisode:
    return TextEncoder(vocab, max_len).episode(ep)


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.1
    beta: float = 0.01
    inner_steps: int = 1
    task_batch_size: int = 4
    meta_iterations: int = 100
    first_order: bool = False
    k_shot: int = 5
    q_query: int = 5
    seed: int = 0
    early_stop: bool = False

    def validate(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.inner_steps < 1 or self.task_batch_size < 1:
            raise ValueError("inner_steps and task_batch_size must be >= 1")
        if self.meta_iterations < 0:
            raise ValueError("meta_iterations must be >= 0")
        if self.k_shot < 1 or self.q_query < 1:
            raise ValueError("k_shot and q_query must be >= 1")


@dataclass
class MetaState:
    params: EncoderParams | dict  # a plain name->array dict for custom loss functions
    iteration: int = 0
    trace: list = field(default_factory=list)  # (iteration, meta_loss)
    stopped_early: bool = False


def task_loss(params, data: LabeledSet, graph: Graph) -> Tensor:
    """Mean softmax cross-entropy of the classifier on ``data``."""
    if len(data) == 0:
        raise ValueError("task loss needs at least one example")
    if data.labels.min() < 0 or data.labels.max() >= data.num_classes:
        raise ValueError(f"label outside the episode's class range [0, {data.num_classes})")
    logits = classify_forward(params, data.seqs, data.num_classes, graph)
    return graph.softmax_xent(logits, data.labels)


LossFn = Callable[[Mapping[str, Tensor], object, Graph], Tensor]


def inner_adapt(
    params: Mapping[str, Tensor],
    support,
    alpha: float,
    inner_steps: int,
    graph: Graph,
    track_for_meta: bool = False,
    loss_fn: LossFn = task_loss,
) -> dict[str, Tensor]:
    """``inner_steps`` gradient steps of size ``alpha`` on the support loss.

    With ``track_for_meta`` the steps stay differentiable with respect to
    ``params``; otherwise the adapted values are fresh leaves.
    """
    if support is not None and len(support) == 0:
        raise ValueError("empty support set")
    cur = dict(params)
    for step in range(inner_steps):
        try:
            loss = loss_fn(cur, support, graph)
            grads = graph.backward(loss, list(cur.values()), retain_higher_order=track_for_meta)
            if track_for_meta:
                cur = {n: graph.subtract(t, graph.scale(grads[t], alpha)) for n, t in cur.items()}
            else:
                cur = {n: graph.param(t.value - alpha * grads.array(t)) for n, t in cur.items()}
        except NonFiniteError as exc:
            raise DivergenceError(f"inner adaptation diverged at step {step}: {exc}", step) from exc
    return cur


def adapt(params: EncoderParams, support: LabeledSet, alpha: float, inner_steps: int) -> EncoderParams:
    """Array-level adaptation without higher-order tracking."""
    graph = Graph()
    adapted = inner_adapt(params.bind(graph), support, alpha, inner_steps, graph)
    return EncoderParams.from_dict({n: t.value for n, t in adapted.items()})


def meta_gradient(arrays: Mapping[str, np.ndarray], episode: EncodedEpisode, hp: HyperParams, loss_fn: LossFn = task_loss):
    """``(query_loss, grads)`` for one episode.

    Second-order differentiates through the inner steps; first-order takes the
    query gradient at the adapted parameters.
    """
    graph = Graph()
    theta = {n: graph.param(a) for n, a in arrays.items()}
    adapted = inner_adapt(theta, episode.support, hp.alpha, hp.inner_steps, graph, not hp.first_order, loss_fn)
    qloss = loss_fn(adapted, episode.query, graph)
    wrt = adapted if hp.first_order else theta
    grads = graph.backward(qloss, list(wrt.values()))
    return float(qloss.value), {n: grads.array(t) for n, t in wrt.items()}


def meta_step(state: MetaState, episodes: Sequence[EncodedEpisode], hp: HyperParams, loss_fn: LossFn = task_loss) -> MetaState:
    """One update ``theta <- theta - beta * grad(sum of query losses)``."""
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    for ep in episodes:
        if ep.split != "train":
            raise SplitViolation(f"episode from {ep.split} task {ep.task_id} cannot enter meta-training")
    structured = isinstance(state.params, EncoderParams)
    arrays = state.params.as_dict() if structured else dict(state.params)
    total = {n: np.zeros_like(a) for n, a in arrays.items()}
    meta_loss = 0.0
    for ep in sorted(episodes, key=lambda e: e.task_id):
        try:
            loss, grads = meta_gradient(arrays, ep, hp, loss_fn)
        except (NonFiniteError, DivergenceError) as exc:
            raise DivergenceError(f"meta-step diverged at iteration {state.iteration} (task {ep.task_id}): {exc}", state.iteration) from exc
        meta_loss += loss
        for n in total:
            total[n] += grads[n]
    with np.errstate(over="ignore", invalid="ignore"):
        new = {n: arrays[n] - hp.beta * total[n] for n in arrays}
    for n, a in new.items():
        if not np.isfinite(a).all():
            raise DivergenceError(f"meta-step produced non-finite {n} at iteration {state.iteration}", state.iteration)
    trace = state.trace + [(state.iteration, meta_loss)]
    params = EncoderParams.from_dict(new) if structured else new
    return MetaState(params, state.iteration + 1, trace, state.stopped_early)


def _plateaued(trace, window=100, tol=1e-4) -> bool:
    if len(trace) < 2 * window:
        return False
    losses = np.array([l for _, l in trace[-2 * window :]])
    return losses[:window].mean() - losses[window:].mean() <= tol


def meta_train(
    theta0: EncoderParams,
    tasks: Sequence[TaskSpec],
    hp: HyperParams,
    vocab: Vocab,
    max_len: int,
    callback: Callable[[MetaState], None] | None = None,
) -> MetaState:
    """Run ``hp.meta_iterations`` meta-steps over uniformly sampled task batches.

    Task batch ``i`` comes from the stream ``(seed, "task-batch", i)`` and the
    episode of task ``t`` at iteration ``i`` from ``(seed, "episode", t, i)``.
    """
    hp.validate()
    if not tasks:
        raise ValueError("meta_train needs at least one task")
    for t in tasks:
        if t.split != "train":
            raise SplitViolation(f"test task {t.task_id} passed to meta_train")
    encoder = TextEncoder(vocab, max_len)
    state = MetaState(theta0.copy())
    for it in range(hp.meta_iterations):
        rng = seeding.stream(hp.seed, "task-batch", it)
        chosen = sorted(rng.choice(len(tasks), size=min(hp.task_batch_size, len(tasks)), replace=False))
        episodes = [
            encoder.episode(sample_episode(tasks[i], hp.k_shot, hp.q_query, episode_stream(hp.seed, tasks[i].task_id, it)))
            for i in chosen
        ]
        state = meta_step(state, episodes, hp)
        if callback is not None:
            callback(state)
        if it % 50 == 0:
            log.debug("meta iteration %d loss %.5f", it, state.trace[-1][1])
        if hp.early_stop and _plateaued(state.trace):
            state = replace(state, stopped_early=True)
            break
    return state
