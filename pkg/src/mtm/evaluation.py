"""Fixed-support few-shot evaluation and the paired t-test."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .autodiff import Graph
from .metalearn import EncodedEpisode, adapt
from .textmodel import EncoderParams, classify_forward


def evaluate_task(params: EncoderParams, episode: EncodedEpisode, alpha: float, inner_steps: int) -> float:
    """Adapt on the support set (first order only), then score the query set."""
    if episode.split != "test":
        raise ValueError(f"episode of {episode.task_id} is not from a test task")
    if episode.query is None or len(episode.query) == 0:
        raise ValueError(f"episode of {episode.task_id} has an empty query set")
    adapted = adapt(params, episode.support, alpha, inner_steps) if alpha else params
    return accuracy(adapted, episode.query)


def accuracy(params: EncoderParams, data) -> float:
    logits = classify_forward(params, data.seqs, data.num_classes, Graph()).value
    # np.argmax resolves ties to the lowest index
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


@dataclass
class TaskResult:
    task_id: str
    domain: str
    accuracy: float
    n_query: int


@dataclass
class EvalReport:
    rows: list
    header: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows]))

    def to_text(self) -> str:
        lines = ["# mtm eval report v1"]
        lines += [f"# {k}\t{v}" for k, v in sorted(self.header.items())]
        lines.append("task_id\tdomain\taccuracy\tn_query")
        lines += [f"{r.task_id}\t{r.domain}\t{r.accuracy!r}\t{r.n_query}" for r in self.rows]
        lines.append(f"mean\t{self.mean!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EvalReport:
        header, rows = {}, []
        for line in text.splitlines():
            if line.startswith("# ") and "\t" in line:
                k, v = line[2:].split("\t", 1)
                header[k] = v
            elif line.startswith("#") or line.startswith("task_id\t") or line.startswith("mean\t"):
                continue
            elif line:
                tid, dom, acc, n = line.split("\t")
                rows.append(TaskResult(tid, dom, float(acc), int(n)))
        return cls(rows, header)


def evaluate_suite(params: EncoderParams, episodes: Sequence[tuple[str, EncodedEpisode]], alpha: float, inner_steps: int, header=None) -> EvalReport:
    """One evaluation per test task; ``episodes`` holds ``(domain, episode)`` pairs."""
    seen = set()
    rows = []
    for domain, ep in sorted(episodes, key=lambda pair: pair[1].task_id):
        if ep.task_id in seen:
            raise ValueError(f"task {ep.task_id} appears twice")
        seen.add(ep.task_id)
        try:
            acc = evaluate_task(params, ep, alpha, inner_steps)
        except Exception as exc:
            raise RuntimeError(f"evaluation of task {ep.task_id} failed: {exc}") from exc
        rows.append(TaskResult(ep.task_id, domain, acc, len(ep.query)))
    if not rows:
        raise ValueError("no test tasks to evaluate")
    return EvalReport(rows, dict(header or {}))


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


def t_density(x: float, df: int) -> float:
    """Student t probability density."""
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: int) -> float:
    """``2 * P(T > |t|)`` by adaptive quadrature of the density."""
    a = abs(t)
    tail, _ = integrate.quad(t_density, a, math.inf, args=(df,), epsabs=1e-13, epsrel=1e-12, limit=200)
    return min(1.0, max(0.0, 2.0 * tail))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of ``a`` against ``b``.

    Zero-variance differences: a zero mean gives ``t=0, p=1``; a nonzero mean
    gives ``p=0`` and ``degenerate=True``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length sequences of at least 2 scores")
    n = a.size
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, degenerate=True)
    t = mean * math.sqrt(n) / sd
    return TTestResult(float(t), t_two_sided_p(t, n - 1), n)
