"""Few-shot task data: ARSC-style directory layout, a synthetic generator that
writes the same layout, and episodic C-way K-shot sampling.

Layout: one file per ``{domain}.{threshold}.{split}`` with split in
``train``, ``dev``, ``test`` or ``support``; each line is ``label<TAB>text``
with label ``-1`` or ``1`` (mapped to classes 0 and 1). Test-domain tasks
carry a fixed ``support`` file and are scored on their ``test`` file.
"""
from __future__ import annotations

import json
import os
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding

LABELS = (-1, 1)
SPLITS = ("train", "dev", "test", "support")
CORPUS_FILE = "corpus.txt"
LEXICON_FILE = "lexicon.json"

_TASK_FILE = re.compile(r"^(?P<domain>.+)\.(?P<threshold>[^.]+)\.(?P<split>train|dev|test|support)$")


class DataFormatError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    uid: str
    text: str
    label: int


@dataclass
class TaskSpec:
    task_id: str
    domain: str
    labels: tuple
    examples: dict  # label -> tuple[Example, ...]; train pool, or test split for test tasks
    split: str = "train"
    support: dict | None = None  # fixed support (test tasks only)

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError(f"task {self.task_id}: needs at least 2 labels")
        for pool in (self.examples, self.support or {}):
            for label, exs in pool.items():
                if label not in self.labels:
                    raise ValueError(f"task {self.task_id}: label {label} not in {self.labels}")
                if any(ex.label != label for ex in exs):
                    raise ValueError(f"task {self.task_id}: example filed under the wrong label")

    def count(self, label) -> int:
        return len(self.examples.get(label, ()))


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    test: tuple

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test task sets overlap: {sorted(overlap)}")


@dataclass
class Episode:
    task_id: str
    split: str
    support: list  # [(Example, class index)]
    query: list
    class_map: dict  # raw label -> class index

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    @staticmethod
    def _unzip(pairs):
        return [ex.text for ex, _ in pairs], np.array([c for _, c in pairs], dtype=np.int64)

    def support_xy(self):
        return self._unzip(self.support)

    def query_xy(self):
        return self._unzip(self.query)


# --------------------------------------------------------------------------
# loading


def _read_task_file(path: Path, task_id: str, split: str) -> list[Example]:
    data = path.read_bytes().decode("utf-8")
    lines = data.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for lineno, line in enumerate(lines, 1):
        label, sep, text = line.partition("\t")
        if not sep or label not in ("-1", "1"):
            raise DataFormatError(f"{path}:{lineno}: expected '<-1|1><TAB>text', got {line[:40]!r}")
        if text.endswith("\r"):
            raise DataFormatError(f"{path}:{lineno}: CRLF line ending; files must use LF")
        out.append(Example(f"{task_id}:{split}:{lineno}", text, int(label)))
    return out


def _by_label(examples) -> dict:
    return {label: tuple(ex for ex in examples if ex.label == label) for label in LABELS}


def load_arsc_layout(root, test_domains: Sequence[str]):
    """Read every task under ``root``; returns ``(tasks, split)``.

    Tasks of ``test_domains`` become test tasks and must have ``support`` and
    ``test`` files. All others are train tasks built from their ``train`` file.
    """
    root = Path(root)
    files: dict[tuple[str, str], dict[str, Path]] = {}
    for entry in sorted(os.listdir(root)):
        m = _TASK_FILE.match(entry)
        if m:
            files.setdefault((m["domain"], m["threshold"]), {})[m["split"]] = root / entry
    test_domains = set(test_domains)
    missing = test_domains - {d for d, _ in files}
    if missing:
        raise DataFormatError(f"test domains without any task files: {sorted(missing)}")

    tasks = []
    for (domain, threshold), by_split in sorted(files.items()):
        task_id = f"{domain}.{threshold}"
        if domain in test_domains:
            for needed in ("support", "test"):
                if needed not in by_split:
                    raise DataFormatError(f"test task {task_id} has no '{needed}' file")
            support = _read_task_file(by_split["support"], task_id, "support")
            test = _read_task_file(by_split["test"], task_id, "test")
            tasks.append(TaskSpec(task_id, domain, LABELS, _by_label(test), "test", _by_label(support)))
        else:
            if "train" not in by_split:
                raise DataFormatError(f"train task {task_id} has no 'train' file")
            train = _read_task_file(by_split["train"], task_id, "train")
            tasks.append(TaskSpec(task_id, domain, LABELS, _by_label(train), "train"))
    split = SplitSpec(
        train=tuple(t.task_id for t in tasks if t.split == "train"),
        test=tuple(t.task_id for t in tasks if t.split == "test"),
    )
    return tasks, split


def read_corpus(root, tasks=None) -> list[str]:
    """Raw texts for pretraining.

    Uses ``corpus.txt`` when present, otherwise the texts (never the labels)
    of the train tasks.
    """
    path = Path(root) / CORPUS_FILE
    if path.exists():
        return [line for line in path.read_bytes().decode("utf-8").split("\n") if line]
    if tasks is None:
        raise DataFormatError(f"{path} not found and no tasks given")
    return [ex.text for t in tasks if t.split == "train" for lab in t.labels for ex in t.examples[lab]]


# --------------------------------------------------------------------------
# episodes


def sample_episode(task: TaskSpec, k: int, q: int, rng_seed, shuffle_classes: bool = False) -> Episode:
    """K support and Q query examples per class, drawn without replacement."""
    if k < 1 or q < 0:
        raise EpisodeError(f"need k >= 1 and q >= 0, got k={k}, q={q}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for label in task.labels:
        have = task.count(label)
        if have < k + q:
            raise EpisodeError(f"task {task.task_id} label {label}: need {k + q} examples, have {have}")
    order = list(task.labels)
    if shuffle_classes:
        order = [order[i] for i in rng.permutation(len(order))]
    class_map = {label: c for c, label in enumerate(order)}
    support, query = [], []
    for label in task.labels:
        pool = task.examples[label]
        perm = rng.permutation(len(pool))
        support += [(pool[i], class_map[label]) for i in perm[:k]]
        query += [(pool[i], class_map[label]) for i in perm[k : k + q]]
    return Episode(task.task_id, task.split, support, query, class_map)


def episode_stream(seed: int, task_id: str, index: int) -> np.random.Generator:
    return seeding.stream(seed, "episode", task_id, index)


def fixed_test_episode(task: TaskSpec, k: int) -> Episode:
    """The test episode of a test task: its fixed support, queried on its whole test split."""
    if task.split != "test" or task.support is None:
        raise EpisodeError(f"task {task.task_id} is not a test task with a fixed support")
    class_map = {label: c for c, label in enumerate(task.labels)}
    for label in task.labels:
        n = len(task.support.get(label, ()))
        if n != k:
            raise EpisodeError(f"task {task.task_id} label {label}: support has {n} examples, expected {k}")
    support = [(ex, class_map[lab]) for lab in task.labels for ex in task.support[lab]]
    query = [(ex, class_map[lab]) for lab in task.labels for ex in task.examples.get(lab, ())]
    overlap = {ex.text for ex, _ in support} & {ex.text for ex, _ in query}
    if overlap:
        raise EpisodeError(f"task {task.task_id}: {len(overlap)} support example(s) also in the query set")
    return Episode(task.task_id, task.split, support, query, class_map)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    num_domains: int = 10
    test_domains: int = 2
    tasks_per_domain: int = 3
    examples_per_label: int = 50
    support_per_label: int = 5
    vocab_size: int = 200
    lexicon_size: int = 40
    topic_words: int = 5
    focus_words: int = 6
    focus_rate: float = 0.8  # chance a sentiment word comes from the task's focus subset
    noise_rate: float = 0.05
    corpus_size: int = 3000
    seed: int = 0

    def filler_count(self) -> int:
        return self.vocab_size - 3 - self.lexicon_size - self.num_domains * self.topic_words

    def validate(self):
        if self.lexicon_size < 2 or self.lexicon_size % 2:
            raise ValueError("lexicon_size must be a positive even number (positive + negative words)")
        if self.num_domains < self.test_domains + 1:
            raise ValueError("num_domains must exceed the number of test domains")
        if not 0 <= self.noise_rate <= 1:
            raise ValueError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if self.tasks_per_domain < 1 or self.topic_words < 1:
            raise ValueError("tasks_per_domain and topic_words must be >= 1")
        if not 1 <= self.focus_words <= self.lexicon_size // 2:
            raise ValueError("focus_words must be in [1, lexicon_size / 2]")
        if self.filler_count() < 1:
            raise ValueError("vocab_size too small for lexicon, topic and filler words")
        if self.test_domains and self.examples_per_label < 2 * self.support_per_label:
            raise ValueError("examples_per_label too small to carve out test supports")
        if not 0 <= self.focus_rate <= 1:
            raise ValueError("focus_rate must be in [0, 1]")
        if self.corpus_size < 0:
            raise ValueError("corpus_size must be >= 0")


@dataclass
class SyntheticData:
    corpus: list
    tasks: list
    split: SplitSpec
    lexicon: dict = field(default_factory=dict)  # {"positive": [...], "negative": [...]}


def domain_names(n: int) -> list[str]:
    return [f"dom{i:02d}" for i in range(n)]


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Sentiment-style tasks over a lexicon shared by every domain.

    An example is two domain topic words, a few sentiment words whose majority
    polarity is the label, and filler. Each task emphasises its own subset of
    the lexicon. Labels are flipped with probability ``noise_rate``.
    """
    config.validate()
    rng = seeding.stream(config.seed, "synthetic")
    words = [f"w{i:03d}" for i in range(config.vocab_size - 3)]
    words = [words[i] for i in rng.permutation(len(words))]
    half = config.lexicon_size // 2
    positive, negative = words[:half], words[half : 2 * half]
    cursor = 2 * half
    topics = []
    for _ in range(config.num_domains):
        topics.append(words[cursor : cursor + config.topic_words])
        cursor += config.topic_words
    filler = words[cursor:]
    domains = domain_names(config.num_domains)
    test_domains = set(domains[config.num_domains - config.test_domains :])

    def sentence(domain_idx, polarity, focus):
        major = int(rng.integers(2, 4))
        minor = int(rng.integers(0, 2))
        pos_focus, neg_focus = focus

        def draw(lst, foc, n):
            return [foc[rng.integers(len(foc))] if rng.random() < config.focus_rate else lst[rng.integers(len(lst))] for _ in range(n)]

        if polarity > 0:
            sent = draw(positive, pos_focus, major) + draw(negative, neg_focus, minor)
        else:
            sent = draw(negative, neg_focus, major) + draw(positive, pos_focus, minor)
        topic = [topics[domain_idx][rng.integers(config.topic_words)] for _ in range(2)]
        fill = [filler[rng.integers(len(filler))] for _ in range(int(rng.integers(3, 8)))]
        tokens = topic + sent + fill
        tokens = [tokens[i] for i in rng.permutation(len(tokens))]
        tokens[0] = tokens[0].capitalize()
        return " ".join(tokens) + "."

    def task_focus():
        return (
            [positive[i] for i in rng.choice(half, config.focus_words, replace=False)],
            [negative[i] for i in rng.choice(half, config.focus_words, replace=False)],
        )

    tasks, focuses = [], []
    thresholds = ["t2", "t4", "t5"] if config.tasks_per_domain == 3 else [f"t{i}" for i in range(config.tasks_per_domain)]
    for d, domain in enumerate(domains):
        for threshold in thresholds:
            task_id = f"{domain}.{threshold}"
            focus = task_focus()
            focuses.append((d, focus))
            raw = []
            for polarity in LABELS:
                for _ in range(config.examples_per_label):
                    text = sentence(d, polarity, focus)
                    label = -polarity if rng.random() < config.noise_rate else polarity
                    raw.append((label, text))
            raw = [raw[i] for i in rng.permutation(len(raw))]
            if domain in test_domains:
                support, test, taken = [], [], {lab: 0 for lab in LABELS}
                support_texts = set()
                for label, text in raw:
                    if taken[label] < config.support_per_label and text not in support_texts:
                        taken[label] += 1
                        support_texts.add(text)
                        support.append(Example(f"{task_id}:support:{len(support) + 1}", text, label))
                # a test line identical to a support line would leak the answer
                for label, text in raw:
                    if text not in support_texts:
                        test.append(Example(f"{task_id}:test:{len(test) + 1}", text, label))
                if min(taken.values()) < config.support_per_label:
                    raise ValueError(f"task {task_id}: too few examples per label for the support set")
                tasks.append(TaskSpec(task_id, domain, LABELS, _by_label(test), "test", _by_label(support)))
            else:
                exs = [Example(f"{task_id}:train:{i + 1}", text, label) for i, (label, text) in enumerate(raw)]
                tasks.append(TaskSpec(task_id, domain, LABELS, _by_label(exs), "train"))

    corpus = []
    # unlabeled reviews drawn from the same tasks' distributions
    for _ in range(config.corpus_size):
        d, focus = focuses[int(rng.integers(len(focuses)))]
        corpus.append(sentence(d, LABELS[int(rng.integers(2))], focus))
    split = SplitSpec(
        train=tuple(t.task_id for t in tasks if t.split == "train"),
        test=tuple(t.task_id for t in tasks if t.split == "test"),
    )
    return SyntheticData(corpus, tasks, split, {"positive": positive, "negative": negative, "topics": dict(zip(domains, topics))})


def _file_order(task: TaskSpec, pool: dict) -> list[Example]:
    # restore generation order, which the uid line numbers encode
    exs = [ex for lab in task.labels for ex in pool[lab]]
    return sorted(exs, key=lambda ex: int(ex.uid.rsplit(":", 1)[1]))


def write_layout(data: SyntheticData, root) -> None:
    """Write tasks, the raw corpus and the lexicon in the ARSC-style layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def dump(path, examples):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ex in examples:
                fh.write(f"{ex.label}\t{ex.text}\n")

    for task in data.tasks:
        if task.split == "test":
            dump(root / f"{task.task_id}.support", _file_order(task, task.support))
            dump(root / f"{task.task_id}.test", _file_order(task, task.examples))
        else:
            dump(root / f"{task.task_id}.train", _file_order(task, task.examples))
    with open(root / CORPUS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for text in data.corpus:
            fh.write(text + "\n")
    with open(root / LEXICON_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data.lexicon, fh, indent=1, sort_keys=True)
        fh.write("\n")
