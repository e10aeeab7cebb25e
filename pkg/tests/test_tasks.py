import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtm.tasks import (
    CORPUS_FILE,
    LABELS,
    DataFormatError,
    EpisodeError,
    Example,
    SplitSpec,
    SyntheticConfig,
    TaskSpec,
    domain_names,
    episode_stream,
    fixed_test_episode,
    generate_synthetic,
    load_arsc_layout,
    read_corpus,
    sample_episode,
    write_layout,
)
from mtm.textmodel import tokenize


def _lines(n_per_label, tag):
    return "".join(f"{lab}\t{tag} review {i} sign {lab}\n" for i in range(n_per_label) for lab in LABELS)


def _arsc(root, domains=23, test=4, support_per_label=5):
    names = [f"d{i:02d}" for i in range(domains)]
    for d in names:
        for th in ("t2", "t4", "t5"):
            if d in names[:test]:
                (root / f"{d}.{th}.support").write_text(_lines(support_per_label, f"{d}{th}s"), encoding="utf-8")
                (root / f"{d}.{th}.test").write_text(_lines(12, f"{d}{th}q"), encoding="utf-8")
            else:
                (root / f"{d}.{th}.train").write_text(_lines(8, f"{d}{th}"), encoding="utf-8")
                (root / f"{d}.{th}.dev").write_text(_lines(2, f"{d}{th}dev"), encoding="utf-8")
    return names[:test]


def _task(n_per_label, task_id="d.t2", split="train"):
    ex = {lab: tuple(Example(f"{task_id}:{lab}:{i}", f"text {lab} {i}", lab) for i in range(n_per_label)) for lab in LABELS}
    return TaskSpec(task_id, "d", LABELS, ex, split)


# loading ------------------------------------------------------------------


def test_full_layout_counts(tmp_path):
    test_domains = _arsc(tmp_path)
    tasks, split = load_arsc_layout(tmp_path, test_domains)
    assert len(tasks) == 69
    assert len(split.test) == 12 and len(split.train) == 57
    assert not set(split.train) & set(split.test)
    for t in tasks:
        if t.split == "test":
            assert all(len(t.support[lab]) == 5 for lab in LABELS)
            ep = fixed_test_episode(t, 5)
            assert len(ep.support) == 10 and len(ep.query) == 24
        else:
            assert t.count(-1) == t.count(1) == 8


def test_labels_map_to_classes_in_label_order(tmp_path):
    test_domains = _arsc(tmp_path, domains=2, test=1)
    tasks, _ = load_arsc_layout(tmp_path, test_domains)
    ep = fixed_test_episode(next(t for t in tasks if t.split == "test"), 5)
    assert ep.class_map == {-1: 0, 1: 1}
    assert all(c == (0 if ex.label == -1 else 1) for ex, c in ep.support + ep.query)


def test_missing_support_rejected(tmp_path):
    test_domains = _arsc(tmp_path, domains=3, test=1)
    (tmp_path / f"{test_domains[0]}.t4.support").unlink()
    with pytest.raises(DataFormatError, match="support"):
        load_arsc_layout(tmp_path, test_domains)


def test_malformed_line_reports_line_number(tmp_path):
    test_domains = _arsc(tmp_path, domains=3, test=1)
    path = tmp_path / "d02.t5.train"
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    lines[6] = "positive\tnot a valid label\n"
    path.write_text("".join(lines), encoding="utf-8")
    with pytest.raises(DataFormatError, match=r"d02\.t5\.train:7:"):
        load_arsc_layout(tmp_path, test_domains)


@pytest.mark.parametrize("bad", ["1 no tab here\n", "0\tzero label\n", "+1\tsigned\n", "1\tcrlf ending\r\n"])
def test_strict_line_format(tmp_path, bad):
    test_domains = _arsc(tmp_path, domains=2, test=1)
    with open(tmp_path / "d01.t2.train", "a", encoding="utf-8", newline="") as fh:
        fh.write(bad)
    with pytest.raises(DataFormatError, match=":17:"):
        load_arsc_layout(tmp_path, test_domains)


def test_unknown_test_domain_rejected(tmp_path):
    _arsc(tmp_path, domains=2, test=1)
    with pytest.raises(DataFormatError, match="nope"):
        load_arsc_layout(tmp_path, ["nope"])


def test_split_overlap_rejected():
    with pytest.raises(ValueError, match="overlap"):
        SplitSpec(train=("a.t2", "b.t2"), test=("b.t2",))


def test_taskspec_invariants():
    with pytest.raises(ValueError):
        TaskSpec("x", "d", (1,), {1: ()})
    with pytest.raises(ValueError):
        TaskSpec("x", "d", LABELS, {1: (Example("u", "t", -1),)})


def test_read_corpus_falls_back_to_train_texts(tmp_path):
    test_domains = _arsc(tmp_path, domains=3, test=1)
    tasks, _ = load_arsc_layout(tmp_path, test_domains)
    texts = read_corpus(tmp_path, tasks)
    assert len(texts) == 2 * 3 * 16
    assert not any("\t" in t for t in texts)
    (tmp_path / CORPUS_FILE).write_text("one\ntwo\n", encoding="utf-8")
    assert read_corpus(tmp_path, tasks) == ["one", "two"]


# episodes ------------------------------------------------------------------


def _check_episode(ep, task, k, q):
    per_class = {c: 0 for c in range(len(task.labels))}
    for _, c in ep.support:
        per_class[c] += 1
    assert all(v == k for v in per_class.values())
    assert len(ep.query) == q * len(task.labels)
    assert not {ex.uid for ex, _ in ep.support} & {ex.uid for ex, _ in ep.query}
    for ex, c in ep.support + ep.query:
        assert ex.label in task.labels
        assert ep.class_map[ex.label] == c
    assert sorted(ep.class_map.values()) == list(range(len(task.labels)))


def test_five_shot_binary_episode():
    task = _task(20)
    ep = sample_episode(task, 5, 5, 0)
    assert len(ep.support) == 10 and len(ep.query) == 10
    _check_episode(ep, task, 5, 5)


def test_whole_class_support_with_empty_query():
    task = _task(7)
    ep = sample_episode(task, 7, 0, 1)
    assert ep.query == []
    assert {ex.uid for ex, _ in ep.support} == {ex.uid for lab in LABELS for ex in task.examples[lab]}
    with pytest.raises(EpisodeError, match="need 8 examples, have 7"):
        sample_episode(task, 7, 1, 1)


def test_bad_k_q_rejected():
    with pytest.raises(EpisodeError):
        sample_episode(_task(5), 0, 1, 0)
    with pytest.raises(EpisodeError):
        sample_episode(_task(5), 1, -1, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**32), st.booleans())
def test_episode_invariants(k, q, seed, shuffle):
    task = _task(12)
    ep = sample_episode(task, k, q, seed, shuffle_classes=shuffle)
    _check_episode(ep, task, k, q)


def test_support_frequency_is_binomial():
    n, k, q, draws = 20, 5, 5, 10_000
    task = _task(n)
    support_hits = {ex.uid: 0 for lab in LABELS for ex in task.examples[lab]}
    query_hits = dict(support_hits)
    for i in range(draws):
        ep = sample_episode(task, k, q, episode_stream(7, task.task_id, i))
        for ex, _ in ep.support:
            support_hits[ex.uid] += 1
        for ex, _ in ep.query:
            query_hits[ex.uid] += 1
    p = k / n
    sigma = np.sqrt(draws * p * (1 - p))
    for hits in (support_hits, query_hits):
        dev = np.abs(np.array(list(hits.values())) - draws * p)
        assert dev.max() <= 3 * sigma


def test_episode_stream_is_deterministic_and_distinct():
    task = _task(20)
    a = sample_episode(task, 5, 5, episode_stream(1, task.task_id, 3))
    b = sample_episode(task, 5, 5, episode_stream(1, task.task_id, 3))
    c = sample_episode(task, 5, 5, episode_stream(1, task.task_id, 4))
    assert a == b
    assert a.support != c.support


def _test_task(support_per_label=5, test_per_label=50):
    sup = {lab: tuple(Example(f"s{lab}{i}", f"support {lab} {i}", lab) for i in range(support_per_label)) for lab in LABELS}
    test = {lab: tuple(Example(f"q{lab}{i}", f"query {lab} {i}", lab) for i in range(test_per_label)) for lab in LABELS}
    return TaskSpec("d.t2", "d", LABELS, test, "test", sup)


def test_fixed_test_episode_uses_whole_test_split():
    ep = fixed_test_episode(_test_task(), 5)
    assert len(ep.support) == 10 and len(ep.query) == 100
    assert ep.split == "test"
    assert fixed_test_episode(_test_task(), 5) == ep


def test_fixed_test_episode_errors():
    with pytest.raises(EpisodeError, match="not a test task"):
        fixed_test_episode(_task(10), 5)
    with pytest.raises(EpisodeError, match="expected 5"):
        fixed_test_episode(_test_task(support_per_label=4), 5)
    t = _test_task()
    leak = Example("q-leak", t.support[1][0].text, 1)
    t.examples[1] = t.examples[1] + (leak,)
    with pytest.raises(EpisodeError, match="also in the query"):
        fixed_test_episode(t, 5)


# synthetic generator ----------------------------------------------------------


def _lexicon_vote(text, lexicon):
    toks = tokenize(text)
    pos = sum(t in lexicon["positive"] for t in toks)
    neg = sum(t in lexicon["negative"] for t in toks)
    return 1 if pos > neg else -1 if neg > pos else 0


def _all_examples(task):
    pools = [task.examples] + ([task.support] if task.support else [])
    return [ex for pool in pools for lab in LABELS for ex in pool[lab]]


def test_lexicon_oracle_perfect_without_noise():
    data = generate_synthetic(SyntheticConfig(noise_rate=0.0, seed=3))
    lex = {k: set(v) for k, v in data.lexicon.items() if k in ("positive", "negative")}
    exs = [ex for t in data.tasks for ex in _all_examples(t)]
    assert len(exs) > 2000
    assert all(_lexicon_vote(ex.text, lex) == ex.label for ex in exs)


def test_lexicon_oracle_tracks_noise_rate():
    data = generate_synthetic(SyntheticConfig(noise_rate=0.05, seed=3))
    lex = {k: set(v) for k, v in data.lexicon.items() if k in ("positive", "negative")}
    exs = [ex for t in data.tasks for ex in _all_examples(t)]
    agree = np.mean([_lexicon_vote(ex.text, lex) == ex.label for ex in exs])
    assert 0.93 < agree < 0.97


def test_generator_deterministic():
    a = generate_synthetic(SyntheticConfig(seed=11))
    b = generate_synthetic(SyntheticConfig(seed=11))
    c = generate_synthetic(SyntheticConfig(seed=12))
    assert a.corpus == b.corpus and a.tasks == b.tasks and a.lexicon == b.lexicon
    assert a.corpus != c.corpus


def test_generator_counts():
    cfg = SyntheticConfig(num_domains=8, test_domains=0, tasks_per_domain=3, examples_per_label=40)
    data = generate_synthetic(cfg)
    assert len(data.tasks) == 24
    assert sum(len(_all_examples(t)) for t in data.tasks) == 1920
    assert data.split.test == ()


def test_default_benchmark_split():
    data = generate_synthetic(SyntheticConfig())
    assert len(data.split.train) == 24 and len(data.split.test) == 6
    assert {t.domain for t in data.tasks if t.split == "test"} == set(domain_names(10)[8:])
    for t in data.tasks:
        if t.split == "test":
            fixed_test_episode(t, 5)


def test_label_balance():
    data = generate_synthetic(SyntheticConfig(num_domains=4, test_domains=1, examples_per_label=500, corpus_size=0, seed=5))
    for t in data.tasks:
        exs = _all_examples(t)
        assert len(exs) == 1000
        assert abs(np.mean([ex.label == 1 for ex in exs]) - 0.5) <= 0.02


def test_vocabulary_size_respected():
    data = generate_synthetic(SyntheticConfig())
    words = {w for text in data.corpus for w in tokenize(text)}
    words |= {w for t in data.tasks for ex in _all_examples(t) for w in tokenize(ex.text)}
    assert len(words) <= 197  # 200 minus the reserved tokens


@pytest.mark.parametrize(
    "kw",
    [
        {"lexicon_size": 0},
        {"num_domains": 2, "test_domains": 2},
        {"noise_rate": 1.5},
        {"focus_words": 0},
        {"vocab_size": 50},
        {"examples_per_label": 6, "support_per_label": 5},
    ],
)
def test_degenerate_configs_rejected(kw):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(**kw))


def test_write_then_load_round_trips(tmp_path):
    cfg = SyntheticConfig(num_domains=4, test_domains=1, examples_per_label=12, corpus_size=30, seed=2)
    data = generate_synthetic(cfg)
    write_layout(data, tmp_path)
    tasks, split = load_arsc_layout(tmp_path, domain_names(4)[3:])
    assert tasks == data.tasks
    assert split == data.split
    assert read_corpus(tmp_path) == data.corpus
    lex = json.loads((tmp_path / "lexicon.json").read_text(encoding="utf-8"))
    assert lex["positive"] == data.lexicon["positive"]
    raw = (tmp_path / "dom00.t2.train").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
