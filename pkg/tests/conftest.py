import sys

import numpy as np
import pytest

from mtm.textmodel import Vocab, init_params


def rel_err(a, b):
    """Norm-wise relative error, safe when both sides are zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def tiny_vocab():
    return Vocab(["<pad>", "<unk>", "<mask>"] + [f"t{i}" for i in range(9)])


@pytest.fixture
def tiny_params(tiny_vocab):
    return init_params(len(tiny_vocab), 3, 4, 2, np.random.default_rng(7))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, seconds, detail = results[n]
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
