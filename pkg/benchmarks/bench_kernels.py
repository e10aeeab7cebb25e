"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--skip-pipeline]

Part one times each kernel in-process on both implementations and checks that
they agree. Part two times pretraining and meta-training steps end to end in
a subprocess per backend (the backend is fixed at import via MTM_KERNELS).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mtm import _pykernels

try:
    from mtm import _ckernels
except ImportError:
    _ckernels = None

PIPELINE = r"""
import json, time
import numpy as np
from mtm import BACKEND, seeding
from mtm.metalearn import HyperParams, meta_train
from mtm.pretrain import PretrainConfig, pretrain_run
from mtm.tasks import SyntheticConfig, generate_synthetic
from mtm.textmodel import build_vocab, encode_batch, init_params

data = generate_synthetic(SyntheticConfig(seed=1))
vocab = build_vocab(data.corpus)
corpus = encode_batch(data.corpus, vocab, 16)
theta = init_params(len(vocab), 16, 16, 2, seeding.stream(0, "init"))
t = time.perf_counter()
pretrain_run(corpus, theta, PretrainConfig(steps=300, lr=3.5))
pre = (time.perf_counter() - t) / 300
train = [t for t in data.tasks if t.split == "train"]
t = time.perf_counter()
meta_train(theta, train, HyperParams(alpha=1.0, beta=0.2, meta_iterations=50), vocab, 16)
meta = (time.perf_counter() - t) / 50
print(json.dumps({"backend": BACKEND, "pretrain_step_ms": pre * 1e3, "meta_step_ms": meta * 1e3}))
"""


def kernel_cases(rng):
    table = rng.normal(size=(200, 16))
    ids = rng.integers(0, 200, size=32 * 16).astype(np.int64)
    grad = rng.normal(size=(ids.size, 16))
    logits = rng.normal(size=(64, 200))
    labels = rng.integers(0, 200, size=64).astype(np.int64)
    return {
        "gather_rows 512x16": ("gather_rows", (table, ids)),
        "scatter_add_rows 512x16": ("scatter_add_rows", (ids, grad, 200)),
        "softmax_rows 64x200": ("softmax_rows", (logits,)),
        "softmax_xent 64x200": ("softmax_xent", (logits, labels)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}  agree")
    for label, (name, args) in kernel_cases(rng).items():
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*args), number=repeat, repeat=5)) / repeat * 1e6
        if _ckernels is None:
            print(f"{label:28s} {t_py:10.2f} {'n/a':>10s}")
            continue
        cy = getattr(_ckernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*args), number=repeat, repeat=5)) / repeat * 1e6
        print(f"{label:28s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.2f}x  {_same(py(*args), cy(*args))}")


def bench_pipeline():
    rows = []
    for backend in ("python", "cython"):
        env = dict(os.environ, MTM_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", PIPELINE], env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    print(f"\n{'backend':10s} {'pretrain step ms':>17s} {'meta step ms':>13s}")
    for r in rows:
        print(f"{r['backend']:10s} {r['pretrain_step_ms']:17.3f} {r['meta_step_ms']:13.3f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--skip-pipeline", action="store_true")
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; showing the numpy fallback only")
    bench_kernels(args.repeat)
    if not args.skip_pipeline:
        bench_pipeline()


if __name__ == "__main__":
    main()
