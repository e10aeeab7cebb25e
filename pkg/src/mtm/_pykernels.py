"""Pure numpy versions of the hot kernels.

These are the reference implementations; ``_ckernels`` must agree with them.
"""
import numpy as np


def gather_rows(table, ids):
    return table[ids]


def scatter_add_rows(ids, grad, n_rows):
    out = np.zeros((n_rows, grad.shape[1]), dtype=np.float64)
    np.add.at(out, ids, grad)
    return out


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row softmax of ``logits``.

    Returns ``(loss, probs)``.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    rows = np.arange(logits.shape[0])
    nll = np.log(z[:, 0]) - shifted[rows, labels]
    return float(nll.mean()), probs
