"""Random instances of each autodiff primitive, shared by the gradient checks."""
import numpy as np

# Each case: (input shapes, builder(graph, inputs) -> output node).
# Builders must be deterministic given the attrs drawn up front.


def case(name, rng):
    if name == "matmul":
        ta, tb = bool(rng.integers(2)), bool(rng.integers(2))
        a_shape = (4, 2) if ta else (2, 4)
        b_shape = (3, 4) if tb else (4, 3)
        return [a_shape, b_shape], lambda g, x: g.matmul(x[0], x[1], ta=ta, tb=tb)
    if name == "add":
        return [(2, 3), (3,)], lambda g, x: g.add(x[0], x[1])
    if name == "subtract":
        return [(2, 1), (2, 3)], lambda g, x: g.subtract(x[0], x[1])
    if name == "multiply":
        return [(2, 3, 2), (3, 1)], lambda g, x: g.multiply(x[0], x[1])
    if name == "scale":
        c = float(rng.normal())
        return [(3, 2)], lambda g, x: g.scale(x[0], c)
    if name == "tanh":
        return [(2, 3)], lambda g, x: g.tanh(x[0])
    if name == "relu":
        return [(2, 3)], lambda g, x: g.relu(x[0])
    if name == "mean":
        axis = int(rng.integers(3))
        return [(2, 3, 2)], lambda g, x: g.mean(x[0], axis)
    if name == "sum":
        axis = [None, 0, 1, (0, 1)][int(rng.integers(4))]
        keep = bool(rng.integers(2))
        return [(3, 2)], lambda g, x: g.sum(x[0], axis=axis, keepdims=keep)
    if name == "gather":
        ids = rng.integers(0, 5, size=(2, 3))
        return [(5, 2)], lambda g, x: g.gather(x[0], ids)
    if name == "softmax_xent":
        labels = rng.integers(0, 3, size=4)
        return [(4, 3)], lambda g, x: g.softmax_xent(x[0], labels)
    if name == "reshape":
        return [(2, 3)], lambda g, x: g.reshape(x[0], (3, 2))
    if name == "softmax":
        return [(3, 4)], lambda g, x: g.apply("softmax", x[0])
    raise KeyError(name)


def random_inputs(shapes, rng, name):
    xs = [rng.normal(size=s) for s in shapes]
    if name == "relu":
        # keep clear of the kink so central differences are valid
        xs = [np.where(np.abs(x) < 1e-2, 0.5, x) for x in xs]
    return xs


def scalarize(g, out, weights):
    return g.sum(g.multiply(out, weights)) if weights is not None else out
