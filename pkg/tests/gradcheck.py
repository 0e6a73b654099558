"""Shared finite-difference harness and the table of differentiable primitives."""
import numpy as np

from amdim import tensor as T
from amdim.tensor import Tensor

from oracles import max_rel_error, numerical_grad


def check_grads(build, arrays, seed=0, tol=1e-4):
    """Compare autodiff against central differences for loss = <build(*inputs), R>."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*inputs)
    weights = rng.standard_normal(out.shape)

    loss = T.sum(T.mul(out, Tensor(weights)))
    loss.backward()

    worst = 0.0
    for t in inputs:
        def f():
            return float((build(*[Tensor(i.data) for i in inputs]).data * weights).sum())
        num = numerical_grad(f, t.data)
        numeric = np.array([num[i] for i in range(t.size)]).reshape(t.shape)
        worst = max(worst, max_rel_error(t.grad, numeric))
    assert worst < tol, worst
    return worst


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "mul_scalar": (lambda a, b: T.mul(a, b), [(3, 4), ()]),
    "scale": (lambda a: T.scale(a, -2.5), [(5,)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "tanh": (lambda a: T.tanh(a), [(4, 5)]),
    "exp": (lambda a: T.exp(a), [(4,)]),
    "log": (lambda a: T.log(T.add(T.square(a), 0.5)), [(4,)]),  # keeps the argument positive
    "square": (lambda a: T.square(a), [(6,)]),
    "sum_axis": (lambda a: T.sum(a, 1), [(3, 4, 2)]),
    "mean": (lambda a: T.mean(a, (0, 2), keepdims=True), [(3, 4, 2)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "index": (lambda a: a[np.array([0, 2, 2]), 1:], [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], 1), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: T.stack([a, b], 1), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(4, 6), (6, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a, 1), [(3, 7)]),
    "conv2d": (lambda x, w: T.conv2d(x, w, 2), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, w: T.conv2d(x, w, 1), [(2, 3, 4, 4), (5, 3, 1, 1)]),
    "conv2d_bias": (lambda x, w, b: T.conv2d(x, w, 1, bias=b), [(1, 2, 4, 4), (3, 2, 2, 2), (3,)]),
    "add_bias": (lambda x, b: T.add_bias(x, b), [(2, 3, 4), (3,)]),
    "mean_pool": (lambda x: T.mean_pool(x, 2, 2), [(2, 2, 6, 6)]),
    "mean_pool_overlap": (lambda x: T.mean_pool(x, 3, 1), [(1, 2, 5, 5)]),
}


def _bn(x, g, b):
    return T.batch_norm(x, g, b, np.zeros(x.shape[1]), np.ones(x.shape[1]), training=True)


PRIMITIVES["batch_norm"] = (_bn, [(4, 3, 2, 2), (3,), (3,)])
