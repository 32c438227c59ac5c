"""Finite-difference checks of every tensor primitive's backward rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import tensor as T

STEP = 1e-5
THRESHOLD = 1e-4
INSTANCES = 20


@dataclass
class OpReport:
    op: str
    worst: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.worst < THRESHOLD


@dataclass
class GradcheckReport:
    ops: list[OpReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.ops)

    @property
    def failures(self) -> list[str]:
        return [r.op for r in self.ops if not r.ok]

    def lines(self) -> list[str]:
        return [f"{r.op:12s} worst_rel_err={r.worst:.3e} n={r.instances} {'ok' if r.ok else 'FAIL'}" for r in self.ops]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, with an absolute floor for all-zero gradients."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    return float(diff / scale) if scale > 1e-8 else float(diff)


def _loss(fn, arrays, weight):
    out = fn(*[T.Tensor(a, requires_grad=True) for a in arrays])
    return float(np.sum(out.data * weight))


def check_case(fn, arrays: list[np.ndarray], rng: np.random.Generator, coords: int | None = None) -> float:
    """Worst relative error over the inputs of ``fn`` for loss = sum(out * W), W random.

    ``coords`` limits the finite differences to that many random entries per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.tape():
        ins = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*ins)
        weight = rng.normal(size=out.shape)
        T.backward(T.sum(T.mul(out, weight)))
        analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ins)]
    worst = 0.0
    for i, a in enumerate(arrays):
        idx = range(a.size) if coords is None or coords >= a.size else rng.choice(a.size, coords, replace=False)
        num = np.zeros(a.size)
        ana = analytic[i].ravel()
        for j in idx:
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].flat[j] += STEP
            minus[i].flat[j] -= STEP
            with T.tape():
                num[j] = (_loss(fn, plus, weight) - _loss(fn, minus, weight)) / (2 * STEP)
        sel = np.fromiter(idx, dtype=np.int64)
        worst = max(worst, rel_error(ana[sel], num[sel]))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _distinct(rng, shape, gap=0.01):
    # values on a shuffled grid so every pooling window has a clear maximum
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _bn(train):
    def fn(x, g, b):
        c = x.shape[1]
        rm, rv = np.zeros(c), np.ones(c) * 1.5
        return T.batchnorm(x, g, b, rm, rv, train=train)
    return fn


def _cases(op: str, rng: np.random.Generator):
    n, m = rng.integers(2, 5), rng.integers(2, 5)
    r = rng.normal
    if op == "matmul":
        k = rng.integers(1, 4)
        return T.matmul, [r(size=(n, k)), r(size=(k, m))]
    if op in ("add", "sub", "mul"):
        fn = getattr(T, op)
        shapes = [((n, m), (n, m)), ((n, m), (1, m)), ((n, m), (m,)), ((n, 1), (1, m))][rng.integers(4)]
        return fn, [r(size=shapes[0]), r(size=shapes[1])]
    if op == "relu":
        return T.relu, [_away_from_zero(rng, (n, m))]
    if op == "leaky_relu":
        return (lambda x: T.leaky_relu(x, 0.2)), [_away_from_zero(rng, (n, m))]
    if op == "softmax":
        axis = int(rng.integers(2))
        return (lambda x: T.softmax(x, axis=axis)), [r(size=(n, m))]
    if op == "log":
        if rng.integers(2):
            return (lambda x: T.log(x, 1e-3)), [rng.uniform(0.2, 2.0, (n, m))]
        return T.log, [rng.uniform(0.2, 2.0, (n, m))]
    if op == "exp":
        return T.exp, [r(size=(n, m))]
    if op in ("mean", "sum"):
        fn = getattr(T, op)
        axis = [None, 0, 1][rng.integers(3)]
        keep = bool(rng.integers(2))
        return (lambda x: fn(x, axis=axis, keepdims=keep)), [r(size=(n, m))]
    if op == "concat":
        axis = int(rng.integers(2))
        s2 = (n, m + 1) if axis == 1 else (n + 1, m)
        return (lambda a, b: T.concat([a, b], axis=axis)), [r(size=(n, m)), r(size=s2)]
    if op == "reshape":
        return (lambda x: T.reshape(x, (m, n))), [r(size=(n, m))]
    if op == "take_rows":
        idx = rng.integers(0, n, size=n + 2)  # repeats exercise gradient accumulation
        return (lambda x: T.take_rows(x, idx)), [r(size=(n, m))]
    if op == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        c, o, k = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
        return ((lambda x, w, b: T.conv2d(x, w, b, stride, pad)),
                [r(size=(2, c, 5, 5)), r(size=(o, c, k, k)), r(size=(o,))])
    if op == "maxpool2d":
        window = int(rng.integers(2, 4))
        stride = int(rng.integers(1, window + 1))
        return (lambda x: T.maxpool2d(x, window, stride)), [_distinct(rng, (2, 2, 6, 6))]
    if op == "batchnorm":
        shape = (n + 2, m) if rng.integers(2) else (3, m, 3, 3)
        c = shape[1]
        return _bn(bool(rng.integers(2))), [r(size=shape) * 2 + 1, rng.uniform(0.5, 2, c), r(size=c)]
    if op == "dropout":
        seed = int(rng.integers(1 << 31))
        return (lambda x: T.dropout(x, 0.5, np.random.default_rng(seed))), [r(size=(n, m))]
    raise KeyError(op)


def check_op(op: str, instances: int = INSTANCES, seed: int = 0) -> OpReport:
    rng = np.random.default_rng([seed, T.PRIMITIVES.index(op)])
    worst = 0.0
    for _ in range(instances):
        fn, arrays = _cases(op, rng)
        worst = max(worst, check_case(fn, arrays, rng))
    return OpReport(op, worst, instances)


def check_stack(seed: int = 0, coords: int = 6) -> OpReport:
    """End-to-end check through a small digit-family G -> D -> C stack, every parameter."""
    rng = np.random.default_rng(seed)
    specs = M.family_specs("digit", width_scale=1 / 16, num_classes=3, image_size=8, in_channels=1)
    G, Dn, C = (M.build(specs[k], rng) for k in ("generator", "disentangler", "classifier"))
    x = rng.normal(size=(4, 1, 8, 8))
    checked, worst = 0, 0.0
    for comp in (G, Dn, C):
        for stack in comp.stacks.values():
            for key, original in list(stack.params.items()):
                def fn(w, stack=stack, key=key, original=original):
                    stack.params[key] = w
                    try:
                        f_di, _ = Dn(G(x, True), True, np.random.default_rng(7))
                        return C(f_di, True)
                    finally:
                        stack.params[key] = original
                worst = max(worst, check_case(fn, [original.data], rng, coords))
                checked += 1
    return OpReport("stack:digit", worst, checked)


def run_all(instances: int = INSTANCES, seed: int = 0, stack: bool = True) -> GradcheckReport:
    rep = GradcheckReport([check_op(op, instances, seed) for op in T.PRIMITIVES])
    if stack:
        rep.ops.append(check_stack(seed))
    return rep
