"""Slow, independent reference implementations used to check the fast code paths."""

import itertools
import math

import numpy as np


def gap_bruteforce(points, assignment) -> float:
    """Enumerate every ordered pair (i, j), i != j, inside each cluster."""
    points = np.asarray(points, dtype=np.float64)
    total = 0.0
    for r in set(int(a) for a in assignment):
        idx = [i for i, a in enumerate(assignment) if a == r]
        n_r = len(idx)
        s = 0.0
        for i, j in itertools.permutations(idx, 2):
            s += math.sqrt(sum((points[i, c] - points[j, c]) ** 2 for c in range(points.shape[1])))
        total += s / (2 * n_r)
    return total


def random_gap_instance(rng):
    n = int(rng.integers(2, 51))
    k = int(rng.integers(1, 6))
    d = int(rng.integers(1, 4))
    pts = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
    return pts, rng.integers(0, k, size=n)


def centralized_sgd(x, y, G, Dn, C, lr, momentum, steps, batch_size, batch_rng, dropout_rng):
    """Plain minibatch SGD on cross-entropy through G -> D(di) -> C, no federation."""
    from fada import losses as L
    from fada import models as M
    from fada import tensor as T

    comps = {"generator": G, "disentangler": Dn, "classifier": C}
    params = {f"{k}/{n}": p for k, c in comps.items() for n, p in c.params.items()}
    opt = T.SGD(lr, momentum)
    n = len(x)
    batch_size = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    trace = []
    for _ in range(steps):
        # epochs of full batches; a short tail is dropped and the data reshuffled
        if order.size < batch_size:
            order = batch_rng.permutation(n)
        idx, order = order[:batch_size], order[batch_size:]
        with T.tape():
            for c in comps.values():
                c.zero_grad()
            f_di, _ = M.forward_disentangle(G, Dn, x[idx], True, dropout_rng)
            loss = L.cross_entropy(C(f_di, True), y[idx])
            T.backward(loss)
            opt.step(params, {k: p.grad for k, p in params.items()})
            trace.append(loss.item())
    return trace
