"""Divergences, proxy A-distance and the weighted federated error bound.

Finite hypothesis classes are enumerated exactly, so every divergence and
adaptability term here is a true supremum / minimum over the class rather than
an optimiser's estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class PairCapExceeded(ValueError):
    pass


# ------------------------------------------------------------ hypothesis class


def stump_vc_bound(n_features: int) -> int:
    """Largest m with 2^m <= 2 d (m + 1): a growth-function bound on stump VC dimension."""
    m = 1
    while 2 ** (m + 1) <= 2 * n_features * (m + 2):
        m += 1
    return m


@dataclass
class FiniteHypothesisClass:
    """Enumerable binary hypotheses.

    ``threshold``: h_t(x) = [x >= t] over a 1-D grid, plus both constants.
    ``stump``: [s * (x_j - t) >= 0] for every feature j, grid point t, sign s.
    """

    kind: str
    grid: np.ndarray
    n_features: int = 1
    vc_dim: int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.kind not in ("threshold", "stump"):
            raise ValueError(f"unknown hypothesis class kind {self.kind!r}")

    @classmethod
    def thresholds(cls, lo: float = 0.0, hi: float = 1.0, points: int = 64) -> "FiniteHypothesisClass":
        return cls("threshold", np.linspace(lo, hi, points), 1, 1)

    @classmethod
    def stumps(cls, n_features: int, lo: float = 0.0, hi: float = 1.0, points: int = 16) -> "FiniteHypothesisClass":
        return cls("stump", np.linspace(lo, hi, points), n_features, stump_vc_bound(n_features))

    def __len__(self) -> int:
        if self.kind == "threshold":
            return self.grid.size + 2
        return 2 * self.n_features * self.grid.size

    def predict(self, X) -> np.ndarray:
        """Boolean matrix (|H|, n) of every hypothesis on every point."""
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "threshold":
            x = X.reshape(-1)
            body = x[None, :] >= self.grid[:, None]
            return np.vstack([np.ones((1, x.size), bool), body, np.zeros((1, x.size), bool)])
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"stump class over {self.n_features} features got points of width {X.shape[1]}")
        pos = X.T[:, None, :] >= self.grid[None, :, None]  # (d, g, n)
        pos = pos.reshape(-1, X.shape[0])
        return np.vstack([pos, ~pos])

    def hypothesis(self, index: int, X) -> np.ndarray:
        return self.predict(X)[index]


def _weights(n: int, w) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


def _check_nonempty(*samples):
    for s in samples:
        if np.asarray(s).shape[0] == 0:
            raise ValueError("divergence needs non-empty samples")


def h_divergence_exact(cls: FiniteHypothesisClass, sample_a, sample_b, weights_a=None, weights_b=None) -> float:
    """2 * max_h |Pr_A(h = 1) - Pr_B(h = 1)| over the enumerated class."""
    _check_nonempty(sample_a, sample_b)
    pa = cls.predict(sample_a).astype(np.float64) @ _weights(len(sample_a), weights_a)
    pb = cls.predict(sample_b).astype(np.float64) @ _weights(len(sample_b), weights_b)
    return float(2.0 * np.max(np.abs(pa - pb)))


def h_delta_h_divergence_exact(cls: FiniteHypothesisClass, sample_a, sample_b, weights_a=None,
                               weights_b=None, max_pairs: int = 1_000_000) -> float:
    """Same supremum over all XOR pairs h ^ h'."""
    _check_nonempty(sample_a, sample_b)
    if len(cls) ** 2 > max_pairs:
        raise PairCapExceeded(f"{len(cls)}^2 hypothesis pairs exceed the cap of {max_pairs}")
    na = len(sample_a)
    pooled = np.concatenate([np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)])
    # distinct behaviours on the pooled sample are all that matter
    patterns = np.unique(cls.predict(pooled), axis=0)
    w = np.concatenate([_weights(na, weights_a), -_weights(len(sample_b), weights_b)])
    best = 0.0
    for row in patterns:
        x = (patterns ^ row[None, :]).astype(np.float64) @ w
        best = max(best, float(np.max(np.abs(x))))
    return 2.0 * best


# ------------------------------------------------------------- proxy A-dist


def a_distance_from_error(eps: float) -> float:
    return 2.0 * (1.0 - 2.0 * min(eps, 0.5))


def _fit_logistic(X, y, steps, lr):
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(steps):
        z = np.clip(X @ w + b, -500, 500)
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - y
        w -= lr * (X.T @ g) / len(y)
        b -= lr * g.mean()
    return w, b


def proxy_a_distance(source_features, target_features, rng: np.random.Generator,
                     steps: int = 500, lr: float = 0.1, test_fraction: float = 0.2) -> float:
    """2 (1 - 2 eps) with eps the held-out error of a logistic domain classifier."""
    S = np.asarray(source_features, dtype=np.float64)
    Tt = np.asarray(target_features, dtype=np.float64)
    S, Tt = S.reshape(len(S), -1), Tt.reshape(len(Tt), -1)
    if len(S) < 20 or len(Tt) < 20:
        raise ValueError("proxy_a_distance needs at least 20 samples per domain")
    X = np.concatenate([S, Tt])
    y = np.concatenate([np.zeros(len(S)), np.ones(len(Tt))])
    perm = rng.permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    te, tr = perm[:n_test], perm[n_test:]
    if len(np.unique(y[tr])) < 2 or len(np.unique(y[te])) < 2:
        raise ValueError("proxy_a_distance: degenerate single-class split")
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    w, b = _fit_logistic(Xs[tr], y[tr], steps, lr)
    err = float(np.mean(((Xs[te] @ w + b) > 0).astype(float) != y[te]))
    return a_distance_from_error(err)


# ---------------------------------------------------------- bound components


def vc_term(d: float, N: int, m: int, delta: float) -> float:
    """4 sqrt((2 d log(2 N m) + log(4 / delta)) / (N m)), natural logs."""
    if d <= 0 or N < 1 or m < 1 or not 0 < delta < 1:
        raise ValueError(f"vc_term: invalid arguments d={d}, N={N}, m={m}, delta={delta}")
    return 4.0 * math.sqrt((2.0 * d * math.log(2.0 * N * m) + math.log(4.0 / delta)) / (N * m))


def theorem1_bound(source_error: float, divergence: float, lam: float, d: float, m: int, delta: float) -> float:
    """Single-source bound: error + divergence / 2 + VC term + lambda."""
    return source_error + 0.5 * divergence + vc_term(d, 1, m, delta) + lam


def empirical_error(pred: np.ndarray, labels: np.ndarray, weights=None) -> float:
    return float(np.sum((pred.astype(int) != labels) * _weights(len(labels), weights)))


def lambda_estimate(cls: FiniteHypothesisClass, source, target) -> float:
    """min over h of (empirical source error + empirical target error)."""
    (xs, ys), (xt, yt) = source, target
    es = (cls.predict(xs).astype(int) != np.asarray(ys)[None, :]).mean(axis=1)
    et = (cls.predict(xt).astype(int) != np.asarray(yt)[None, :]).mean(axis=1)
    return float(np.min(es + et))


@dataclass
class SourceTerm:
    alpha: float
    divergence: float
    lam: float


@dataclass
class BoundReport:
    source_error: float
    per_source: list[SourceTerm]
    vc_term: float
    total: float
    delta: float
    m: int
    N: int
    mode: str = "certified"
    truth: float | None = None
    note: str = ""

    @property
    def slack(self) -> float | None:
        return None if self.truth is None else self.total - self.truth

    def to_json(self) -> str:
        d = asdict(self)
        d["per_source"] = [{"alpha": t.alpha, "divergence": t.divergence, "lambda": t.lam} for t in self.per_source]
        d["slack"] = self.slack
        return json.dumps(d, indent=2, sort_keys=True)


def assemble(source_error: float, alphas, divergences, lambdas, d: float, m: int, delta: float,
             mode: str = "certified", truth: float | None = None, note: str = "") -> BoundReport:
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-9:
        raise ValueError("alpha must be a probability vector")
    N = len(alphas)
    vc = vc_term(d, N, m, delta)
    per = [SourceTerm(float(a), float(dv), float(lm)) for a, dv, lm in zip(alphas, divergences, lambdas)]
    total = source_error + sum(t.alpha * (0.5 * t.divergence + t.lam) for t in per) + vc
    return BoundReport(float(source_error), per, vc, float(total), delta, m, N, mode, truth, note)


# ---------------------------------------------------- finite-class instances


@dataclass
class FiniteInstance:
    """Known discrete distributions over a support, plus one drawn sample set."""

    cls: FiniteHypothesisClass
    support: np.ndarray
    source_px: list[np.ndarray]
    source_eta: list[np.ndarray]
    target_px: np.ndarray
    target_eta: np.ndarray
    sources: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    target_x: np.ndarray | None = None
    alpha: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.source_px)


def _sample(rng, support, px, eta, m):
    idx = rng.choice(len(support), size=m, p=px)
    y = (rng.random(m) < eta[idx]).astype(np.int64)
    return support[idx], y


def random_instance(rng: np.random.Generator, N: int = 3, m: int = 50, support_size: int = 16,
                    grid_points: int = 64, label_noise: float = 0.15, alpha=None,
                    identical: bool = False) -> FiniteInstance:
    """Random 1-D domains over a shared grid support with threshold-like labels."""
    support = (np.arange(support_size) + 0.5) / support_size
    cls = FiniteHypothesisClass.thresholds(0.0, 1.0, grid_points)

    def domain():
        px = rng.dirichlet(np.ones(support_size))
        theta = rng.uniform(0.3, 0.7)
        noise = rng.uniform(0.0, label_noise, support_size)
        eta = np.where(support >= theta, 1.0 - noise, noise)
        return px, eta

    if identical:
        px, eta = domain()
        src = [(px, eta)] * N
        tgt = (px, eta)
    else:
        src = [domain() for _ in range(N)]
        tgt = domain()
    inst = FiniteInstance(cls, support, [s[0] for s in src], [s[1] for s in src], tgt[0], tgt[1])
    inst.sources = [_sample(rng, support, px, eta, m) for px, eta in src]
    inst.target_x = _sample(rng, support, tgt[0], tgt[1], m)[0]
    inst.alpha = rng.dirichlet(np.ones(N)) if alpha is None else np.asarray(alpha, dtype=np.float64)
    return inst


def true_errors(cls: FiniteHypothesisClass, support, px, eta) -> np.ndarray:
    """Exact risk of every hypothesis under a discrete distribution."""
    H = cls.predict(support).astype(np.float64)
    return H @ (px * (1 - eta)) + (1 - H) @ (px * eta)


def _erm(cls, x, y) -> int:
    errs = (cls.predict(x).astype(int) != y[None, :]).mean(axis=1)
    return int(np.argmin(errs))


def weighted_vote(votes: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Alpha-weighted majority over per-source 0/1 predictions (rows)."""
    return (alpha @ votes.astype(np.float64)) >= 0.5


def finite_bound_report(inst: FiniteInstance, delta: float = 0.05) -> BoundReport:
    """Evaluate every term of the weighted bound, plus the true target error."""
    cls, alpha = inst.cls, inst.alpha
    m = min(len(x) for x, _ in inst.sources)
    h_idx = [_erm(cls, x, y) for x, y in inst.sources]
    # aggregated hypothesis: weighted vote of the per-source hypotheses
    err_src = 0.0
    for a, (x, y) in zip(alpha, inst.sources):
        votes = np.stack([cls.hypothesis(i, x) for i in h_idx])
        err_src += a * empirical_error(weighted_vote(votes, alpha), y)
    divs = [h_delta_h_divergence_exact(cls, x, inst.target_x) for x, _ in inst.sources]
    et = true_errors(cls, inst.support, inst.target_px, inst.target_eta)
    lams = [float(np.min(true_errors(cls, inst.support, px, eta) + et))
            for px, eta in zip(inst.source_px, inst.source_eta)]
    votes_t = np.stack([cls.hypothesis(i, inst.support) for i in h_idx])
    hT = weighted_vote(votes_t, alpha).astype(np.float64)
    truth = float(np.sum(inst.target_px * (hT * (1 - inst.target_eta) + (1 - hT) * inst.target_eta)))
    return assemble(err_src, alpha, divs, lams, cls.vc_dim, m, delta, "certified", truth,
                    "hypotheses aggregated as an alpha-weighted vote")


def mixture_inequality_check(cls: FiniteHypothesisClass, source_samples, target_sample, alpha,
                             tol: float = 1e-9) -> tuple[float, float, bool]:
    """Divergence of the alpha-mixture vs the alpha-weighted per-source divergences."""
    alpha = np.asarray(alpha, dtype=np.float64)
    pooled = np.concatenate([np.asarray(s, dtype=np.float64) for s in source_samples])
    w = np.concatenate([np.full(len(s), a / len(s)) for a, s in zip(alpha, source_samples)])
    lhs = h_delta_h_divergence_exact(cls, pooled, target_sample, weights_a=w)
    rhs = float(sum(a * h_delta_h_divergence_exact(cls, s, target_sample) for a, s in zip(alpha, source_samples)))
    return lhs, rhs, bool(lhs <= rhs + tol)


def validity_sweep(n_instances: int = 500, N: int = 3, m: int = 50, delta: float = 0.05,
                   seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        rep = finite_bound_report(random_instance(rng, N=N, m=m), delta)
        rows.append({"instance": i, "bound": rep.total, "truth": rep.truth, "holds": rep.total >= rep.truth})
    return rows


def mixture_sweep(n_instances: int = 500, seed: int = 0, max_sources: int = 5, m: int = 30) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        N = int(rng.integers(1, max_sources + 1))
        inst = random_instance(rng, N=N, m=m)
        lhs, rhs, ok = mixture_inequality_check(inst.cls, [x for x, _ in inst.sources], inst.target_x, inst.alpha)
        rows.append({"instance": i, "lhs": lhs, "rhs": rhs, "holds": ok})
    return rows
