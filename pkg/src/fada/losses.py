"""Training objectives, written with tensor primitives so they differentiate.

Probability inputs are clamped at ``PROB_FLOOR`` inside every log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12

# weights of the auxiliary terms relative to the task cross-entropy
DEFAULT_WEIGHTS = {"task": 1.0, "adv": 1.0, "ent": 0.1, "mi": 0.01, "rec": 0.1}


@dataclass
class LossReport:
    name: str
    value: float
    batch_size: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise T.NumericFault(f"{self.name}: non-finite loss value {self.value}")
        if self.batch_size < 1:
            raise ValueError(f"{self.name}: batch_size must be >= 1")


def _check_probs(name: str, p: Tensor) -> None:
    d = p.data
    if np.any(d < 0) or np.any(d > 1) or np.any(np.isnan(d)):
        raise T.NumericFault(f"{name}: probabilities outside [0, 1]")


def source_prob(di_out: Tensor) -> Tensor:
    """Column 0 of a 2-way domain identifier output: P(feature is from the source)."""
    if di_out.data.ndim == 1:
        return di_out
    pick = np.zeros((1, di_out.shape[1]))
    pick[0, 0] = 1.0
    return T.sum(T.mul(di_out, pick), axis=1)


def adv_di_loss(di_source, di_target) -> Tensor:
    """-E_s log DI(f_s) - E_t log(1 - DI(f_t)); DI learns to tell domains apart."""
    ps, pt = source_prob(T.as_tensor(di_source)), source_prob(T.as_tensor(di_target))
    _check_probs("adv_di_loss", ps)
    _check_probs("adv_di_loss", pt)
    return T.sub(T.mul(-1.0, T.mean(T.log(ps, PROB_FLOOR))),
                 T.mean(T.log(T.sub(1.0, pt), PROB_FLOOR)))


def adv_g_loss(di_source, di_target) -> Tensor:
    """-E_s log DI(f_s) - E_t log DI(f_t): both generators push toward the 'source' label."""
    ps, pt = source_prob(T.as_tensor(di_source)), source_prob(T.as_tensor(di_target))
    _check_probs("adv_g_loss", ps)
    _check_probs("adv_g_loss", pt)
    return T.mul(-1.0, T.add(T.mean(T.log(ps, PROB_FLOOR)), T.mean(T.log(pt, PROB_FLOOR))))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= k) or not np.all(labels == np.floor(labels)):
        raise ValueError(f"labels must be integers in [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def cross_entropy(probs, labels) -> Tensor:
    """Batch mean of -log p[label]."""
    probs = T.as_tensor(probs)
    _check_probs("cross_entropy", probs)
    oh = one_hot(labels, probs.shape[1])
    return T.mul(-1.0, T.mean(T.sum(T.mul(T.log(probs, PROB_FLOOR), oh), axis=1)))


def disentangle_ce_loss(c_probs, ci_probs, labels) -> Tensor:
    """Cross-entropy of C on f_di plus cross-entropy of CI on f_ds."""
    return T.add(cross_entropy(c_probs, labels), cross_entropy(ci_probs, labels))


def entropy_confusion_loss(ci_probs) -> Tensor:
    """Batch mean of sum_k p_k log p_k (negative entropy); minimised at uniform rows."""
    p = T.as_tensor(ci_probs)
    _check_probs("entropy_confusion_loss", p)
    return T.mean(T.sum(T.mul(p, T.log(p, PROB_FLOOR)), axis=1))


def log_mean_exp(x: Tensor) -> Tensor:
    # shift by the (constant) max; the gradient is unaffected
    m = float(np.max(x.data))
    return T.add(T.log(T.mean(T.exp(T.sub(x, m)))), m)


def dv_bound(t_joint: Tensor, t_marginal: Tensor) -> Tensor:
    """mean(T(p, q)) - log mean(exp T(p, q'))."""
    return T.sub(T.mean(t_joint), log_mean_exp(t_marginal))


def marginal_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def mine_estimate(M, p, q, marginal_q=None, rng: np.random.Generator | None = None) -> Tensor:
    """Monte-Carlo Donsker-Varadhan estimate of I(p; q) with statistics network M.

    ``marginal_q`` defaults to a uniform random permutation of ``q`` rows.
    """
    p, q = T.as_tensor(p), T.as_tensor(q)
    n = p.shape[0]
    if n < 2 or q.shape[0] != n:
        raise ValueError(f"mine_estimate: need matching batches of size >= 2, got {p.shape} and {q.shape}")
    if marginal_q is None:
        if rng is None:
            raise ValueError("mine_estimate: need marginal_q or an rng")
        marginal_q = T.take_rows(q, marginal_permutation(n, rng))
    return dv_bound(M(p, q), M(p, T.as_tensor(marginal_q)))


def recon_loss(recon, original) -> Tensor:
    """Batch mean of the per-sample squared L2 distance."""
    recon, original = T.as_tensor(recon), T.as_tensor(original)
    if recon.shape != original.shape:
        raise T.ShapeError(f"recon_loss: shapes differ, {recon.shape} and {original.shape}")
    d = T.sub(recon, original)
    return T.mean(T.sum(T.mul(d, d), axis=1))
