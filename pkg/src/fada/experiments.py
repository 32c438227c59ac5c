"""Small reproducible experiments used by scripts/ and the acceptance tests."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import federation as F
from . import losses as L
from . import models as M
from . import tensor as T
from . import theory


# ------------------------------------------------------------- MINE check


def gaussian_mi(rho: float) -> float:
    """Closed-form mutual information of a standard bivariate Gaussian, in nats."""
    return -0.5 * math.log1p(-rho * rho) + 0.0  # + 0.0 turns -0.0 into 0.0


def correlated_pairs(rho: float, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = rng.normal(size=(n, 1))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.normal(size=(n, 1))
    return x, y


def mine_spec(width: int = 64, dim: int = 1) -> M.ComponentSpec:
    return M.ComponentSpec("mine", [[("fc", dim, width)], [("fc", dim, width)], [("fc", width, 1)]], 1.0, (dim,))


def mine_calibration(rho: float, n: int = 10_000, steps: int = 2000, width: int = 64, seed: int = 0,
                     lr: float = 0.05, momentum: float = 0.9, batch_size: int = 500,
                     eval_perms: int = 10) -> float:
    """Train a statistics network on minibatches and return its DV estimate on all ``n`` pairs.

    The final estimate averages the bound over ``eval_perms`` fresh marginal
    permutations to reduce the shuffle noise.
    """
    rng = np.random.default_rng([seed, int(rho * 1000)])
    x, y = correlated_pairs(rho, n, rng)
    net = M.build(mine_spec(width), rng)
    opt = T.SGD(lr, momentum)
    for _ in range(steps):
        with T.tape():
            net.zero_grad()
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            T.backward(T.mul(L.mine_estimate(net, x[idx], y[idx], rng=rng), -1.0))
            opt.step(net.params, net.grads())
    with T.no_grad():
        return float(np.mean([L.mine_estimate(net, x, y, rng=rng).data for _ in range(eval_perms)]))


# ------------------------------------------------------- federated runs


def moons_config(seed: int, preset: str | None = None, **overrides) -> cfgmod.RunConfig:
    cfg = cfgmod.from_dict({"seed": seed, **overrides})
    return cfg.with_ablation(preset) if preset else cfg


def shuffled_source_config(seed: int, shuffled: int = 1, rounds: int = 50) -> cfgmod.RunConfig:
    """Default four-source moons run with one source's labels fully permuted."""
    cfg = moons_config(seed, rounds=rounds)
    srcs = [dataclasses.replace(s, shuffle_labels=(i == shuffled)) for i, s in enumerate(cfg.domains.sources)]
    cfg.domains = dataclasses.replace(cfg.domains, sources=srcs)
    return cfg


@dataclass
class AttentionTrial:
    seed: int
    weights: np.ndarray  # rounds x N
    shuffled: int
    audit_ok: bool
    final_accuracy: float

    @property
    def threshold(self) -> float:
        return 1.0 / (2 * self.weights.shape[1])

    def late_weight(self, window: int = 10) -> float:
        return float(self.weights[-window:, self.shuffled].mean())

    @property
    def suppressed(self) -> bool:
        # one noisy round below the threshold does not count; the weight has to stay down
        return self.late_weight() < self.threshold


def attention_trial(seed: int, shuffled: int = 1, rounds: int = 50, jobs: int = 1) -> AttentionTrial:
    art = F.run(shuffled_source_config(seed, shuffled, rounds), jobs=jobs)
    w = np.array([r.mask for r in art.records])
    return AttentionTrial(seed, w, shuffled, art.audit.ok, art.final_accuracy)


def ablation_ladder(seeds, presets=("source_only", "I", "II", "III"), jobs: int = 1,
                    **overrides) -> dict[str, list[float]]:
    """Final target accuracy per preset and seed, plus whether every audit passed."""
    out: dict[str, list[float]] = {p: [] for p in presets}
    audits = []
    for p in presets:
        for s in seeds:
            art = F.run(moons_config(s, p, **overrides), jobs=jobs)
            out[p].append(art.final_accuracy)
            audits.append(art.audit.ok)
    out["audit_ok"] = [all(audits)]
    return out


def pooled_a_distance(art: F.RunArtifacts, seed: int) -> float:
    """Proxy A-distance between target and pooled source features of the target generator.

    The pooled source set is subsampled to the target size so that a constant
    classifier cannot look better than chance.
    """
    doms, bundle = art.domains, art.target.bundle
    shape = bundle["generator"].spec.input_shape
    t_feat = M.features(bundle, F._inputs(doms.target_eval.features, shape))
    s_feat = np.concatenate([M.features(bundle, F._inputs(ev.features, shape)) for ev in doms.source_eval])
    rng = F.node_rng(seed, F.SERVER, "a-distance")
    s_feat = s_feat[rng.choice(len(s_feat), size=min(len(s_feat), len(t_feat)), replace=False)]
    return theory.proxy_a_distance(s_feat, t_feat, rng)


def a_distance_pair(seed: int, jobs: int = 1, **overrides) -> tuple[float, float, bool]:
    """(source-only A-distance, Model II A-distance, audits ok) for one seed."""
    base = F.run(moons_config(seed, "source_only", **overrides), jobs=jobs)
    aligned = F.run(moons_config(seed, "II", **overrides), jobs=jobs)
    return pooled_a_distance(base, seed), pooled_a_distance(aligned, seed), base.audit.ok and aligned.audit.ok
