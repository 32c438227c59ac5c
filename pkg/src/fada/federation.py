"""Federated training loop: source nodes, one unlabeled target node, and an orchestrator.

Only parameter snapshots/deltas, generator outputs (and gradients with respect
to them) and scalar loss reports cross node boundaries. Domain identifiers,
one per (source, target) pair, live at the orchestrator.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as A
from . import data as D
from . import losses as L
from . import models as M
from . import tensor as T
from . import theory
from .config import RunConfig
from .tensor import Tensor

TARGET = "target"
SERVER = "server"
MESSAGE_KINDS = ("ParamSnapshot", "ParamDelta", "FeatureBatch", "ScalarReport")
SHARED_KINDS = ("generator", "disentangler", "classifier")
METRIC_COLUMNS = ("round", "node_id", "task_ce", "adv_di", "adv_g", "ent", "mi", "recon", "weight", "target_acc")
LOSS_COLUMNS = METRIC_COLUMNS[2:8]


class ProtocolError(RuntimeError):
    pass


def source_id(i: int) -> str:
    return f"s{i}"


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def node_rng(seed: int, node_id: str, stream: str = "main") -> np.random.Generator:
    """Independent generator per (seed, node, purpose); does not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, stable_hash(node_id), stable_hash(stream)]))


# ------------------------------------------------------------------ messages


@dataclass
class Message:
    kind: str
    sender: str
    receiver: str
    round: int
    payload: dict | None
    tag: str = ""
    digest: str = ""

    def __post_init__(self):
        if not self.digest and self.payload is not None:
            self.digest = payload_digest(self.payload)

    def arrays(self) -> list[np.ndarray]:
        return [] if self.payload is None else [np.asarray(v, dtype=np.float64) for _, v in _items(self.payload)]

    def strip(self) -> "Message":
        return Message(self.kind, self.sender, self.receiver, self.round, None, self.tag, self.digest)

    def envelope(self, full: bool = False) -> dict:
        env = {"round": self.round, "kind": self.kind, "sender": self.sender, "receiver": self.receiver,
               "tag": self.tag, "digest": self.digest}
        if full and self.payload is not None:
            env["payload"] = {k: np.asarray(v).tolist() for k, v in _items(self.payload)}
        return env


def _items(payload: dict, prefix: str = ""):
    for k in sorted(payload):
        v = payload[k]
        if isinstance(v, dict):
            yield from _items(v, f"{prefix}{k}/")
        else:
            yield f"{prefix}{k}", v


def payload_digest(payload: dict) -> str:
    h = hashlib.sha256()
    for k, v in _items(payload):
        a = np.ascontiguousarray(np.asarray(v, dtype="<f8"))
        h.update(k.encode("utf-8"))
        h.update(str(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Violation:
    round: int
    sender: str
    receiver: str
    kind: str
    reason: str


@dataclass
class AuditResult:
    violations: list[Violation] = field(default_factory=list)
    messages_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def merge(self, other: "AuditResult") -> None:
        self.violations += other.violations
        self.messages_checked += other.messages_checked


class _RowIndex:
    """Raw sample rows of one width, sorted by their first coordinate."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64)
        rows = rows if rows.ndim == 2 else rows[:, None]
        self.rows = rows[np.argsort(rows[:, 0], kind="stable")]
        self.width = rows.shape[1]
        self.firsts = self.rows[:, 0]

    def contains_row(self, flat: np.ndarray) -> bool:
        d = self.width
        if flat.size < d:
            return False
        head = flat[: flat.size - d + 1]
        pos = np.minimum(np.searchsorted(self.firsts, head), self.firsts.size - 1)
        cand = np.nonzero(self.firsts[pos] == head)[0]
        for c in cand:
            lo, hi = np.searchsorted(self.firsts, [head[c], np.nextafter(head[c], np.inf)])
            if np.any(np.all(self.rows[lo:hi] == flat[c:c + d], axis=1)):
                return True
        return False


def _row_index(private_rows) -> list[_RowIndex]:
    rows = private_rows.values() if isinstance(private_rows, dict) else private_rows
    by_width: dict[int, list[np.ndarray]] = {}
    for r in rows:
        r = np.asarray(r, dtype=np.float64)
        r = r if r.ndim == 2 else r[:, None]
        if len(r):
            by_width.setdefault(r.shape[1], []).append(r)
    return [_RowIndex(np.concatenate(v)) for v in by_width.values()]


def privacy_audit(log, private_rows) -> AuditResult:
    """Flag messages of an unknown kind or whose payload contains any raw sample row.

    ``private_rows`` maps a node id to its raw feature matrix (or is a list of
    matrices). At most one violation is reported per message.
    """
    index = private_rows if isinstance(private_rows, _Auditor) else _Auditor(private_rows)
    return index.check(log)


class _Auditor:
    def __init__(self, private_rows):
        self.index = _row_index(private_rows)

    def check(self, log) -> AuditResult:
        res = AuditResult()
        for msg in log:
            res.messages_checked += 1
            if msg.kind not in MESSAGE_KINDS:
                res.violations.append(Violation(msg.round, msg.sender, msg.receiver, msg.kind,
                                                f"message kind {msg.kind!r} is not allowed across nodes"))
                continue
            for arr in msg.arrays():
                flat = arr.ravel()
                if any(ix.contains_row(flat) for ix in self.index):
                    res.violations.append(Violation(msg.round, msg.sender, msg.receiver, msg.kind,
                                                    "payload contains a raw sample row"))
                    break
        return res


# ---------------------------------------------------------------- node state


class BatchStream:
    """Reshuffle every epoch and hand out consecutive full batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return max(1, self.n // self.batch_size)

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class NodeState:
    node_id: str
    role: str
    bundle: M.ModelBundle
    rng: np.random.Generator
    stream: BatchStream | None = None
    optimizers: dict[str, T.SGD] = field(default_factory=dict)
    _data: D.DomainDataset | None = field(default=None, repr=False)

    def optimizer(self, name: str, lr: float, momentum: float) -> T.SGD:
        opt = self.optimizers.get(name)
        if opt is None:
            opt = self.optimizers[name] = T.SGD(lr, momentum)
        return opt


@dataclass
class PairState:
    """Orchestrator-side domain identifier for one (source, target) pair."""
    source: str
    di: M.Component
    optimizer: T.SGD


def _named(bundle: M.ModelBundle, kinds) -> dict[str, Tensor]:
    return {f"{k}/{n}": p for k in kinds for n, p in bundle[k].params.items()}


def _zero(*comps) -> None:
    for c in comps:
        c.zero_grad()


def _update(node: NodeState, name: str, kinds, loss: Tensor, lr: float, momentum: float,
            sign: float = 1.0) -> None:
    comps = [node.bundle[k] for k in node.bundle.components]
    _zero(*comps)
    T.backward(loss)
    params = _named(node.bundle, kinds)
    grads = {k: None if p.grad is None else sign * p.grad for k, p in params.items()}
    node.optimizer(name, lr, momentum).step(params, grads)
    _zero(*comps)


class _KeepBuffers:
    """Restore batch-norm running statistics on exit when ``active``."""

    def __init__(self, bundle: M.ModelBundle, active: bool):
        self.bundle, self.active = bundle, active

    def __enter__(self):
        if self.active:
            self.saved = {k: {n: b.copy() for n, b in c.buffers.items()} for k, c in self.bundle.components.items()}
        return self

    def __exit__(self, *exc):
        if self.active:
            for k, c in self.bundle.components.items():
                for n, b in c.buffers.items():
                    b[...] = self.saved[k][n]
        return False


def _inputs(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return x.reshape((x.shape[0],) + tuple(shape))


def task_step(node: NodeState, x: np.ndarray, y: np.ndarray, cfg: RunConfig) -> float:
    """Cross-entropy on the G -> D(di) -> C path; updates G, D and C."""
    b, lr = node.bundle, cfg.lr.source
    with _KeepBuffers(b, lr == 0), T.tape():
        f_di, _ = M.forward_disentangle(b["generator"], b["disentangler"], x, True, node.rng)
        ce = L.cross_entropy(b["classifier"](f_di, True), y)
        if cfg.loss_weights.task:
            _update(node, "task", SHARED_KINDS, T.mul(cfg.loss_weights.task, ce), lr, cfg.lr.momentum)
        return ce.item()


def adversarial_step(node: NodeState, pair: PairState, x: np.ndarray, f_t: np.ndarray, cfg: RunConfig,
                     rnd: int) -> tuple[float, float, np.ndarray, list[Message]]:
    """One domain-identifier update followed by the generator confusion update.

    Returns the two loss values, the gradient of the weighted confusion loss
    with respect to the target features, and the messages exchanged.
    """
    b, w = node.bundle, cfg.loss_weights.adv
    msgs = []
    with _KeepBuffers(b, cfg.lr.source == 0), T.tape():
        f_s = b["generator"](x, True, node.rng)
        msgs.append(Message("FeatureBatch", node.node_id, SERVER, rnd, {"features": f_s.data.copy()}))
        # orchestrator side: the identifier sees only generator outputs
        with T.tape():
            di = pair.di
            di.zero_grad()
            l_di = L.adv_di_loss(di(Tensor(f_s.data)), di(Tensor(f_t)))
            T.backward(l_di)
            pair.optimizer.step(di.params, di.grads())
            di.zero_grad()
            fs_in, ft_in = Tensor(f_s.data, requires_grad=True), Tensor(f_t, requires_grad=True)
            l_g = L.adv_g_loss(di(fs_in), di(ft_in))
            T.backward(l_g)
            g_s, g_t = w * fs_in.grad, w * ft_in.grad
            di.zero_grad()
        msgs.append(Message("FeatureBatch", SERVER, node.node_id, rnd, {"grad": g_s}, tag="grad"))
        msgs.append(Message("FeatureBatch", SERVER, TARGET, rnd, {"grad": g_t}, tag="grad"))
        if w:
            _update(node, "adv_g", ("generator",), T.sum(T.mul(f_s, g_s)), cfg.lr.source, cfg.lr.momentum)
    return l_di.item(), l_g.item(), g_t, msgs


def disentangle_steps(node: NodeState, x: np.ndarray, y: np.ndarray, cfg: RunConfig) -> dict[str, float]:
    """Two-head cross-entropy, class-identifier confusion, MI minimisation, reconstruction."""
    b, w, lr, mom = node.bundle, cfg.loss_weights, cfg.lr.source, cfg.lr.momentum
    G, Dn, C, CI, R, Mi = (b[k] for k in M.SOURCE_KINDS)
    out = {}
    with _KeepBuffers(b, lr == 0 and cfg.lr.mine == 0):
        with T.tape():
            f_di, f_ds = M.forward_disentangle(G, Dn, x, True, node.rng)
            ce2 = L.disentangle_ce_loss(C(f_di, True), CI(f_ds, True), y)
            if w.task:
                _update(node, "dis_ce", ("generator", "disentangler", "classifier", "class_identifier"),
                        T.mul(w.task, ce2), lr, mom)
        with T.tape():
            _, f_ds = M.forward_disentangle(G, Dn, x, True, node.rng)
            ent = L.entropy_confusion_loss(CI(f_ds, True))
            out["ent"] = ent.item()
            if w.ent:
                _update(node, "ent", ("generator", "disentangler"), T.mul(w.ent, ent), lr, mom)
        with T.tape():
            f_di, f_ds = M.forward_disentangle(G, Dn, x, True, node.rng)
            mi = L.mine_estimate(Mi, f_di, f_ds, rng=node.rng)
            out["mi"] = mi.item()
            _zero(*b.components.values())
            T.backward(mi)
            d_params, m_params = _named(b, ("disentangler",)), _named(b, ("mine",))
            if w.mi:
                node.optimizer("mi_d", lr, mom).step(d_params, {k: None if p.grad is None else w.mi * p.grad
                                                                for k, p in d_params.items()})
            # the statistics network ascends the bound
            node.optimizer("mi_m", cfg.lr.mine, mom).step(m_params, {k: None if p.grad is None else -p.grad
                                                                      for k, p in m_params.items()})
            _zero(*b.components.values())
        with T.tape():
            h = G(x, True, node.rng)
            f_di, f_ds = Dn(h, True, node.rng)
            rec = L.recon_loss(R(T.concat([f_di, f_ds], axis=1), True), h.detach())
            out["recon"] = rec.item()
            if w.rec:
                _update(node, "recon", ("disentangler", "reconstructor"), T.mul(w.rec, rec), lr, mom)
    return out


def local_source_step(node: NodeState, target_features: Message | None, pair: PairState | None,
                      cfg: RunConfig, rnd: int = 0) -> tuple[dict[str, float], np.ndarray | None, list[Message]]:
    """Run ``cfg.local_steps`` local batches on a source node.

    Returns averaged loss reports, the summed gradient for the target
    features (None without adversarial alignment) and the messages sent.
    """
    if node.role != "source":
        raise ProtocolError(f"{node.node_id}: local_source_step needs a source node")
    adv, dis = cfg.ablation.adversarial, cfg.ablation.disentangle
    f_t = None
    if adv:
        if target_features is None or target_features.kind != "FeatureBatch" or target_features.payload is None:
            raise ProtocolError(f"round {rnd}: {node.node_id} received no target features")
        if pair is None:
            raise ProtocolError(f"round {rnd}: no domain identifier for {node.node_id}")
        f_t = np.asarray(target_features.payload["features"])
    data = node._data
    labels = data.require_labels()
    shape = node.bundle["generator"].spec.input_shape
    sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
    g_total, msgs = None, []
    for _ in range(cfg.local_steps):
        idx = node.stream.next()
        x, y = _inputs(data.features[idx], shape), labels[idx]
        sums["task_ce"] += task_step(node, x, y, cfg)
        if adv:
            l_di, l_g, g_t, m = adversarial_step(node, pair, x, f_t, cfg, rnd)
            sums["adv_di"] += l_di
            sums["adv_g"] += l_g
            g_total = g_t if g_total is None else g_total + g_t
            msgs += m
        if dis:
            for k, v in disentangle_steps(node, x, y, cfg).items():
                sums[k] += v
    reports = {k: v / cfg.local_steps for k, v in sums.items()}
    msgs.append(Message("ScalarReport", node.node_id, SERVER, rnd, dict(reports)))
    return reports, g_total, msgs


def pretrain(node: NodeState, cfg: RunConfig) -> None:
    """Warm start: ``pretrain_epochs`` epochs of task cross-entropy."""
    data, shape = node._data, node.bundle["generator"].spec.input_shape
    labels = data.require_labels()
    for _ in range(cfg.pretrain_epochs * node.stream.batches_per_epoch):
        idx = node.stream.next()
        task_step(node, _inputs(data.features[idx], shape), labels[idx], cfg)


# --------------------------------------------------------------- aggregation


def aggregate_states(target_state: dict, sync_state: dict, snapshots: list[dict], weights,
                     buffers: bool = True) -> dict:
    """target + sum_i w_i (snapshot_i - sync), key by key (nested dicts allowed).

    With ``buffers=False`` entries named ``buffer:*`` keep the target's values.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(snapshots),):
        raise ValueError(f"aggregate: {w.size} weights for {len(snapshots)} snapshots")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregate: mask must be non-negative and sum to 1, got sum {w.sum()!r}")
    out = {}
    for key, tv in target_state.items():
        if isinstance(tv, dict):
            out[key] = aggregate_states(tv, sync_state[key], [s[key] for s in snapshots], w, buffers)
            continue
        if not buffers and key.startswith("buffer:"):
            out[key] = np.array(tv, dtype=np.float64)
            continue
        tv, sv = np.asarray(tv, dtype=np.float64), np.asarray(sync_state[key], dtype=np.float64)
        acc = tv.copy()
        for wi, snap in zip(w, snapshots):
            cand = np.asarray(snap[key], dtype=np.float64)
            if cand.shape != tv.shape or sv.shape != tv.shape:
                raise T.ShapeError(f"aggregate: {key} has shape {cand.shape}, target has {tv.shape}")
            if wi:
                acc += wi * (cand - sv)
        if key.endswith("running_var"):
            # the delta rule can overshoot below zero when statistics shrink fast
            np.maximum(acc, 0.0, out=acc)
        out[key] = acc
    return out


def aggregate(target: M.ModelBundle, snapshots: list[dict], mask, sync: dict | None = None,
              kinds=SHARED_KINDS, buffers: bool = True) -> M.ModelBundle:
    """Move the target by the mask-weighted source deltas since the last synchronisation.

    ``buffers=False`` keeps the target's own batch-norm statistics.
    """
    weights = mask.mask if isinstance(mask, A.AttentionState) else mask
    current = target.state(kinds)
    new = aggregate_states(current, current if sync is None else sync, snapshots, weights, buffers)
    target.load_state(new)
    return target


# ----------------------------------------------------------------------- run


@dataclass
class Domains:
    sources: list[D.DomainDataset]
    source_eval: list[D.DomainDataset]
    target_train: D.DomainDataset
    target_eval: D.DomainDataset
    num_classes: int


def _domain_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, stable_hash("data:" + name)]).generate_state(1)[0])


def make_domain(spec, seed: int, default_id: str) -> D.DomainDataset:
    did = spec.id or default_id
    s = _domain_seed(seed, did)
    if spec.kind == "moons":
        ds = D.gen_rotated_moons(spec.n, spec.rotation_deg, spec.noise_sigma, s, did)
    elif spec.kind == "gaussians":
        ds = D.gen_shifted_gaussians(spec.n, spec.num_classes, spec.shift, spec.cov_scale, s, did)
    else:
        ds = D.ingest_csv(spec.path, did)
    if spec.shuffle_labels:
        ds = D.shuffle_labels(ds, s + 1)
    return ds


def build_domains(cfg: RunConfig) -> Domains:
    dc = cfg.domains
    srcs, evals = [], []
    for i, spec in enumerate(dc.sources):
        ds = make_domain(spec, cfg.seed, source_id(i))
        tr, ev = D.train_eval_split(ds, dc.eval_fraction, _domain_seed(cfg.seed, f"split{i}"))
        srcs.append(tr)
        evals.append(ev)
    tgt = make_domain(dc.target, cfg.seed, TARGET)
    if not tgt.labeled:
        raise D.DataError("target domain needs held-out labels for evaluation")
    t_tr, t_ev = D.train_eval_split(tgt, dc.eval_fraction, _domain_seed(cfg.seed, "split-target"), target=True)
    dims = {s.dim for s in srcs} | {tgt.dim}
    if len(dims) != 1:
        raise D.DataError(f"all domains need the same feature width, got {sorted(dims)}")
    K = int(max(int(s.require_labels().max()) for s in srcs + [t_ev]) + 1)
    return Domains(srcs, evals, t_tr, t_ev, max(K, 2))


def model_specs(cfg: RunConfig, input_dim: int, num_classes: int) -> dict[str, M.ComponentSpec]:
    fam, size = cfg.model.family, cfg.model.image_size
    if fam == "digit":
        if input_dim % (size * size):
            raise M.ArchitectureError(f"digit family needs C*{size}*{size} input features, got {input_dim}")
        return M.family_specs(fam, cfg.model.width_scale, num_classes=num_classes, image_size=size,
                              in_channels=input_dim // (size * size))
    return M.family_specs(fam, cfg.model.width_scale, input_dim=input_dim, num_classes=num_classes)


@dataclass
class RoundRecord:
    round: int
    reports: dict[str, dict[str, float]]
    mask: np.ndarray
    gains: np.ndarray | None
    target_acc: float
    messages: list[Message]

    def metric_rows(self) -> list[list]:
        rows = []
        for i, (nid, rep) in enumerate(self.reports.items()):
            weight = 1.0 if nid == TARGET else float(self.mask[i])
            rows.append([self.round, nid, *(float(rep.get(c, 0.0)) for c in LOSS_COLUMNS), weight, self.target_acc])
        return rows


@dataclass
class RunArtifacts:
    config: RunConfig
    records: list[RoundRecord]
    target: NodeState
    sources: list[NodeState]
    pairs: list[PairState]
    domains: Domains
    init_state: dict
    audit: AuditResult
    warmup: list[Message] = field(default_factory=list)
    bound: theory.BoundReport | None = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].target_acc if self.records else accuracy(self.target.bundle, self.domains.target_eval)

    def log(self) -> list[Message]:
        return self.warmup + [m for r in self.records for m in r.messages]


def accuracy(bundle: M.ModelBundle, ds: D.DomainDataset) -> float:
    x = _inputs(ds.features, bundle["generator"].spec.input_shape)
    return float(np.mean(np.argmax(M.predict_proba(bundle, x), axis=1) == ds.require_labels()))


def candidate_outputs(target: M.ModelBundle, delta: dict | None, probe: np.ndarray,
                      buffers: bool = True) -> np.ndarray:
    """Class probabilities on the probe batch of a scratch target moved by ``delta``."""
    comps = {}
    for kind in SHARED_KINDS:
        c = copy.deepcopy(target[kind])
        if delta is not None:
            d = delta[kind]
            c.load_state({n: v + d[n] if buffers or not n.startswith("buffer:") else v for n, v in c.state().items()})
        comps[kind] = c
    return M.predict_proba(M.ModelBundle("target", comps), probe)


def probe_gap(outputs: np.ndarray, k: int, rng, restarts: int) -> float:
    """Gap statistic of probe outputs rescaled to unit root-mean-square spread."""
    f = outputs
    # compare cluster tightness, not overall scale
    spread = np.sqrt(np.mean(np.sum((f - f.mean(axis=0)) ** 2, axis=1)))
    if spread > 0:
        f = f / spread
    return A.target_gap(f, k, rng, restarts=restarts)


def setup(cfg: RunConfig) -> tuple[Domains, NodeState, list[NodeState], list[PairState], dict]:
    doms = build_domains(cfg)
    specs = model_specs(cfg, doms.target_train.dim, doms.num_classes)
    init_rng = node_rng(cfg.seed, SERVER, "init")
    shared = {k: M.build(specs[k], init_rng) for k in SHARED_KINDS}
    init_state = {k: c.state() for k, c in shared.items()}
    target_bundle = M.ModelBundle("target", {k: M.build(specs[k], init_rng) for k in SHARED_KINDS})
    target_bundle.load_state(init_state)
    target = NodeState(TARGET, "target", target_bundle, node_rng(cfg.seed, TARGET), None, {}, doms.target_train)
    target.stream = BatchStream(len(doms.target_train), cfg.batch_size, node_rng(cfg.seed, TARGET, "batches"))
    sources, pairs = [], []
    for i, ds in enumerate(doms.sources):
        nid = source_id(i)
        brng = node_rng(cfg.seed, nid, "init")
        bundle = M.ModelBundle("source", {k: M.build(specs[k], brng) for k in M.SOURCE_KINDS})
        bundle.load_state(init_state)
        node = NodeState(nid, "source", bundle, node_rng(cfg.seed, nid), None, {}, ds)
        node.stream = BatchStream(len(ds), cfg.batch_size, node_rng(cfg.seed, nid, "batches"))
        sources.append(node)
        di = M.build(specs["domain_identifier"], node_rng(cfg.seed, SERVER, "di:" + nid))
        pairs.append(PairState(nid, di, T.SGD(cfg.lr.di, cfg.lr.momentum)))
    return doms, target, sources, pairs, init_state


def _map(pool, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(it) for it in items]


def run(cfg: RunConfig, jobs: int = 1, keep_payloads: bool = False, progress=None) -> RunArtifacts:
    """Execute ``cfg.rounds`` federated rounds; deterministic for a fixed seed and any ``jobs``."""
    doms, target, sources, pairs, init_state = setup(cfg)
    N, K = len(sources), doms.num_classes
    private = {s.node_id: s._data.features for s in sources}
    private[TARGET] = np.concatenate([doms.target_train.features, doms.target_eval.features])
    private = _Auditor(private)
    att_cfg = cfg.attention
    state = A.AttentionState(N, att_cfg.k or K, att_cfg.floor)
    g_shape = target.bundle["generator"].spec.input_shape
    # a target that trains on its own batches keeps its own normalisation statistics
    local_bn = cfg.ablation.adversarial
    probe_rng = node_rng(cfg.seed, TARGET, "probe")
    n_probe = min(att_cfg.probe_size, len(doms.target_train))
    probe = _inputs(doms.target_train.features[np.sort(probe_rng.choice(len(doms.target_train), n_probe, replace=False))],
                    g_shape)
    audit = AuditResult()
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        warmup: list[Message] = []
        if cfg.pretrain_epochs:
            _map(pool, lambda s: pretrain(s, cfg), sources)
            # start the rounds from the plain average of the warm-started sources
            snaps = [s.bundle.state(SHARED_KINDS) for s in sources]
            warmup += [Message("ParamDelta", s.node_id, TARGET, 0,
                               {k: {n: snap[k][n] - init_state[k][n] for n in snap[k]} for k in SHARED_KINDS})
                       for s, snap in zip(sources, snaps)]
            aggregate(target.bundle, snaps, np.full(N, 1.0 / N), init_state)
            new_state = target.bundle.state(SHARED_KINDS)
            for s in sources:
                warmup.append(Message("ParamSnapshot", TARGET, s.node_id, 0, new_state))
                s.bundle.load_state(new_state)
            audit.merge(privacy_audit(warmup, private))
            if not keep_payloads:
                warmup = [m.strip() for m in warmup]
        for rnd in range(1, cfg.rounds + 1):
            msgs: list[Message] = []
            sync = target.bundle.state(SHARED_KINDS)
            with T.tape():
                ft_msg, f_t = None, None
                if cfg.ablation.adversarial:
                    idx = target.stream.next()
                    f_t = target.bundle["generator"](_inputs(doms.target_train.features[idx], g_shape), True, target.rng)
                    ft_msg = Message("FeatureBatch", TARGET, SERVER, rnd, {"features": f_t.data.copy()})
                    msgs.append(ft_msg)
                    # the same batch refreshes the target's statistics downstream of G
                    with T.no_grad():
                        f_di, _ = target.bundle["disentangler"](f_t.data, True, target.rng)
                        target.bundle["classifier"](f_di, True)
                results = _map(pool, lambda sp: local_source_step(sp[0], ft_msg, sp[1], cfg, rnd),
                               list(zip(sources, pairs)))
                g_sum = None
                for _, g, m in results:
                    msgs += m
                    if g is not None:
                        g_sum = g if g_sum is None else g_sum + g
                if g_sum is not None:
                    G_t = target.bundle["generator"]
                    G_t.zero_grad()
                    T.backward(T.sum(T.mul(f_t, g_sum / N)))
                    target.optimizer("adv_g", cfg.lr.target, cfg.lr.momentum).step(G_t.params, G_t.grads())
                    G_t.zero_grad()
            snaps = [s.bundle.state(SHARED_KINDS) for s in sources]
            deltas = []
            for s, snap in zip(sources, snaps):
                delta = {k: {n: snap[k][n] - sync[k][n] for n in snap[k]} for k in SHARED_KINDS}
                deltas.append(delta)
                msgs.append(Message("ParamDelta", s.node_id, TARGET, rnd, delta))
            # candidate gaps: each source's update applied alone to a scratch target generator
            if att_cfg.force_mask is not None:
                state = A.AttentionState(N, state.k, state.floor, None, None, np.asarray(att_cfg.force_mask, float))
            elif cfg.ablation.attention:
                # gain_i = gap before minus gap after applying source i's update alone; every
                # evaluation in a round shares the clustering seed so the gains are comparable
                def gap(delta):
                    out = candidate_outputs(target.bundle, delta, probe, not local_bn)
                    return probe_gap(out, state.k, node_rng(cfg.seed, TARGET, f"gap:{rnd}"), att_cfg.restarts)
                gaps = _map(pool, gap, [None] + deltas)
                state.prev_gap = np.full(N, gaps[0])
                state = A.update_mask(state, gaps[1:])
            aggregate(target.bundle, snaps, state.mask, sync, buffers=not local_bn)
            new_state = target.bundle.state(SHARED_KINDS)
            for s in sources:
                msgs.append(Message("ParamSnapshot", TARGET, s.node_id, rnd, new_state))
                s.bundle.load_state(new_state)
            acc = accuracy(target.bundle, doms.target_eval)
            reports = {s.node_id: r for s, (r, _, _) in zip(sources, results)}
            reports[TARGET] = dict.fromkeys(LOSS_COLUMNS, 0.0)
            round_audit = privacy_audit(msgs, private)
            audit.merge(round_audit)
            if not keep_payloads:
                msgs = [m.strip() for m in msgs]
            records.append(RoundRecord(rnd, reports, state.mask.copy(),
                                       None if state.gains is None else state.gains.copy(), acc, msgs))
            if progress is not None:
                progress(records[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    art = RunArtifacts(cfg, records, target, sources, pairs, doms, init_state, audit, warmup)
    if cfg.bound:
        # evaluated right after the last aggregation, when every node holds the same shared weights
        alphas = records[-1].mask if records else np.full(N, 1.0 / N)
        art.bound = neural_bound_report(target.bundle, doms, alphas, cfg.seed, cfg.delta)
    return art


# --------------------------------------------------------------------- bound


def neural_bound_report(bundle: M.ModelBundle, domains: Domains, alphas, seed: int = 0,
                        delta: float = 0.05) -> theory.BoundReport:
    """Bound terms for a synchronised target model.

    Divergences are proxy A-distances on generator features and the joint
    error terms are unavailable without target labels, so the report is an
    estimate rather than a certificate.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    shape = bundle["generator"].spec.input_shape
    t_feat = M.features(bundle, _inputs(domains.target_eval.features, shape))
    errs, divs = [], []
    for i, ev in enumerate(domains.source_eval):
        errs.append(1.0 - accuracy(bundle, ev))
        s_feat = M.features(bundle, _inputs(ev.features, shape))
        divs.append(theory.proxy_a_distance(s_feat, t_feat, node_rng(seed, SERVER, f"bound:{i}")))
    m = min(len(s) for s in domains.sources)
    return theory.assemble(float(np.dot(alphas, errs)), alphas, divs, [0.0] * len(divs), float(bundle.num_params()),
                           m, delta, mode="estimated", truth=None,
                           note="divergence: proxy A-distance on generator features; lambda unavailable without "
                                "target labels and set to 0; d: target parameter count")


# ------------------------------------------------------------------- outputs


def write_metrics(records: list[RoundRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in records:
            for row in rec.metric_rows():
                w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def write_mask_history(records: list[RoundRecord], source_ids: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "source_id", "gain", "weight"))
        for rec in records:
            for i, sid in enumerate(source_ids):
                gain = 0.0 if rec.gains is None else float(rec.gains[i])
                w.writerow([rec.round, sid, repr(gain), repr(float(rec.mask[i]))])


def write_message_log(messages: list[Message], path, full: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in messages:
            fh.write(json.dumps(m.envelope(full), sort_keys=True) + "\n")


def write_checkpoints(art: RunArtifacts, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for node in [art.target, *art.sources]:
        for kind, comp in node.bundle.components.items():
            p = d / f"{node.node_id}_{M.SHORT[kind]}.ckpt"
            M.save_checkpoint(p, comp)
            written.append(p)
    return written


def write_artifacts(art: RunArtifacts, out_dir, audit_full: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(art.records, out / "metrics.csv")
    write_mask_history(art.records, [s.node_id for s in art.sources], out / "mask_history.csv")
    write_message_log(art.log(), out / "messages.jsonl", audit_full)
    write_checkpoints(art, out / "checkpoints")
    audit = {"ok": art.audit.ok, "messages_checked": art.audit.messages_checked,
             "violations": [v.__dict__ for v in art.audit.violations]}
    (out / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.json").write_text(json.dumps(art.config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    if art.bound is not None:
        (out / "bound.json").write_text(art.bound.to_json() + "\n", encoding="utf-8")
    return out
