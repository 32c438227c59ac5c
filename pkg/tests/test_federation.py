import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fada import config as C
from fada import federation as F
from fada import losses as L
from fada import models as M
from fada import tensor as T

from oracles import centralized_sgd


def small(seed=0, preset=None, **over):
    d = {"seed": seed, "rounds": 3, "pretrain_epochs": 1, "batch_size": 32,
         "domains": {"sources": [{"n": 200, "rotation_deg": 0}, {"n": 200, "rotation_deg": 20},
                                 {"n": 200, "rotation_deg": 40}],
                     "target": {"n": 200, "rotation_deg": 50}},
         "attention": {"probe_size": 64}}
    d.update(over)
    cfg = C.from_dict(d)
    return cfg.with_ablation(preset) if preset else cfg


@pytest.fixture(scope="module")
def full_run():
    return F.run(small(preset="III"), keep_payloads=True)


# ------------------------------------------------------------- aggregation


def test_delta_aggregation_matches_hand_formula():
    tgt = {"w": np.array([1.0, 2.0])}
    sync = {"w": np.array([0.0, 0.0])}
    snaps = [{"w": np.array([1.0, 0.0])}, {"w": np.array([0.0, 4.0])}]
    out = F.aggregate_states(tgt, sync, snaps, [0.25, 0.75])
    np.testing.assert_allclose(out["w"], [1.25, 5.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_uniform_mask_with_sync_equal_target_is_plain_average(n, seed):
    rng = np.random.default_rng(seed)
    base = {"g": {"w": rng.normal(size=(3, 2))}}
    snaps = [{"g": {"w": rng.normal(size=(3, 2))}} for _ in range(n)]
    out = F.aggregate_states(base, base, snaps, np.full(n, 1 / n))
    np.testing.assert_allclose(out["g"]["w"], np.mean([s["g"]["w"] for s in snaps], axis=0), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_one_hot_mask_moves_target_by_that_delta_only(seed):
    rng = np.random.default_rng(seed)
    tgt, sync = {"w": rng.normal(size=4)}, {"w": rng.normal(size=4)}
    snaps = [{"w": rng.normal(size=4)} for _ in range(3)]
    out = F.aggregate_states(tgt, sync, snaps, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(out["w"], tgt["w"] + snaps[1]["w"] - sync["w"])


def test_aggregate_rejects_bad_masks_and_shapes():
    s = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        F.aggregate_states(s, s, [s, s], [0.7, 0.7])
    with pytest.raises(ValueError):
        F.aggregate_states(s, s, [s], [0.5, 0.5])
    with pytest.raises(T.ShapeError):
        F.aggregate_states(s, s, [{"w": np.zeros(3)}], [1.0])


def test_local_buffers_are_kept_and_running_var_clamped():
    tgt = {"buffer:1.running_var": np.array([0.1]), "buffer:1.running_mean": np.array([5.0])}
    sync = {"buffer:1.running_var": np.array([1.0]), "buffer:1.running_mean": np.array([0.0])}
    snap = {"buffer:1.running_var": np.array([0.2]), "buffer:1.running_mean": np.array([1.0])}
    kept = F.aggregate_states(tgt, sync, [snap], [1.0], buffers=False)
    assert kept["buffer:1.running_mean"][0] == 5.0
    moved = F.aggregate_states(tgt, sync, [snap], [1.0])
    assert moved["buffer:1.running_var"][0] == 0.0
    assert moved["buffer:1.running_mean"][0] == 6.0


# ------------------------------------------------------------------ steps


def _source_node(cfg):
    doms, target, sources, pairs, _ = F.setup(cfg)
    return sources[0], pairs[0], target, doms


def test_zero_learning_rate_leaves_bundle_unchanged():
    cfg = small(lr={"source": 0.0, "target": 0.0, "di": 0.0, "mine": 0.0})
    node, pair, target, doms = _source_node(cfg)
    before = copy.deepcopy(node.bundle.state())
    f_t = F.Message("FeatureBatch", F.TARGET, F.SERVER, 1, {"features": np.zeros((32, 128))})
    F.local_source_step(node, f_t, pair, cfg, 1)
    after = node.bundle.state()
    for k in before:
        for n in before[k]:
            assert np.array_equal(before[k][n], after[k][n]), (k, n)


def test_one_task_step_decreases_cross_entropy():
    cfg = small(lr={"source": 0.01, "momentum": 0.0})
    node, _, _, _ = _source_node(cfg)
    x, y = node._data.features[:64], node._data.labels[:64]
    b = node.bundle

    def ce():
        with T.no_grad():
            f, _ = M.forward_disentangle(b["generator"], b["disentangler"], x, False)
            return L.cross_entropy(b["classifier"](f, False), y).item()

    start = ce()
    for _ in range(5):
        F.task_step(node, x, y, cfg)
    assert ce() < start


def test_missing_target_features_is_a_protocol_error():
    cfg = small(preset="II")
    node, pair, _, _ = _source_node(cfg)
    with pytest.raises(F.ProtocolError):
        F.local_source_step(node, None, pair, cfg, 1)


def test_target_node_cannot_run_a_source_step():
    cfg = small(preset="II")
    _, pair, target, _ = _source_node(cfg)
    with pytest.raises(F.ProtocolError):
        F.local_source_step(target, None, pair, cfg, 1)


# -------------------------------------------------------------- full runs


def test_run_shapes_and_sync(full_run):
    art = full_run
    assert len(art.records) == 3
    for rec in art.records:
        assert rec.mask.sum() == pytest.approx(1.0)
        assert 0.0 <= rec.target_acc <= 1.0
    shared = art.target.bundle.state(F.SHARED_KINDS)
    for s in art.sources:
        st_ = s.bundle.state(F.SHARED_KINDS)
        for k in shared:
            for n in shared[k]:
                if not n.startswith("buffer:"):
                    np.testing.assert_array_equal(st_[k][n], shared[k][n])


def test_messages_follow_the_star_topology(full_run):
    kinds, ids = set(), {s.node_id for s in full_run.sources}
    for m in full_run.log():
        kinds.add(m.kind)
        assert m.kind in F.MESSAGE_KINDS
        # sources never talk to each other
        assert not (m.sender in ids and m.receiver in ids), m
    assert kinds == set(F.MESSAGE_KINDS)


def test_target_training_split_has_no_labels(full_run):
    assert not full_run.domains.target_train.labeled


def test_clean_run_passes_the_audit(full_run):
    assert full_run.audit.ok
    assert full_run.audit.messages_checked == len(full_run.log())


def test_planted_raw_rows_are_detected(full_run):
    raw = full_run.sources[1]._data.features
    private = {s.node_id: s._data.features for s in full_run.sources}
    planted = F.Message("FeatureBatch", "s1", F.SERVER, 9, {"features": raw[5:8].copy()})
    res = F.privacy_audit(full_run.log() + [planted], private)
    assert [(v.sender, v.round) for v in res.violations] == [("s1", 9)]


def test_a_single_raw_row_hidden_in_a_larger_array_is_detected():
    rows = np.random.default_rng(0).normal(size=(10, 3))
    arr = np.random.default_rng(1).normal(size=(4, 5))
    arr.flat[7:10] = rows[4]
    res = F.privacy_audit([F.Message("ParamDelta", "s0", F.TARGET, 1, {"g": {"w": arr}})], {"s0": rows})
    assert not res.ok


def test_unknown_message_kind_is_a_violation():
    res = F.privacy_audit([F.Message("RawData", "s0", F.TARGET, 1, None)], {"s0": np.zeros((2, 2))})
    assert not res.ok


def test_metrics_identical_serial_and_threaded(tmp_path):
    cfg = small(seed=4, preset="III")
    F.write_metrics(F.run(cfg).records, tmp_path / "a.csv")
    F.write_metrics(F.run(cfg, jobs=4).records, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_written_artifacts(tmp_path, full_run):
    F.write_artifacts(full_run, tmp_path, audit_full=True)
    for name in ("metrics.csv", "mask_history.csv", "messages.jsonl", "audit.json", "config.json"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(F.METRIC_COLUMNS)
    assert (tmp_path / "checkpoints" / "target_G.ckpt").exists()
    assert not list((tmp_path / "checkpoints").glob("target_CI*"))


def test_bound_report_is_estimated():
    art = F.run(small(rounds=1, bound=True))
    assert art.bound.mode == "estimated" and art.bound.truth is None
    assert art.bound.total > art.bound.source_error


# ------------------------------------------------------ centralized oracle


@pytest.mark.parametrize("pretrain", [0, 1])
def test_single_source_run_equals_centralized_sgd(pretrain):
    cfg = C.from_dict({"seed": 3, "rounds": 12, "pretrain_epochs": pretrain, "batch_size": 16,
                       "domains": {"sources": [{"n": 100}], "target": {"n": 100, "rotation_deg": 30}}},
                      ).with_ablation("source_only")
    art = F.run(cfg)
    doms = art.domains
    specs = F.model_specs(cfg, doms.target_train.dim, doms.num_classes)
    init = F.node_rng(cfg.seed, F.SERVER, "init")
    G, Dn, Cl = (M.build(specs[k], init) for k in F.SHARED_KINDS)
    src = doms.sources[0]
    n_pre = pretrain * (len(src) // cfg.batch_size)
    trace = centralized_sgd(src.features, src.labels, G, Dn, Cl, cfg.lr.source, cfg.lr.momentum,
                            n_pre + cfg.rounds, cfg.batch_size,
                            F.node_rng(cfg.seed, "s0", "batches"), F.node_rng(cfg.seed, "s0"))
    fed = [r.reports["s0"]["task_ce"] for r in art.records]
    np.testing.assert_allclose(fed, trace[n_pre:], rtol=0, atol=1e-12)
    for kind, comp in zip(F.SHARED_KINDS, (G, Dn, Cl)):
        got = art.target.bundle[kind].state()
        for k, v in comp.state().items():
            np.testing.assert_allclose(got[k], v, rtol=0, atol=1e-12)
