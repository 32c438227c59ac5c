import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fada import data as D


def test_moons_balanced_and_deterministic():
    a = D.gen_rotated_moons(200, 30.0, seed=4)
    b = D.gen_rotated_moons(200, 30.0, seed=4)
    np.testing.assert_array_equal(a.features, b.features)
    assert np.bincount(a.labels).tolist() == [100, 100]


def test_rotation_preserves_norms():
    a = D.gen_rotated_moons(100, 0.0, seed=1)
    b = D.gen_rotated_moons(100, 75.0, seed=1)
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=1), np.linalg.norm(b.features, axis=1))


def test_moons_reject_odd_count():
    with pytest.raises(D.DataError):
        D.gen_rotated_moons(7)


def test_gaussians_shift_moves_the_mean():
    base = D.gen_shifted_gaussians(3000, 3, [0.0, 0.0], seed=0)
    moved = D.gen_shifted_gaussians(3000, 3, [2.0, -1.0], seed=0)
    np.testing.assert_allclose(moved.features.mean(0) - base.features.mean(0), [2.0, -1.0], atol=1e-12)
    assert np.bincount(base.labels).tolist() == [1000, 1000, 1000]


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 300), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_disjoint_and_exhaustive(n, frac, seed):
    ds = D.DomainDataset("x", np.arange(n, dtype=float)[:, None], np.arange(n) % 2)
    tr, ev = D.train_eval_split(ds, frac, seed)
    rows = np.concatenate([tr.features[:, 0], ev.features[:, 0]])
    assert sorted(rows.tolist()) == list(range(n))


def test_target_train_split_has_no_labels():
    ds = D.gen_rotated_moons(100, seed=0)
    tr, ev = D.train_eval_split(ds, 0.2, 0, target=True)
    with pytest.raises(D.LabelAccessError):
        tr.require_labels()
    assert ev.labeled


def test_shuffle_labels_keeps_counts_changes_pairing():
    ds = D.gen_rotated_moons(400, seed=0)
    sh = D.shuffle_labels(ds, 1)
    assert np.bincount(sh.labels).tolist() == np.bincount(ds.labels).tolist()
    assert 0.35 < np.mean(sh.labels == ds.labels) < 0.65


def test_csv_round_trip_is_exact(tmp_path):
    ds = D.gen_shifted_gaussians(50, 3, [0.1, 0.2, 0.3], seed=2, domain_id="g")
    D.export_csv(ds, tmp_path / "g.csv")
    back = D.ingest_csv(tmp_path / "g.csv", "g")
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_unlabeled_csv(tmp_path):
    p = tmp_path / "u.csv"
    p.write_text("f0,f1\n1.0,2.0\n3.0,4.0\n")
    assert not D.ingest_csv(p).labeled


@pytest.mark.parametrize("text,where", [
    ("a,b\n1,2\n", "line 1"),
    ("f0,f1\n1,2\n3\n", "line 3"),
    ("f0,label\n1,x\n", "line 2"),
    ("f0\nnan\n", "line 2"),
])
def test_malformed_csv_names_the_line(tmp_path, text, where):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(D.DataError, match=where):
        D.ingest_csv(p)


def test_non_finite_features_rejected():
    with pytest.raises(D.DataError):
        D.DomainDataset("x", np.array([[np.inf]]))
