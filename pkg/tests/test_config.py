import json

import pytest

from fada import config as C


def test_defaults_validate():
    cfg = C.from_dict({})
    assert len(cfg.domains.sources) == 4
    assert cfg.ablation == C.AblationFlags(True, True, True)


def test_nested_override_and_round_trip():
    cfg = C.from_dict({"seed": 3, "lr": {"source": 0.02}, "domains": {"target": {"rotation_deg": 10}}})
    assert cfg.lr.source == 0.02 and cfg.lr.target == 0.01
    assert C.from_dict(cfg.to_dict()) == cfg


def test_all_problems_reported_together():
    with pytest.raises(C.ConfigError) as exc:
        C.from_dict({"rounds": -1, "batch_size": 1, "bogus": 2, "lr": {"source": "fast"}})
    text = " | ".join(exc.value.problems)
    for key in ("rounds", "batch_size", "bogus", "lr.source"):
        assert key in text


@pytest.mark.parametrize("name", ["svhn", "DomainNet", "mnist-m", "office31"])
def test_paper_scale_datasets_refused(name):
    with pytest.raises(C.ConfigError, match="desk-scale"):
        C.from_dict({"domains": {"target": {"kind": name}}})


@pytest.mark.parametrize("preset,flags", [("source_only", (False, False, False)), ("I", (True, False, False)),
                                          ("II", (True, True, False)), ("III", (True, True, True))])
def test_ablation_presets(preset, flags):
    a = C.RunConfig().with_ablation(preset).ablation
    assert (a.attention, a.adversarial, a.disentangle) == flags


def test_inconsistent_ablation_rejected():
    with pytest.raises(C.ConfigError):
        C.from_dict({"ablation": {"attention": True, "adversarial": False, "disentangle": True}})


def test_force_mask_must_be_a_distribution():
    with pytest.raises(C.ConfigError):
        C.from_dict({"attention": {"force_mask": [0.5, 0.5, 0.5, 0.5]}})


def test_seed_env_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1}))
    assert C.load_config(p, env={"FADA_SEED": "42"}).seed == 42
    with pytest.raises(C.ConfigError):
        C.load_config(p, env={"FADA_SEED": "x"})


def test_unreadable_file(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load_config(tmp_path / "missing.json")


def test_bound_config_validation():
    assert C.from_dict({"sweep": "validity"}, C.BoundConfig).sweep == "validity"
    with pytest.raises(C.ConfigError):
        C.from_dict({"sweep": "other", "delta": 2.0}, C.BoundConfig)
