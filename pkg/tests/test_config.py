from dataclasses import fields

import pytest

from snncl.config import ClConfig, describe


def test_defaults_roundtrip_through_text():
    cfg = ClConfig()
    assert ClConfig.from_text(cfg.to_text()) == cfg


def test_overrides_roundtrip():
    cfg = ClConfig(lambda_u=0.0, theta_th=0.3, td_normalize=False, M=32, eta2=1e-4)
    back = ClConfig.from_text(cfg.to_text())
    assert back == cfg and back.to_text() == cfg.to_text()


def test_partial_file_keeps_defaults():
    cfg = ClConfig.from_text("# comment\ntheta_th=0.2\n\nseed=7\n")
    assert cfg.theta_th == 0.2 and cfg.seed == 7 and cfg.M == ClConfig().M


@pytest.mark.parametrize("text, where", [
    ("seed=1\nbogus=2\n", "line 2"),
    ("M=three\n", "line 1"),
    ("seed=1\ntd_normalize=perhaps\n", "line 2"),
])
def test_bad_lines_are_named(text, where):
    with pytest.raises(ValueError, match=where):
        ClConfig.from_text(text, "cfg.txt")


def test_validation():
    with pytest.raises(ValueError):
        ClConfig(lambda_u=-1)
    with pytest.raises(ValueError):
        ClConfig(theta_th=-0.1)
    with pytest.raises(ValueError):
        ClConfig(n_s=0)


def test_hyper_gating():
    assert ClConfig().hyper().gram_learning
    assert ClConfig(lambda_u=0.0).hyper().gram_learning
    assert not ClConfig(lambda_u=0.0, lambda_s=0.0).hyper().gram_learning
    assert ClConfig(lambda_u=0.5).hyper().learn_scale == 0.5


def test_describe_lists_every_key():
    text = describe()
    assert all(f.name in text for f in fields(ClConfig))
