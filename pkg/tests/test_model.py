import json
import math

import numpy as np
import pytest

from boundtrap import model as md


def test_feedback_system_broadcasts():
    s = md.feedback_system(1.0, 0.5, [0.2, 0.4, 0.9])
    assert s.n == 3
    assert np.all(s.omegas == 1.0) and np.all(s.gammas == 0.5)
    assert md.validate(s) == []


def test_default_window_spans_twenty_linewidths():
    s = md.feedback_system([1.0, 2.0], [0.5, 1.0], [0.3, 0.6])
    assert s.frequency_window == pytest.approx((1.0 - 20.0, 2.0 + 20.0))


@pytest.mark.parametrize(
    "emitters,needle",
    [
        ([], "no emitters"),
        ([(1.0, -1.0, 1.0)], "negative decay rate @ emitter 1"),
        ([(1.0, 1.0, 0.0)], "non-positive delay @ emitter 1"),
        ([(1.0, 1.0, 1.0), (1.0, 1.0, 0.5)], "delays not strictly increasing"),
        ([(float("nan"), 1.0, 1.0)], "non-finite frequency @ emitter 1"),
    ],
)
def test_validate_diagnostics(emitters, needle):
    s = md.SystemSpec(tuple(md.EmitterSpec(*e) for e in emitters))
    assert any(needle in p for p in md.validate(s))


def test_window_must_contain_frequencies():
    s = md.SystemSpec((md.EmitterSpec(5.0, 1.0, 1.0),), window=(0.0, 1.0))
    assert any("window" in p for p in md.validate(s))


def test_bound_state_condition():
    assert md.bound_state_condition(md.feedback_system(math.pi / 2, 1.0, 2.0)) == [True]
    assert md.bound_state_condition(md.feedback_system(1.0, 1.0, 2.0)) == [False]
    assert md.is_degenerate_feedback(md.feedback_system(2 * math.pi, 1.0, [0.5, 1.0]))
    assert not md.is_degenerate_feedback(md.feedback_system([2 * math.pi, 4 * math.pi], 1.0, [0.5, 1.0]))


def test_coupling_values():
    s = md.feedback_system(1.0, 4.0, [0.5, 1.0])
    w = 0.7
    assert md.coupling_value(s, 2, w) == pytest.approx(2j * 2.0 * math.sin(w * 1.0))
    assert abs(md.coupling_value(md.feedback_system(math.pi / 2, 1.0, 2.0), 1, math.pi / 2)) < 1e-15
    with pytest.raises(IndexError):
        md.coupling_value(s, 3, w)
    with pytest.raises(IndexError):
        md.coupling_value(s, 0, w)


def test_dict_roundtrip(tmp_path):
    s = md.feedback_system([1.0, 1.5], [0.5, 1.0], [0.3, 0.6], window=(-5.0, 8.0))
    d = md.system_to_dict(s)
    assert md.system_from_dict(d) == s
    p = tmp_path / "sys.json"
    p.write_text(json.dumps(d))
    assert md.load_system(p) == s


@pytest.mark.parametrize(
    "cfg",
    [
        {},
        {"emitters": [{"omega": 1.0, "gamma": 1.0}]},
        {"emitters": [{"omega": 1.0, "gamma": 1.0, "delay": -1.0}]},
        {"emitters": [{"omega": 1.0, "gamma": 1.0, "delay": 1.0}], "window": {"min": 0.0}},
    ],
)
def test_config_errors(cfg):
    with pytest.raises(md.ConfigError):
        md.system_from_dict(cfg)


def test_load_missing_file(tmp_path):
    with pytest.raises(md.ConfigError):
        md.load_system(tmp_path / "nope.json")
