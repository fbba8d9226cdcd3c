import math

import numpy as np
import pytest
from conftest import vec
from hypothesis import given
from oracles import SCRIPTED_TRACES, trial_oracle

from handpress import handmodel as hm
from handpress import interact as ia
from handpress.errors import DegenerateConfiguration, DegenerateRegression, EmptyFingerSet, MissingPlane, NonMonotoneTime


def fitts_fixture(slope, intercept=150.0):
    """Noiseless trials over a grid of distances and widths (metres, ms)."""
    trials = []
    for D in (0.02, 0.05, 0.1, 0.2):
        for W in (0.005, 0.01, 0.02):
            trials.append({"D": D, "W": W, "MT": intercept + slope * math.log2(2 * D / W)})
    return trials


# ---------------------------------------------------------------- plane, cursor, pinch
def test_plane_from_fingertips(rng):
    tips = np.column_stack([rng.uniform(-0.05, 0.05, (5, 2)), np.full(5, 0.3)])
    pl = ia.define_plane_from_fingertips(tips)
    assert np.max(np.abs(pl.signed_distance(tips))) < 1e-12
    assert abs(pl.u @ pl.n) < 1e-9 and abs(np.linalg.norm(pl.u) - 1) < 1e-9
    noisy = tips + rng.normal(0, 0.001, tips.shape)
    pl = ia.define_plane_from_fingertips(noisy)
    assert np.sqrt(np.mean(pl.signed_distance(noisy) ** 2)) <= np.sqrt(np.mean((noisy[:, 2] - 0.3) ** 2))
    with pytest.raises(DegenerateConfiguration):
        ia.define_plane_from_fingertips(np.outer(np.arange(5.0), [1, 0, 0]))
    with pytest.raises(ValueError):
        ia.define_plane_from_fingertips(tips[:4])


def test_cursor_mapping(rng):
    assert ia.map_cursor([0, 0, 0]) == (0.0, 0.0)
    x, y = ia.map_cursor([0.01, 0.01, 0.2])
    assert abs(x - 230) < 1e-9 and abs(y - 110) < 1e-9
    tips = np.column_stack([rng.uniform(-0.05, 0.05, (5, 2)), rng.uniform(0.29, 0.31, 5)])
    pl = ia.define_plane_from_fingertips(tips)
    uv = ia.CursorMapping(mode="plane-uv")
    p = pl.origin + 0.003 * pl.n
    a = ia.map_cursor(p, uv, pl)
    b = ia.map_cursor(p + 0.01 * pl.u, uv, pl)
    assert abs(b[0] - a[0] - 230) < 1e-9 and abs(b[1] - a[1]) < 1e-9
    with pytest.raises(MissingPlane):
        ia.map_cursor(p, uv)
    with pytest.raises(ValueError):
        ia.CursorMapping(scale_x=0)


@given(vec(3, -0.2, 0.2), vec(3, -0.2, 0.2))
def test_cursor_is_linear(p, q):
    m = np.array(ia.map_cursor((p + q) / 2))
    assert np.allclose(m, (np.array(ia.map_cursor(p)) + np.array(ia.map_cursor(q))) / 2, atol=1e-9)


def test_pinch_threshold():
    assert ia.detect_pinch([0, 0, 0], [0.004, 0, 0])
    assert not ia.detect_pinch([0, 0, 0], [0.005, 0, 0])
    assert not ia.detect_pinch([0, 0, 0], [0.006, 0, 0])


def test_aggregate_fingertip_pressure():
    regions = hm.FingertipRegions.default()
    pv = np.zeros(hm.N_VERTS)
    per, mean = ia.aggregate_fingertip_pressure(pv)
    assert mean == 0 and all(v == 0 for v in per.values())
    pv[regions["index"]] = 100.0 / len(regions["index"])
    per, mean = ia.aggregate_fingertip_pressure(pv, fingers=["index"])
    assert abs(per["index"] - 100) < 1e-12 and abs(mean - 100) < 1e-12
    pv[regions["middle"]] = 300.0 / len(regions["middle"])
    assert abs(ia.aggregate_fingertip_pressure(pv, fingers=["index", "middle"])[1] - 200) < 1e-12
    with pytest.raises(EmptyFingerSet):
        ia.aggregate_fingertip_pressure(pv, fingers=[])


def test_finger_combinations():
    combos = ia.finger_combinations()
    assert len(combos) == 13 and len(set(combos)) == 13
    assert sorted(len(c) for c in combos) == [1] * 5 + [2] * 4 + [3] * 2 + [4, 5]


# ---------------------------------------------------------------- trial state machine
def test_trial_examples():
    spec = ia.TrialSpec()
    s = ia.start_trial()
    for t, r in [(0.0, 0.0), (1.0, 1000.0), (2.0, 1000.0), (3.0, 1000.0), (4.0, 1000.0)]:
        s = ia.step_pressure_trial(s, spec, r, t)
    assert s.phase == "succeeded" and s.at == 4.0
    s = ia.run_trial(spec, [(0.0, 0.0), (1.0, 1000.0), (2.0, 0.0), (3.0, 1000.0), (5.0, 1000.0), (7.0, 900.0)])
    assert s.phase == "succeeded" and s.at == 6.0
    s = ia.run_trial(spec, [(t, 100.0) for t in np.arange(0, 12, 0.5)])
    assert s.phase == "failed" and s.at == 10.0


def test_terminal_states_absorb():
    spec = ia.TrialSpec()
    s = ia.run_trial(spec, [(0.0, 1000.0)])
    assert s.phase == "succeeded"
    s2 = ia.step_pressure_trial(s, spec, 0.0, 20.0)
    assert s2.phase == s.phase and s2.at == s.at and s2.clock == 20.0


def test_time_must_not_run_backwards():
    spec = ia.TrialSpec()
    s = ia.step_pressure_trial(ia.start_trial(), spec, 0.0, 2.0)
    with pytest.raises(NonMonotoneTime):
        ia.step_pressure_trial(s, spec, 0.0, 1.0)
    with pytest.raises(ValueError):
        ia.TrialSpec(width=0)
    with pytest.raises(ValueError):
        ia.TrialSpec(hold=11)


@pytest.mark.parametrize("name,kw,trace,t0,entry", SCRIPTED_TRACES, ids=[s[0] for s in SCRIPTED_TRACES])
def test_scripted_trace_matches_interval_oracle(name, kw, trace, t0, entry):
    spec = ia.TrialSpec(**kw)
    state = ia.run_trial(spec, trace, t0, entry)
    outcome, times = trial_oracle(trace, spec.low, spec.high, spec.hold, spec.timeout, t0, entry)
    assert state.phase == outcome
    assert ia.trial_times(state) == times
    if outcome == "failed":
        assert state.at == t0 + spec.timeout


def test_trial_log_round_trip(tmp_path):
    rows = [
        {"trial_id": 1, "finger_set": ("index", "middle"), "target_center_g": 900, "target_width_g": 600, "outcome": "succeeded"},
        {"trial_id": 2, "finger_set": "thumb", "outcome": "failed"},
    ]
    ia.write_trial_log(tmp_path / "log.csv", rows)
    back = ia.read_trial_log(tmp_path / "log.csv")
    assert back[0]["finger_set"] == "index+middle" and back[1]["outcome"] == "failed"
    assert tuple(back[0]) == ia.TRIAL_LOG_COLUMNS


# ---------------------------------------------------------------- Fitts
def test_index_of_difficulty():
    assert ia.index_of_difficulty(0.02, 0.01) == 2.0


def test_noiseless_regression_is_exact():
    res = ia.fitts_analysis(fitts_fixture(300.0, 200.0))
    assert abs(res["slope_ms_per_bit"] - 300) < 1e-9 and abs(res["intercept_ms"] - 200) < 1e-9


@pytest.mark.parametrize("slope,tp", [(132.7, 7.5), (387.3, 2.6), (393.1, 2.5)])
def test_throughput_from_slope(slope, tp):
    assert round(ia.fitts_analysis(fitts_fixture(slope))["throughput_bits_per_s"], 1) == tp


def test_degenerate_regression():
    with pytest.raises(DegenerateRegression):
        ia.fitts_analysis([{"D": 0.02, "W": 0.01, "MT": 300}, {"D": 0.04, "W": 0.02, "MT": 350}])
