"""Interaction logic on top of the estimates: touch plane, cursor, pinch, pressure trials, Fitts fits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import handmodel as hm
from .errors import DegenerateRegression, EmptyFingerSet, MissingPlane, NonMonotoneTime
from .geometry import TouchPlane, fit_plane_svd

PINCH_THRESHOLD = 0.005
CURSOR_SCALE = (23000.0, 11000.0)  # screen units per metre
HOLD_S = 3.0
TIMEOUT_S = 10.0
DRAG_TIMEOUT_S = 15.0

TRIAL_LOG_COLUMNS = (
    "trial_id",
    "finger_set",
    "D_mm",
    "W_mm",
    "target_center_g",
    "target_width_g",
    "outcome",
    "MT_ms",
    "PST_ms",
    "CT_ms",
)


def finger_combinations():
    """The 13 finger sets used for pressure trials, from the bundled JSON."""
    text = resources.files("handpress").joinpath("data/finger_combinations.json").read_text()
    combos = [tuple(c) for c in json.loads(text)["combinations"]]
    for c in combos:
        for f in c:
            if f not in hm.FINGERS:
                raise ValueError(f"unknown finger {f!r} in finger_combinations.json")
    return combos


# ---------------------------------------------------------------- geometry
def define_plane_from_fingertips(tips, cam_x=(1.0, 0.0, 0.0), cam_z=(0.0, 0.0, 1.0)) -> TouchPlane:
    """Touch plane through five camera-frame fingertips."""
    tips = np.asarray(tips, dtype=float)
    if tips.shape != (5, 3):
        raise ValueError(f"expected 5 x 3 fingertips, got {tips.shape}")
    return fit_plane_svd(tips, cam_x, cam_z)


@dataclass(frozen=True)
class CursorMapping:
    scale_x: float = CURSOR_SCALE[0]
    scale_y: float = CURSOR_SCALE[1]
    mode: str = "hand-local-axes"  # or "plane-uv"

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValueError("cursor scales must be positive")
        if self.mode not in ("hand-local-axes", "plane-uv"):
            raise ValueError(f"unknown cursor mode {self.mode!r}")


def map_cursor(fingertip, mapping: CursorMapping = CursorMapping(), plane: TouchPlane | None = None):
    """Absolute screen position of a fingertip."""
    p = np.asarray(fingertip, dtype=float)
    if mapping.mode == "plane-uv":
        if plane is None:
            raise MissingPlane("plane-uv mapping needs a touch plane")
        x, y = plane.to_plane_coords(p)
    else:
        x, y = p[0], p[1]
    return float(x * mapping.scale_x), float(y * mapping.scale_y)


def detect_pinch(thumb_tip, index_tip, threshold=PINCH_THRESHOLD):
    d = np.linalg.norm(np.asarray(thumb_tip, dtype=float) - np.asarray(index_tip, dtype=float))
    return bool(d < threshold)


def aggregate_fingertip_pressure(pv, regions=None, fingers=hm.FINGERS):
    """Per-finger region sums (g) and their mean over ``fingers``."""
    fingers = tuple(fingers)
    if not fingers:
        raise EmptyFingerSet("need at least one finger")
    regions = regions or hm.FingertipRegions.default()
    pv = np.asarray(pv, dtype=float)
    per = {f: float(pv[regions[f]].sum()) for f in fingers}
    return per, float(np.mean(list(per.values())))


# ---------------------------------------------------------------- pressure trials
@dataclass(frozen=True)
class TrialSpec:
    fingers: tuple = ("index",)
    center: float = 1000.0  # g
    width: float = 1000.0  # g
    hold: float = HOLD_S
    timeout: float = TIMEOUT_S

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("target width must be positive")
        if not 0 <= self.hold <= self.timeout:
            raise ValueError("hold must lie in [0, timeout]")
        if not self.fingers:
            raise EmptyFingerSet("a trial needs at least one finger")

    @property
    def low(self):
        return self.center - self.width / 2

    @property
    def high(self):
        return self.center + self.width / 2

    def in_range(self, reading):
        return self.low <= reading <= self.high


@dataclass(frozen=True)
class TrialState:
    """One pressure trial.

    ``phase`` is "moving" (before the pressure stage or out of range),
    "in-range", "succeeded" or "failed". ``entered_at`` is the start of the
    current in-range run and ``at`` the time of the terminal event. The
    pressure stage starts at ``pressure_onset``; earlier readings are ignored.
    """

    phase: str = "moving"
    clock: float = 0.0
    onset: float = 0.0
    pressure_onset: float | None = 0.0
    entered_at: float | None = None
    at: float | None = None

    @property
    def terminal(self):
        return self.phase in ("succeeded", "failed")


def start_trial(t0=0.0, with_drag=False):
    """Fresh trial at ``t0``; a drag trial starts its pressure stage on :func:`enter_target`."""
    return TrialState(clock=t0, onset=t0, pressure_onset=None if with_drag else t0)


def enter_target(state: TrialState, t):
    """Mark the end of the drag movement; the pressure stage begins at ``t``."""
    if t < state.clock:
        raise NonMonotoneTime(f"time went backwards: {t} < {state.clock}")
    if state.terminal or state.pressure_onset is not None:
        return replace(state, clock=t)
    return replace(state, clock=t, pressure_onset=t)


def step_pressure_trial(state: TrialState, spec: TrialSpec, reading, t) -> TrialState:
    """Advance to time ``t`` with a new sample; the previous sample held since ``state.clock``.

    Success happens the instant a run of in-range readings reaches ``hold``
    (bounds inclusive, success exactly at the deadline counts); failure at
    ``onset + timeout`` otherwise. Terminal states only advance the clock.
    """
    if t < state.clock:
        raise NonMonotoneTime(f"time went backwards: {t} < {state.clock}")
    if state.terminal:
        return replace(state, clock=t)
    deadline = state.onset + spec.timeout
    # the interval [clock, t) carried the previous reading
    if state.phase == "in-range":
        done = state.entered_at + spec.hold
        if done <= t and done <= deadline:
            return replace(state, phase="succeeded", clock=t, at=done)
    if t >= deadline:
        return replace(state, phase="failed", clock=t, at=deadline, entered_at=None)
    if state.pressure_onset is None:
        return replace(state, clock=t)
    if spec.in_range(reading):
        entered = state.entered_at if state.phase == "in-range" else t
        if entered + spec.hold <= t:
            return replace(state, phase="succeeded", clock=t, entered_at=entered, at=entered + spec.hold)
        return replace(state, phase="in-range", clock=t, entered_at=entered)
    return replace(state, phase="moving", clock=t, entered_at=None)


def finish_trial(state: TrialState, spec: TrialSpec):
    """Close a trial whose trace ended early: resolve a pending hold or the timeout."""
    if state.terminal:
        return state
    deadline = state.onset + spec.timeout
    if state.phase == "in-range":
        done = state.entered_at + spec.hold
        if done <= deadline:
            return replace(state, phase="succeeded", clock=max(state.clock, done), at=done)
    return replace(state, phase="failed", clock=max(state.clock, deadline), at=deadline, entered_at=None)


def run_trial(spec: TrialSpec, trace, t0=0.0, target_entry=None):
    """Replay ``[(t, reading), ...]`` and close the trial; readings are held until the next sample."""
    state = start_trial(t0, with_drag=target_entry is not None)
    last = None
    for t, r in trace:
        if target_entry is not None and state.pressure_onset is None and t >= target_entry:
            state = _begin_pressure(state, spec, target_entry, last)
            if state.terminal:
                return state
        state = step_pressure_trial(state, spec, r, t)
        last = r
        if state.terminal:
            return state
    if target_entry is not None and state.pressure_onset is None:
        state = _begin_pressure(state, spec, max(target_entry, state.clock), last)
    return finish_trial(state, spec)


def _begin_pressure(state, spec, t, held):
    # the reading held across the entry instant counts from the entry on
    state = enter_target(state, t)
    if held is None:
        return state
    return step_pressure_trial(state, spec, held, t)


def trial_times(state: TrialState):
    """``(CT, PST, MT)`` in ms for a successful trial, ``None`` otherwise.

    MT runs from onset to the start of the pressure stage, PST from there to
    success and CT covers both.
    """
    if state.phase != "succeeded":
        return None
    po = state.onset if state.pressure_onset is None else state.pressure_onset
    ct = (state.at - state.onset) * 1000.0
    pst = (state.at - po) * 1000.0
    mt = (po - state.onset) * 1000.0
    return ct, pst, mt


def write_trial_log(path, rows):
    """CSV trial log; ``rows`` are dicts keyed by :data:`TRIAL_LOG_COLUMNS`."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRIAL_LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            r = dict(r)
            if isinstance(r.get("finger_set"), (list, tuple)):
                r["finger_set"] = "+".join(r["finger_set"])
            w.writerow({k: r.get(k, "") for k in TRIAL_LOG_COLUMNS})


def read_trial_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(TRIAL_LOG_COLUMNS):
        raise ValueError(f"{path}: unexpected columns {sorted(rows[0])}")
    return rows


# ---------------------------------------------------------------- Fitts analysis
def index_of_difficulty(D, W):
    return np.log2(2.0 * np.asarray(D, dtype=float) / np.asarray(W, dtype=float))


def fitts_analysis(trials):
    """Least-squares ``MT = a + k ID`` over trials ``{D, W, MT}`` (metres, ms).

    Throughput is ``1000 / k`` in bit/s.
    """
    trials = list(trials)
    D = np.array([t["D"] for t in trials], dtype=float)
    W = np.array([t["W"] for t in trials], dtype=float)
    MT = np.array([t["MT"] for t in trials], dtype=float)
    if np.any(D <= 0) or np.any(W <= 0):
        raise ValueError("distances and widths must be positive")
    ID = index_of_difficulty(D, W)
    if ID.size < 2 or np.ptp(ID) <= 1e-12 * max(1.0, float(np.max(np.abs(ID)))):
        raise DegenerateRegression("need at least two distinct indices of difficulty")
    A = np.stack([np.ones_like(ID), ID], axis=1)
    (a, k), *_ = np.linalg.lstsq(A, MT, rcond=None)
    return {
        "slope_ms_per_bit": float(k),
        "intercept_ms": float(a),
        "throughput_bits_per_s": float(1000.0 / k) if k != 0 else float("inf"),
        "ids": ID.tolist(),
    }
