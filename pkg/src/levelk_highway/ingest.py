"""Trajectory-data ingestion: parsing, cleaning and empirical policy extraction.

Reads NGSIM-style CSV trajectory files, repairs physically impossible
velocity jumps, recomputes accelerations with five-point stencils, clamps
lanes to the 5-lane model, reconstructs every driver's quantized
observations and discrete actions at a fixed decision tick, and turns the
resulting (state, action) sequences into per-driver stochastic policies.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import AccelerationModel, classify_acceleration
from .env import EnvParams, bin_observation, encode_continuous, neighbors_from_arrays

FEET_TO_METERS = 0.3048

DEFAULT_COLUMNS = {
    "vehicle_id": "Vehicle_ID",
    "frame": "Frame_ID",
    "y": "Local_Y",
    "v": "v_Vel",
    "lane": "Lane_ID",
}

PDF_FLOOR = 0.01


class MissingColumnError(ValueError):
    pass


class EmptyFileError(ValueError):
    pass


class AllSamplesBadError(ValueError):
    """Velocity repair found nothing trustworthy beyond the first sample."""


class TooShortSeriesError(ValueError):
    pass


@dataclass
class TrajectorySegment:
    """A gap-free run of one vehicle's records at a uniform frame step."""

    vehicle_id: int
    frames: np.ndarray  # integer frame numbers, consecutive
    y: np.ndarray       # longitudinal position, m
    lane: np.ndarray    # integer lane ids
    v: np.ndarray       # speed, m/s
    a: np.ndarray | None = None  # recomputed acceleration, m/s^2

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class ParseResult:
    segments: list[TrajectorySegment]
    skipped_rows: int


def parse_trajectories(
    path: str | Path,
    columns: dict[str, str] | None = None,
    feet: bool = False,
) -> ParseResult:
    """Read a trajectory CSV and group it into per-vehicle, gap-free segments.

    Unparseable rows are skipped and counted; frame gaps split a vehicle's
    records into separate segments; with ``feet`` set, positions and speeds
    convert to meters.

    Raises:
        EmptyFileError: the file holds no data rows.
        MissingColumnError: a required column is absent from the header.
    """
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)
    rows: dict[int, dict[int, tuple[float, int, float]]] = {}
    skipped = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyFileError(f"{path}: no header row")
        missing = [name for name in cols.values() if name not in reader.fieldnames]
        if missing:
            raise MissingColumnError(f"{path}: missing columns {missing}")
        for row in reader:
            try:
                vid = int(float(row[cols["vehicle_id"]]))
                frame = int(float(row[cols["frame"]]))
                y = float(row[cols["y"]])
                v = float(row[cols["v"]])
                lane = int(float(row[cols["lane"]]))
            except (TypeError, ValueError, KeyError):
                skipped += 1
                continue
            per_vehicle = rows.setdefault(vid, {})
            if frame in per_vehicle:
                skipped += 1  # duplicate frame, keep the first
                continue
            per_vehicle[frame] = (y, lane, v)
    if not rows:
        raise EmptyFileError(f"{path}: no usable data rows")

    scale = FEET_TO_METERS if feet else 1.0
    segments: list[TrajectorySegment] = []
    for vid in sorted(rows):
        frames = np.array(sorted(rows[vid]))
        breaks = np.where(np.diff(frames) != 1)[0] + 1
        for chunk in np.split(frames, breaks):
            ys = np.array([rows[vid][f][0] for f in chunk]) * scale
            lanes = np.array([rows[vid][f][1] for f in chunk])
            vs = np.array([rows[vid][f][2] for f in chunk]) * scale
            segments.append(
                TrajectorySegment(vehicle_id=vid, frames=chunk, y=ys, lane=lanes, v=vs)
            )
    return ParseResult(segments=segments, skipped_rows=skipped)


def clamp_lanes(segments: list[TrajectorySegment], max_lane: int = 5) -> list[TrajectorySegment]:
    """Fold lanes beyond the model's rightmost lane onto it (in place)."""
    for seg in segments:
        np.minimum(seg.lane, max_lane, out=seg.lane)
    return segments


def repair_velocities(v: np.ndarray, dt: float, jump_threshold: float = 10.0) -> np.ndarray:
    """Replace physically impossible velocity jumps by linear interpolation.

    A sample is bad when the change from the last good sample implies a mean
    acceleration above ``jump_threshold``; a bad run between good samples is
    re-drawn on the straight line between them.  A trailing bad run is held
    at the last good value.

    Raises:
        AllSamplesBadError: every sample after the first is bad.
    """
    v = np.asarray(v, dtype=float)
    if len(v) < 4:
        raise ValueError("series too short to repair (need >= 4 samples)")
    out = v.copy()
    n = len(out)
    good = 0
    any_good_after_anchor = False
    i = 1
    while i < n:
        if abs(out[i] - out[good]) <= jump_threshold * dt * (i - good) + 1e-12:
            good = i
            any_good_after_anchor = True
            i += 1
            continue
        # bad run starts at i; find the next good sample relative to `good`
        j = i + 1
        while j < n and abs(out[j] - out[good]) > jump_threshold * dt * (j - good) + 1e-12:
            j += 1
        if j < n:
            r = j - good - 1
            step = (out[j] - out[good]) / (r + 1)
            for k in range(1, r + 1):
                out[good + k] = out[good] + k * step
            good = j
            any_good_after_anchor = True
            i = j + 1
        else:
            if not any_good_after_anchor:
                raise AllSamplesBadError(
                    "no velocity sample is consistent with the first one"
                )
            out[i:] = out[good]
            break
    return out


# Five-point first-derivative stencils, coefficients over 12*dt.
_STENCIL_FIRST = np.array([-25.0, 48.0, -36.0, 16.0, -3.0])
_STENCIL_SECOND = np.array([-3.0, -10.0, 18.0, -6.0, 1.0])
_STENCIL_CENTER = np.array([1.0, -8.0, 0.0, 8.0, -1.0])


def recompute_accelerations(v: np.ndarray, dt: float) -> np.ndarray:
    """Differentiate a velocity series with five-point stencils.

    Interior points use the central stencil; the two points at each end use
    the one-sided and offset stencils, so every position is exact for
    polynomial series up to degree 4.

    Raises:
        TooShortSeriesError: fewer than 5 samples.
    """
    v = np.asarray(v, dtype=float)
    n = len(v)
    if n < 5:
        raise TooShortSeriesError("need at least 5 samples for the five-point stencils")
    a = np.empty(n)
    denom = 12.0 * dt
    a[0] = _STENCIL_FIRST @ v[:5] / denom
    a[1] = _STENCIL_SECOND @ v[:5] / denom
    a[-2] = -(_STENCIL_SECOND @ v[-1:-6:-1]) / denom
    a[-1] = -(_STENCIL_FIRST @ v[-1:-6:-1]) / denom
    core = np.convolve(v, _STENCIL_CENTER[::-1], mode="valid") / denom
    a[2:-2] = core
    return a


def clean_segments(
    segments: list[TrajectorySegment],
    dt: float,
    jump_threshold: float = 10.0,
) -> tuple[list[TrajectorySegment], int]:
    """Repair velocities and recompute accelerations; drop hopeless segments.

    Returns the surviving segments and the number rejected (too short or
    with unusable velocity series).
    """
    kept: list[TrajectorySegment] = []
    rejected = 0
    for seg in segments:
        if len(seg) < 5:
            rejected += 1
            continue
        try:
            seg.v = repair_velocities(seg.v, dt, jump_threshold)
        except AllSamplesBadError:
            rejected += 1
            continue
        seg.a = recompute_accelerations(seg.v, dt)
        kept.append(seg)
    return kept, rejected


@dataclass(frozen=True)
class TickRecord:
    """One decision of one driver: quantized state, action, continuous view."""

    state_index: int
    action: int
    features: np.ndarray  # 19-dim continuous encoding of the same observation


def reconstruct_states_actions(
    segments: list[TrajectorySegment],
    frame_dt: float,
    tick_seconds: float = 1.0,
    params: EnvParams | None = None,
    model: AccelerationModel | None = None,
    road_length: float | None = None,
) -> dict[int, list[TickRecord]]:
    """Rebuild each driver's (state, action) sequence at the decision tick.

    At every tick boundary the driver's surroundings (all vehicles present in
    that frame) become a quantized observation; the action over the following
    tick is a lane change if the lane id differs at tick end, otherwise the
    mean acceleration over the tick classified onto the discrete actions.
    ``road_length`` wraps positions on a circle (simulator-generated data);
    None means a straight road segment.
    """
    params = params or EnvParams()
    model = model or AccelerationModel()
    tick = max(1, round(tick_seconds / frame_dt))

    by_frame: dict[int, list[tuple[int, int]]] = {}
    for si, seg in enumerate(segments):
        for off, frame in enumerate(seg.frames):
            by_frame.setdefault(int(frame), []).append((si, off))

    out: dict[int, list[TickRecord]] = {}
    for si, seg in enumerate(segments):
        for off in range(0, len(seg) - tick, tick):
            frame = int(seg.frames[off])
            present = by_frame[frame]
            ys = np.array([segments[s].y[o] for s, o in present])
            lanes = np.array([segments[s].lane[o] for s, o in present])
            vs = np.array([segments[s].v[o] for s, o in present])
            ego_pos = next(i for i, (s, _) in enumerate(present) if s == si)
            raw = neighbors_from_arrays(
                ys, lanes, vs, ego_pos, params.sensing_range, road_length
            )
            state_index = bin_observation(raw, params).index()
            features = encode_continuous(raw, params)

            lane_now = int(seg.lane[off])
            lane_then = int(seg.lane[off + tick])
            if lane_then > lane_now:
                action = classify_acceleration(0.0, "left", model)
            elif lane_then < lane_now:
                action = classify_acceleration(0.0, "right", model)
            else:
                mean_a = (seg.v[off + tick] - seg.v[off]) / (tick * frame_dt)
                action = classify_acceleration(mean_a, "none", model)
            out.setdefault(seg.vehicle_id, []).append(
                TickRecord(state_index=state_index, action=int(action), features=features)
            )
    return out


def floor_pdf(pdf: np.ndarray, floor: float = PDF_FLOOR) -> np.ndarray:
    """Push probabilities below ``floor`` up to it, rescaling the rest to sum 1.

    Rescaling is applied only to the above-floor entries (iterating in case
    it drags one of them under), so the result really does satisfy
    min >= floor and sum == 1.
    """
    p = np.asarray(pdf, dtype=float).copy()
    if len(p) * floor > 1.0 + 1e-12:
        raise ValueError("floor too large for the number of outcomes")
    for _ in range(len(p)):
        low = p < floor - 1e-15
        if not low.any():
            break
        p[low] = floor
        high = ~low
        remaining = 1.0 - floor * low.sum()
        p[high] = p[high] * remaining / p[high].sum()
    return p


@dataclass
class EmpiricalPolicy:
    """Per-driver map from quantized state to an action pdf with visit counts."""

    driver_id: int
    states: dict[int, tuple[int, np.ndarray]] = field(default_factory=dict)

    def visited(self, n_limit: int = 1) -> list[int]:
        return sorted(s for s, (n, _) in self.states.items() if n >= n_limit)


def build_empirical_policy(
    sequences: dict[int, list[TickRecord]], n_actions: int = 7
) -> list[EmpiricalPolicy]:
    """Frequency-count action pdfs per visited state, floored and renormalized."""
    policies = []
    for driver_id in sorted(sequences):
        counts: dict[int, np.ndarray] = {}
        for rec in sequences[driver_id]:
            counts.setdefault(rec.state_index, np.zeros(n_actions))[rec.action] += 1
        states = {
            s: (int(c.sum()), floor_pdf(c / c.sum())) for s, c in counts.items()
        }
        policies.append(EmpiricalPolicy(driver_id=driver_id, states=states))
    return policies


def empirical_to_json(policy: EmpiricalPolicy) -> dict:
    return {
        "driver_id": policy.driver_id,
        "states": [
            {"state_index": s, "visits": n, "pdf": pdf.tolist()}
            for s, (n, pdf) in sorted(policy.states.items())
        ],
    }


def empirical_from_json(doc: dict) -> EmpiricalPolicy:
    states = {
        int(entry["state_index"]): (int(entry["visits"]), np.array(entry["pdf"], dtype=float))
        for entry in doc["states"]
    }
    return EmpiricalPolicy(driver_id=int(doc["driver_id"]), states=states)


def save_empirical_policies(policies: list[EmpiricalPolicy], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for pol in policies:
        p = out_dir / f"driver_{pol.driver_id}.empirical.json"
        p.write_text(json.dumps(empirical_to_json(pol), indent=1))
        paths.append(p)
    return paths


def load_empirical_policies(path: str | Path) -> list[EmpiricalPolicy]:
    """Load per-driver policy JSONs from a directory (or one combined file)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.empirical.json"))
        if not files:
            raise FileNotFoundError(f"no *.empirical.json files under {path}")
        return [empirical_from_json(json.loads(p.read_text())) for p in files]
    doc = json.loads(path.read_text())
    if isinstance(doc, list):
        return [empirical_from_json(d) for d in doc]
    return [empirical_from_json(doc)]
