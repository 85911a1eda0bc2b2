"""Five-lane circular highway world.

Kinematics, random vehicle placement, ego-relative observation extraction
(raw, binned and continuous encodings), crash detection, reward computation
and the rule-based anchor driver policy.

Conventions used throughout:
  * lanes are numbered 1 (rightmost) to 5 (leftmost); moving "left"
    increases the lane number,
  * longitudinal positions live on a circle of length ``road_length`` and
    are always wrapped into ``[0, road_length)``,
  * relative position ``dx`` is signed with "in front" positive,
  * relative velocity ``dv`` is signed so that negative always means the
    gap is shrinking, for front and rear neighbours alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

N_LANES = 5

# Binned-observation geometry: 9 neighbour slots, 3 position bins and
# 3 velocity bins each, plus the ego lane.
N_SLOTS = 9
N_STATES = 3 ** (2 * N_SLOTS) * N_LANES  # 1937102445

# Slot order is the canonical order used by every encoding and index.
SLOT_NAMES = (
    "front_same",
    "front_left",
    "rear_left",
    "front_right",
    "rear_right",
    "front_left2",
    "rear_left2",
    "front_right2",
    "rear_right2",
)
# (lane offset, is_front) per slot, lane offset relative to the ego lane.
_SLOT_SPEC = (
    (0, True),
    (+1, True),
    (+1, False),
    (-1, True),
    (-1, False),
    (+2, True),
    (+2, False),
    (-2, True),
    (-2, False),
)


class Action(IntEnum):
    MAINTAIN = 0
    ACCELERATE = 1
    DECELERATE = 2
    HARD_ACCELERATE = 3
    HARD_DECELERATE = 4
    MOVE_LEFT = 5
    MOVE_RIGHT = 6


N_ACTIONS = len(Action)

LANE_CHANGE_ACTIONS = (Action.MOVE_LEFT, Action.MOVE_RIGHT)


class PosBin(IntEnum):
    CLOSE = 0
    NOMINAL = 1
    FAR = 2


class VelBin(IntEnum):
    APPROACHING = 0
    STABLE = 1
    MOVING_AWAY = 2


class CapacityError(ValueError):
    """Requested vehicle count does not fit on the road with minimum gaps."""


class UnknownVehicleError(KeyError):
    """Vehicle id not present in the world."""


@dataclass
class EnvParams:
    """Geometry, kinematic limits and reward weights of the highway world."""

    road_length: float = 600.0
    lane_width: float = 3.7
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    sensing_range: float = 100.0
    v_min: float = 0.0
    v_max: float = 24.59
    dt: float = 1.0
    min_gap: float = 11.0            # also the upper edge of the "close" bin
    nominal_gap: float = 27.0        # upper edge of the "nominal" bin
    vel_bin_edge: float = 0.1        # |dv| <= edge is "stable"
    hard_decel_mean: float = 3.5     # braking authority assumed at placement
    w1: float = 500.0                # crash
    w2: float = 10.0                 # speed
    w3: float = 2.0                  # headway
    w4: float = 1.0                  # effort

    @property
    def nominal_speed(self) -> float:
        return (self.v_max + self.v_min) / 2.0


@dataclass
class VehicleState:
    """One car's continuous pose plus lane-change bookkeeping.

    ``maneuver_target`` is the lane being entered while a change is in
    progress (None otherwise); ``maneuver_progress`` runs 0..1 over the
    1-second maneuver.  ``boundary_violation`` marks a commanded move off
    the outermost lanes, which counts as a crash.
    """

    id: int
    x: float
    lane: int
    v_x: float
    accel: float = 0.0
    maneuver_target: int | None = None
    maneuver_progress: float = 0.0
    boundary_violation: bool = False

    def occupied_lanes(self) -> tuple[int, ...]:
        if self.maneuver_target is None or self.maneuver_target == self.lane:
            return (self.lane,)
        return (self.lane, self.maneuver_target)

    def maneuver_label(self) -> str:
        if self.maneuver_target is None:
            return "none"
        direction = "left" if self.maneuver_target > self.lane else "right"
        return f"changing_{direction}({self.maneuver_progress:.2f})"


@dataclass
class WorldState:
    vehicles: list[VehicleState]
    params: EnvParams = field(default_factory=EnvParams)
    time: float = 0.0

    def vehicle(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise UnknownVehicleError(vehicle_id)


Neighbor = tuple[float, float]  # (dx, dv)


@dataclass(frozen=True)
class RawObservation:
    """Ego-relative view: up to 9 neighbours plus the ego lane."""

    own_lane: int
    slots: tuple[Neighbor | None, ...]  # length 9, canonical slot order


@dataclass(frozen=True)
class BinnedObservation:
    own_lane: int
    bins: tuple[tuple[PosBin, VelBin], ...]  # length 9, canonical slot order

    def index(self) -> int:
        """Pack into a unique integer in [0, 3^18 * 5)."""
        t = 0
        for pos_bin, vel_bin in self.bins:
            t = t * 3 + int(pos_bin)
            t = t * 3 + int(vel_bin)
        return t * N_LANES + (self.own_lane - 1)

    @staticmethod
    def from_index(index: int) -> "BinnedObservation":
        if not 0 <= index < N_STATES:
            raise ValueError(f"state index out of range: {index}")
        own_lane = index % N_LANES + 1
        t = index // N_LANES
        digits = []
        for _ in range(2 * N_SLOTS):
            digits.append(t % 3)
            t //= 3
        digits.reverse()
        bins = tuple(
            (PosBin(digits[2 * k]), VelBin(digits[2 * k + 1])) for k in range(N_SLOTS)
        )
        return BinnedObservation(own_lane=own_lane, bins=bins)

    def front_same(self) -> tuple[PosBin, VelBin]:
        return self.bins[0]


def wrap_position(x: float, road_length: float) -> float:
    return x % road_length


def wrapped_gap(x_from: float, x_to: float, road_length: float) -> float:
    """Forward (driving-direction) distance from ``x_from`` to ``x_to``."""
    return (x_to - x_from) % road_length


def lane_capacity(params: EnvParams) -> int:
    """Vehicles per lane at minimum spacing (length + minimum gap)."""
    return int(params.road_length // (params.vehicle_length + params.min_gap))


def init_world(n_d: int, params: EnvParams, rng: np.random.Generator) -> WorldState:
    """Place ``n_d`` vehicles at random with same-lane clear gaps >= min_gap.

    Initial speeds are drawn uniformly in [v_min, v_max] and then clamped so
    every follower that is closing on its leader could still stop in the
    available gap under mean hard braking.

    Raises:
        CapacityError: if ``n_d`` vehicles cannot be placed.
    """
    if n_d < 1:
        raise ValueError("n_d must be >= 1")
    per_lane = lane_capacity(params)
    if n_d > N_LANES * per_lane:
        raise CapacityError(
            f"cannot place {n_d} vehicles: capacity is {N_LANES * per_lane} "
            f"({per_lane} per lane at {params.vehicle_length + params.min_gap:.0f} m spacing)"
        )

    counts = [0] * N_LANES
    lanes_of: list[int] = []
    for _ in range(n_d):
        open_lanes = [l for l in range(N_LANES) if counts[l] < per_lane]
        lane = open_lanes[rng.integers(len(open_lanes))]
        counts[lane] += 1
        lanes_of.append(lane + 1)

    slot = params.vehicle_length + params.min_gap
    positions_by_lane: dict[int, list[float]] = {}
    for lane_idx in range(N_LANES):
        m = counts[lane_idx]
        if m == 0:
            continue
        free = params.road_length - m * slot
        u = np.sort(rng.uniform(0.0, 1.0, size=m))
        offset = rng.uniform(0.0, params.road_length)
        xs = [float((offset + j * slot + u[j] * free) % params.road_length) for j in range(m)]
        positions_by_lane[lane_idx + 1] = xs

    # same-lane traffic starts near a shared lane speed (small jitter), so no
    # pair begins with a closing rate the reactive policies cannot absorb
    lane_speed = {
        lane: float(rng.uniform(params.v_min, params.v_max)) for lane in range(1, N_LANES + 1)
    }
    vehicles: list[VehicleState] = []
    cursor = {lane: 0 for lane in positions_by_lane}
    for vid in range(n_d):
        lane = lanes_of[vid]
        x = positions_by_lane[lane][cursor[lane]]
        cursor[lane] += 1
        v = float(np.clip(lane_speed[lane] + rng.uniform(-2.0, 2.0), params.v_min, params.v_max))
        vehicles.append(VehicleState(id=vid, x=x, lane=lane, v_x=v))

    _clamp_initial_speeds(vehicles, params)
    return WorldState(vehicles=vehicles, params=params)


def _clamp_initial_speeds(vehicles: list[VehicleState], params: EnvParams) -> None:
    """Lower speeds until every same-lane follower can brake out of a closing pair."""
    by_lane: dict[int, list[VehicleState]] = {}
    for v in vehicles:
        by_lane.setdefault(v.lane, []).append(v)
    for group in by_lane.values():
        if len(group) < 2:
            continue
        group.sort(key=lambda v: v.x)
        m = len(group)
        for _ in range(m + 1):
            changed = False
            for j in range(m):
                follower = group[j]
                leader = group[(j + 1) % m]
                gap = wrapped_gap(follower.x, leader.x, params.road_length) - params.vehicle_length
                if follower.v_x > leader.v_x:
                    v_cap = math.sqrt(
                        leader.v_x**2 + 2.0 * params.hard_decel_mean * max(gap, 0.0)
                    )
                    if follower.v_x > v_cap:
                        follower.v_x = v_cap
                        changed = True
            if not changed:
                break


def step_vehicle(
    s: VehicleState,
    a_realized: float,
    dt: float,
    road_length: float,
    v_cap: float | None = None,
) -> VehicleState:
    """Advance one vehicle by ``dt`` under constant acceleration.

    Position uses standard kinematics and wraps on the road circle; speed is
    clamped at zero and, when ``v_cap`` is given, at the speed limit.  A
    lane-change maneuver advances by dt / 1 s and the lane switch commits
    once progress reaches 1 (see commit_lane_changes).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    new_x = wrap_position(s.x + s.v_x * dt + 0.5 * a_realized * dt * dt, road_length)
    new_v = max(0.0, s.v_x + a_realized * dt)
    if v_cap is not None:
        new_v = min(new_v, v_cap)
    out = replace(s, x=new_x, v_x=new_v, accel=a_realized)
    if out.maneuver_target is not None:
        out.maneuver_progress = s.maneuver_progress + dt  # maneuver takes 1 s
    return out


def commit_lane_changes(world: WorldState) -> None:
    """Finalize any maneuver whose progress reached 1 (in place)."""
    for v in world.vehicles:
        if v.maneuver_target is not None and v.maneuver_progress >= 1.0 - 1e-12:
            if 1 <= v.maneuver_target <= N_LANES:
                v.lane = v.maneuver_target
            v.maneuver_target = None
            v.maneuver_progress = 0.0
        v.boundary_violation = False


def apply_action(world: WorldState, vehicle_id: int, action: Action, a_realized: float) -> None:
    """Record a vehicle's commanded action on the world (in place).

    Lane-change commands start a maneuver; a command off lane 1 or 5 raises
    the vehicle's boundary-violation flag (a crash) and the lane is kept.
    """
    v = world.vehicle(vehicle_id)
    v.accel = a_realized
    if action == Action.MOVE_LEFT:
        target = v.lane + 1
    elif action == Action.MOVE_RIGHT:
        target = v.lane - 1
    else:
        return
    if 1 <= target <= N_LANES:
        v.maneuver_target = target
        v.maneuver_progress = 0.0
    else:
        v.boundary_violation = True


def step_world(
    world: WorldState,
    realized: dict[int, tuple[Action, float]],
) -> set[int]:
    """Advance every vehicle one decision period and detect crashes.

    ``realized`` maps vehicle id to (action, realized acceleration).  Crash
    detection runs before lane changes commit so that a changing vehicle is
    collidable in both its source and target lanes for the whole maneuver.

    Returns the set of crashed vehicle ids.
    """
    params = world.params
    for vid, (action, accel) in realized.items():
        apply_action(world, vid, action, accel)
    world.vehicles = [
        step_vehicle(v, v.accel, params.dt, params.road_length, params.v_max)
        for v in world.vehicles
    ]
    world.time += params.dt
    crashed = detect_crashes(world)
    commit_lane_changes(world)
    return crashed


def detect_crashes(world: WorldState) -> set[int]:
    """Ids of vehicles overlapping another (as 5 m x 2 m rectangles) or off-road.

    Two vehicles collide when they share an occupied lane and their wrapped
    longitudinal distance is below one vehicle length.  A vehicle mid
    lane-change occupies both lanes.
    """
    params = world.params
    crashed: set[int] = set()
    occupants: dict[int, list[VehicleState]] = {}
    for v in world.vehicles:
        if v.boundary_violation:
            crashed.add(v.id)
        for lane in v.occupied_lanes():
            occupants.setdefault(lane, []).append(v)
    for lane_vehicles in occupants.values():
        lane_vehicles.sort(key=lambda v: v.x)
        m = len(lane_vehicles)
        for j in range(m):
            a = lane_vehicles[j]
            b = lane_vehicles[(j + 1) % m]
            if a.id == b.id:
                continue
            gap = wrapped_gap(a.x, b.x, params.road_length)
            dist = min(gap, params.road_length - gap)
            if dist < params.vehicle_length:
                crashed.add(a.id)
                crashed.add(b.id)
    return crashed


def neighbors_from_arrays(
    xs: np.ndarray,
    lanes: np.ndarray,
    speeds: np.ndarray,
    ego_index: int,
    sensing_range: float,
    road_length: float | None,
) -> RawObservation:
    """Build the 9-slot ego-relative observation from parallel arrays.

    With ``road_length`` set, distances wrap on the circle; with None the
    road is treated as straight (trajectory-data geometry).  Front slots take
    the nearest car ahead in the slot's lane, rear slots the nearest behind;
    anything farther than ``sensing_range`` is absent.
    """
    ego_lane = int(lanes[ego_index])
    ego_x = float(xs[ego_index])
    ego_v = float(speeds[ego_index])

    by_lane: dict[int, list[tuple[float, int]]] = {}
    for i in range(len(xs)):
        if i == ego_index:
            continue
        by_lane.setdefault(int(lanes[i]), []).append((float(xs[i]), i))

    def nearest(lane: int, front: bool) -> Neighbor | None:
        entries = by_lane.get(lane)
        if not entries:
            return None
        best_i = -1
        best_d = math.inf
        for x, i in entries:
            if road_length is None:
                d = x - ego_x if front else ego_x - x
                if d < 0 or (not front and d == 0):
                    continue
            else:
                d_f = wrapped_gap(ego_x, x, road_length)
                d_r = road_length - d_f
                # a single car is assigned to whichever side it is closer on
                if front:
                    if d_f > d_r:
                        continue
                    d = d_f
                else:
                    if d_f <= d_r:
                        continue
                    d = d_r
            if d < best_d:
                best_d = d
                best_i = i
        if best_i < 0 or best_d > sensing_range:
            return None
        dx = best_d if front else -best_d
        other_v = float(speeds[best_i])
        dv = other_v - ego_v if front else ego_v - other_v
        return (dx, dv)

    slots: list[Neighbor | None] = []
    for offset, front in _SLOT_SPEC:
        lane = ego_lane + offset
        if not 1 <= lane <= N_LANES:
            slots.append(None)
        else:
            slots.append(nearest(lane, front))
    return RawObservation(own_lane=ego_lane, slots=tuple(slots))


def observe(world: WorldState, ego_id: int) -> RawObservation:
    """Ego-relative raw observation of up to 9 surrounding cars."""
    idx = None
    for i, v in enumerate(world.vehicles):
        if v.id == ego_id:
            idx = i
            break
    if idx is None:
        raise UnknownVehicleError(ego_id)
    xs = np.array([v.x for v in world.vehicles])
    lanes = np.array([v.lane for v in world.vehicles])
    speeds = np.array([v.v_x for v in world.vehicles])
    return neighbors_from_arrays(
        xs, lanes, speeds, idx, world.params.sensing_range, world.params.road_length
    )


def bin_position(dx: float | None, params: EnvParams) -> PosBin:
    if dx is None:
        return PosBin.FAR
    d = abs(dx)
    if d < params.min_gap:
        return PosBin.CLOSE
    if d < params.nominal_gap:
        return PosBin.NOMINAL
    return PosBin.FAR


def bin_velocity(dv: float | None, params: EnvParams) -> VelBin:
    if dv is None:
        return VelBin.MOVING_AWAY
    if dv < -params.vel_bin_edge:
        return VelBin.APPROACHING
    if dv <= params.vel_bin_edge:
        return VelBin.STABLE
    return VelBin.MOVING_AWAY


def bin_observation(raw: RawObservation, params: EnvParams | None = None) -> BinnedObservation:
    """Quantize a raw observation; an absent neighbour bins as (far, moving away)."""
    params = params or EnvParams()
    bins = []
    for slot in raw.slots:
        if slot is None:
            bins.append((PosBin.FAR, VelBin.MOVING_AWAY))
        else:
            dx, dv = slot
            bins.append((bin_position(dx, params), bin_velocity(dv, params)))
    return BinnedObservation(own_lane=raw.own_lane, bins=tuple(bins))


def encode_continuous(raw: RawObservation, params: EnvParams | None = None) -> np.ndarray:
    """19-feature vector in [-1, 1]: 9 x (dx, dv) normalized, then own lane.

    Absent neighbours saturate at the sensing range (signed by slot side)
    with zero relative velocity.
    """
    params = params or EnvParams()
    out = np.empty(2 * N_SLOTS + 1)
    for k, slot in enumerate(raw.slots):
        if slot is None:
            front = _SLOT_SPEC[k][1]
            out[2 * k] = 1.0 if front else -1.0
            out[2 * k + 1] = 0.0
        else:
            dx, dv = slot
            out[2 * k] = np.clip(dx / params.sensing_range, -1.0, 1.0)
            out[2 * k + 1] = np.clip(dv / params.v_max, -1.0, 1.0)
    out[2 * N_SLOTS] = (raw.own_lane - 1) / (N_LANES - 1)
    return out


def compute_reward(
    prev: WorldState,
    action: Action,
    next_world: WorldState,
    ego_id: int,
    params: EnvParams | None = None,
    crashed: set[int] | None = None,
) -> float:
    """Weighted sum of crash, speed, headway and effort terms for the ego.

    The crash term comes from the transition into ``next_world``; pass the
    step's pre-commit crash set via ``crashed`` when lane changes have
    already committed, otherwise it is detected from ``next_world`` itself.
    """
    params = params or next_world.params
    ego = next_world.vehicle(ego_id)
    if crashed is None:
        crashed = detect_crashes(next_world)
    c = -1.0 if ego_id in crashed else 0.0
    s = (ego.v_x - params.nominal_speed) / params.v_max
    front = observe(next_world, ego_id).slots[0]
    pos_bin = bin_position(front[0] if front else None, params)
    if pos_bin == PosBin.CLOSE:
        d = -1.0
    elif pos_bin == PosBin.NOMINAL:
        d = 0.0
    else:
        d = 1.0
    e = EFFORT[action]
    return params.w1 * c + params.w2 * s + params.w3 * d + params.w4 * e


EFFORT = {
    Action.MAINTAIN: 0.0,
    Action.ACCELERATE: -0.25,
    Action.DECELERATE: -0.25,
    Action.HARD_ACCELERATE: -0.5,
    Action.HARD_DECELERATE: -0.5,
    Action.MOVE_LEFT: -1.0,
    Action.MOVE_RIGHT: -1.0,
}


def level0_policy(binned: BinnedObservation) -> Action:
    """Reactive car-follower anchor policy; never changes lanes.

    Reacts only to the car directly in front: hard braking when it is close
    and approaching, braking when close/stable or nominal/approaching,
    accelerating when nominal/moving-away or far, maintaining otherwise.
    """
    pos, vel = binned.front_same()
    if pos == PosBin.FAR:
        return Action.ACCELERATE
    if pos == PosBin.CLOSE:
        if vel == VelBin.APPROACHING:
            return Action.HARD_DECELERATE
        if vel == VelBin.STABLE:
            return Action.DECELERATE
        return Action.MAINTAIN
    # nominal
    if vel == VelBin.APPROACHING:
        return Action.DECELERATE
    if vel == VelBin.MOVING_AWAY:
        return Action.ACCELERATE
    return Action.MAINTAIN


SNAPSHOT_FIELDS = ("time", "id", "x", "lane", "v_x", "accel", "maneuver")


def snapshot_rows(world: WorldState) -> list[list]:
    """One replay/debug CSV row per vehicle, matching SNAPSHOT_FIELDS."""
    return [
        [
            repr(float(world.time)),
            v.id,
            repr(float(v.x)),
            v.lane,
            repr(float(v.v_x)),
            repr(float(v.accel)),
            v.maneuver_label(),
        ]
        for v in world.vehicles
    ]
