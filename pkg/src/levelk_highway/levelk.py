"""Hierarchy orchestration: train level-k against a level-(k-1) field.

A level-1 driver is trained by deep Q-learning in a world where every other
car runs the rule-based anchor policy; level-2 trains against level-1 fields,
and so on.  Also houses the traffic episode used for both training and
evaluation, the policy registry, scenario evaluation with crash counting,
and trajectory rollouts for synthetic-data generation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dqn, env
from .actions import AccelerationModel, sample_acceleration
from .env import (
    Action,
    EnvParams,
    N_ACTIONS,
    RawObservation,
    WorldState,
    bin_observation,
    compute_reward,
    detect_crashes,
    encode_continuous,
    init_world,
    level0_policy,
    observe,
    step_vehicle,
    commit_lane_changes,
)

MAX_LEVEL_DEFAULT = 3


class MissingLevelError(KeyError):
    """A required lower-level policy is not in the registry."""


class DriverPolicy:
    """Stochastic map from a raw observation to a pdf over the 7 actions."""

    def action_pdf(self, raw: RawObservation, params: EnvParams) -> np.ndarray:
        raise NotImplementedError

    def act(self, raw: RawObservation, params: EnvParams, rng: np.random.Generator) -> Action:
        return Action(int(rng.choice(N_ACTIONS, p=self.action_pdf(raw, params))))

    def act_many(
        self, raws: list[RawObservation], params: EnvParams, rng: np.random.Generator
    ) -> list[Action]:
        return [self.act(raw, params, rng) for raw in raws]


class Level0Policy(DriverPolicy):
    """Deterministic reactive car-follower; never changes lanes."""

    def action_pdf(self, raw, params):
        pdf = np.zeros(N_ACTIONS)
        pdf[int(level0_policy(bin_observation(raw, params)))] = 1.0
        return pdf

    def act(self, raw, params, rng):
        return level0_policy(bin_observation(raw, params))

    def act_many(self, raws, params, rng):
        return [level0_policy(bin_observation(raw, params)) for raw in raws]


class NetworkPolicy(DriverPolicy):
    """Trained Q-network sampled through a Boltzmann pdf at a fixed temperature."""

    def __init__(self, net: dqn.QNetwork, temperature: float = 1.0):
        self.net = net
        self.temperature = temperature

    def encode(self, raw: RawObservation, params: EnvParams) -> np.ndarray:
        if self.net.encoding == "continuous":
            return encode_continuous(raw, params)
        return dqn.encode_binned(bin_observation(raw, params))

    def action_pdf(self, raw, params):
        q = self.net.forward(self.encode(raw, params))
        return dqn.boltzmann_probs(q, self.temperature)

    def act_many(self, raws, params, rng):
        if not raws:
            return []
        batch = np.stack([self.encode(raw, params) for raw in raws])
        q = self.net.forward(batch)
        shifted = (q - q.max(axis=1, keepdims=True)) / self.temperature
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        u = rng.random(len(raws))
        cum = np.cumsum(probs, axis=1)
        idx = (cum < u[:, None]).sum(axis=1)
        return [Action(int(i)) for i in idx]


class UniformRandomPolicy(DriverPolicy):
    """Benchmark: every action equally likely in every state."""

    def action_pdf(self, raw, params):
        return np.full(N_ACTIONS, 1.0 / N_ACTIONS)


@dataclass
class PolicyRef:
    """A policy in the hierarchy: its level and how it acts."""

    level: int
    kind: str  # "rule" for the level-0 anchor, "network" above it
    policy: DriverPolicy

    @staticmethod
    def rule_based() -> "PolicyRef":
        return PolicyRef(level=0, kind="rule", policy=Level0Policy())

    @staticmethod
    def from_network(level: int, net: dqn.QNetwork, temperature: float = 1.0) -> "PolicyRef":
        return PolicyRef(level=level, kind="network", policy=NetworkPolicy(net, temperature))


class PolicyRegistry:
    """Append-only store of trained levels; level 0 is always present."""

    def __init__(self, eval_temperature: float = 1.0):
        self.eval_temperature = eval_temperature
        self._levels: dict[int, PolicyRef] = {0: PolicyRef.rule_based()}

    def __contains__(self, level: int) -> bool:
        return level in self._levels

    def levels(self) -> list[int]:
        return sorted(self._levels)

    def get(self, level: int) -> PolicyRef:
        if level not in self._levels:
            raise MissingLevelError(f"no level-{level} policy in the registry")
        return self._levels[level]

    def add(self, level: int, net: dqn.QNetwork) -> PolicyRef:
        if level in self._levels:
            raise ValueError(f"level {level} already registered")
        ref = PolicyRef.from_network(level, net, self.eval_temperature)
        self._levels[level] = ref
        return ref

    def save(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for level, ref in sorted(self._levels.items()):
            if ref.kind != "network":
                continue  # level 0 is implicit
            path = out_dir / f"level{level}.policy.json"
            path.write_bytes(dqn.save_policy(ref.policy.net))
            written.append(path)
        return written

    @staticmethod
    def load(policy_dir: str | Path, eval_temperature: float = 1.0) -> "PolicyRegistry":
        registry = PolicyRegistry(eval_temperature)
        policy_dir = Path(policy_dir)
        for path in sorted(policy_dir.glob("level*.policy.json")):
            level = int(path.stem.split(".")[0].removeprefix("level"))
            registry.add(level, dqn.load_policy(path.read_bytes()))
        return registry


@dataclass
class EpisodeLog:
    """Optional per-step record of every vehicle for replay/ingest round-trips."""

    snapshots: list[list]            # rows in env.SNAPSHOT_FIELDS order
    decisions: list[tuple[float, int, int, int]]  # (time, vehicle, state_index, action)


class TrafficEpisode:
    """One multi-vehicle episode driven from the ego's point of view.

    Vehicle 0 is the ego; every other vehicle samples the shared field
    policy.  ``step`` applies all decisions simultaneously, advances the
    world one decision period, and reports the ego's encoded observation,
    reward and terminal flag (the episode ends when the ego crashes).
    """

    def __init__(
        self,
        n_cars: int,
        field_policy: DriverPolicy,
        params: EnvParams,
        rng: np.random.Generator,
        ego_encoding: str = "binned",
        accel_model: AccelerationModel | None = None,
        log: bool = False,
    ):
        self.params = params
        self.field_policy = field_policy
        self.rng = rng
        self.ego_encoding = ego_encoding
        self.accel_model = accel_model or AccelerationModel()
        self.world: WorldState | None = None
        self.n_cars = n_cars
        self.ego_id = 0
        self.log = EpisodeLog(snapshots=[], decisions=[]) if log else None
        self.field_crashes = 0

    def _encode(self, raw: RawObservation) -> np.ndarray:
        if self.ego_encoding == "continuous":
            return encode_continuous(raw, self.params)
        return dqn.encode_binned(bin_observation(raw, self.params))

    def reset(self) -> np.ndarray:
        self.world = init_world(self.n_cars, self.params, self.rng)
        if self.log is not None:
            self.log.snapshots.extend(env.snapshot_rows(self.world))
        return self._encode(observe(self.world, self.ego_id))

    def ego_raw(self) -> RawObservation:
        return observe(self.world, self.ego_id)

    def step(self, ego_action: int | Action) -> tuple[np.ndarray, float, bool]:
        world = self.world
        params = self.params
        ego_action = Action(int(ego_action))
        field_ids = [v.id for v in world.vehicles if v.id != self.ego_id]
        raws = {vid: observe(world, vid) for vid in field_ids}
        field_actions = self.field_policy.act_many(
            [raws[vid] for vid in field_ids], params, self.rng
        )

        realized: dict[int, tuple[Action, float]] = {
            self.ego_id: (
                ego_action,
                sample_acceleration(ego_action, self.rng, self.accel_model),
            )
        }
        for vid, action in zip(field_ids, field_actions):
            realized[vid] = (action, sample_acceleration(action, self.rng, self.accel_model))

        if self.log is not None:
            t = world.time
            raws[self.ego_id] = observe(world, self.ego_id)
            for vid in [self.ego_id, *field_ids]:
                self.log.decisions.append(
                    (t, vid, bin_observation(raws[vid], params).index(), int(realized[vid][0]))
                )

        # crashes are detected before lane changes commit, so a changing
        # vehicle collides in both its lanes for the whole maneuver
        for vid, (action, accel) in realized.items():
            env.apply_action(world, vid, action, accel)
        world.vehicles = [
            step_vehicle(v, v.accel, params.dt, params.road_length, params.v_max)
            for v in world.vehicles
        ]
        world.time += params.dt
        crashed = detect_crashes(world)
        commit_lane_changes(world)

        reward = compute_reward(world, ego_action, world, self.ego_id, params, crashed=crashed)
        terminal = self.ego_id in crashed
        self.field_crashes += len(crashed - {self.ego_id})
        if self.log is not None:
            self.log.snapshots.extend(env.snapshot_rows(world))
        return self._encode(observe(world, self.ego_id)), reward, terminal


@dataclass
class ScenarioResult:
    n_d: int
    episodes: int
    crashes: int
    crash_rate: float
    mean_reward: float


def run_policy_episode(
    ego_policy: DriverPolicy,
    field_policy: DriverPolicy,
    n_d: int,
    steps: int,
    params: EnvParams,
    rng: np.random.Generator,
    ego_encoding: str = "binned",
) -> tuple[bool, float]:
    """Run one episode with a fixed ego policy; (ego crashed, mean reward)."""
    episode = TrafficEpisode(n_d, field_policy, params, rng, ego_encoding)
    episode.reset()
    rewards = []
    for _ in range(steps):
        raw = episode.ego_raw()
        action = ego_policy.act(raw, params, rng)
        _, reward, terminal = episode.step(action)
        rewards.append(reward)
        if terminal:
            return True, float(np.mean(rewards))
    return False, float(np.mean(rewards)) if rewards else 0.0


def evaluate_scenario(
    ego: PolicyRef,
    field: PolicyRef,
    n_d: int,
    episodes: int,
    steps: int,
    rng: np.random.Generator,
    params: EnvParams | None = None,
) -> ScenarioResult:
    """Crash rate and mean reward of an ego policy inside a field of another.

    Each episode re-places ``n_d`` vehicles (ego included) and ends at the
    first ego-involved crash; field-only crashes do not terminate.
    """
    if n_d < 2:
        raise ValueError("n_d must be >= 2 (ego plus at least one field car)")
    params = params or EnvParams()
    encoding = ego.policy.net.encoding if isinstance(ego.policy, NetworkPolicy) else "binned"
    crashes = 0
    rewards = []
    for _ in range(episodes):
        episode_rng = np.random.default_rng(rng.integers(2**63))
        crashed, mean_reward = run_policy_episode(
            ego.policy, field.policy, n_d, steps, params, episode_rng, encoding
        )
        crashes += int(crashed)
        rewards.append(mean_reward)
    return ScenarioResult(
        n_d=n_d,
        episodes=episodes,
        crashes=crashes,
        crash_rate=crashes / episodes if episodes else 0.0,
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
    )


def make_env_factory(
    field_policy: DriverPolicy,
    params: EnvParams,
    encoding: str,
    accel_model: AccelerationModel | None = None,
):
    """Episode factory for the Q-learning loop; one extra car is the ego."""

    def factory(episode_index: int, n_opponents: int, rng: np.random.Generator):
        return TrafficEpisode(
            n_opponents + 1, field_policy, params, rng, encoding, accel_model
        )

    return factory


def train_level(
    k: int,
    registry: PolicyRegistry,
    cfg: dqn.TrainConfig,
    rng: np.random.Generator,
    params: EnvParams | None = None,
    accel_model: AccelerationModel | None = None,
    max_level: int = MAX_LEVEL_DEFAULT,
    allow_above_max: bool = False,
) -> tuple[PolicyRef, list[tuple[int, float, float, int]]]:
    """Train the level-k policy against a field of level-(k-1) agents.

    Raises:
        MissingLevelError: the registry lacks level k-1.
        ValueError: k exceeds the configured highest level without an
            explicit override.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > max_level and not allow_above_max:
        raise ValueError(
            f"level {k} exceeds the default highest level {max_level}; "
            "pass an explicit override to go higher"
        )
    if (k - 1) not in registry:
        raise MissingLevelError(f"training level {k} requires level {k - 1}")
    params = params or EnvParams()
    field = registry.get(k - 1)
    factory = make_env_factory(field.policy, params, cfg.encoding, accel_model)
    result = dqn.run_dqn_training(factory, cfg, rng)
    ref = registry.add(k, result.net)
    return ref, result.history


NGSIM_HEADER = ["Vehicle_ID", "Frame_ID", "Local_Y", "v_Vel", "Lane_ID"]


def rollout_trajectories(
    policy: DriverPolicy,
    n_d: int,
    ticks: int,
    params: EnvParams,
    rng: np.random.Generator,
    accel_model: AccelerationModel | None = None,
) -> tuple[list[list], list[tuple[float, int, int, int]]]:
    """Drive ``n_d`` vehicles under one shared policy and log NGSIM-style rows.

    Returns (rows, decisions): rows match NGSIM_HEADER at one frame per
    decision period; decisions are (time, vehicle, state_index, action) for
    ingest round-trip checks.  Crashes do not stop the rollout.
    """
    accel_model = accel_model or AccelerationModel()
    world = init_world(n_d, params, rng)
    rows: list[list] = []
    decisions: list[tuple[float, int, int, int]] = []

    def log_frame():
        frame = int(round(world.time / params.dt))
        for v in world.vehicles:
            rows.append([v.id, frame, repr(float(v.x)), repr(float(v.v_x)), v.lane])

    for _ in range(ticks):
        log_frame()
        ids = [v.id for v in world.vehicles]
        raws = [observe(world, vid) for vid in ids]
        actions = policy.act_many(raws, params, rng)
        realized = {}
        for vid, raw, action in zip(ids, raws, actions):
            decisions.append(
                (world.time, vid, bin_observation(raw, params).index(), int(action))
            )
            realized[vid] = (action, sample_acceleration(action, rng, accel_model))
        env.step_world(world, realized)
    log_frame()
    return rows, decisions
