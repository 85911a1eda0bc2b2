"""From-scratch dense Q-network with Adam, replay memory and Boltzmann exploration.

The network is a plain list of weight matrices / bias vectors evaluated with
numpy; backpropagation and the Adam update are written out explicitly so the
whole value-learning path is self-contained and finite-difference checkable.
Supports the quantized observation encoding (one-hot, 59 inputs) and the
continuous encoding (19 inputs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import (
    N_ACTIONS,
    N_LANES,
    N_SLOTS,
    BinnedObservation,
)

POLICY_FORMAT_VERSION = 1

BINNED_INPUT_SIZE = 2 * N_SLOTS * 3 + N_LANES  # 18 one-hot triples + lane
CONTINUOUS_INPUT_SIZE = 2 * N_SLOTS + 1


class PolicyFileError(ValueError):
    """Policy file is unreadable or structurally invalid."""


class PolicyVersionError(PolicyFileError):
    """Policy file was written by an incompatible format version."""


def encode_binned(binned: BinnedObservation) -> np.ndarray:
    """One-hot encoding: 3 bits per bin (54 total) plus a 5-bit lane."""
    out = np.zeros(BINNED_INPUT_SIZE)
    for k, (pos_bin, vel_bin) in enumerate(binned.bins):
        out[6 * k + int(pos_bin)] = 1.0
        out[6 * k + 3 + int(vel_bin)] = 1.0
    out[6 * N_SLOTS + binned.own_lane - 1] = 1.0
    return out


def input_size(encoding: str) -> int:
    if encoding == "binned":
        return BINNED_INPUT_SIZE
    if encoding == "continuous":
        return CONTINUOUS_INPUT_SIZE
    raise ValueError(f"unknown encoding: {encoding!r}")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def like(params: list[np.ndarray]) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


class QNetwork:
    """Dense feedforward action-value approximator.

    weights[i] has shape (n_out, n_in); hidden layers use rectified-linear
    activation, the output layer is linear.  Carries its own Adam state.
    """

    def __init__(
        self,
        layer_sizes: list[int],
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        encoding: str = "binned",
    ):
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases
        self.encoding = encoding
        self.activations = ["relu"] * (len(weights) - 1) + ["linear"]
        self.adam = AdamState.like(self.parameters())

    @staticmethod
    def init(
        layer_sizes: list[int], rng: np.random.Generator, encoding: str = "binned"
    ) -> "QNetwork":
        """Glorot-uniform initialization: +-sqrt(6 / (n_in + n_out)) per layer."""
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        weights = []
        biases = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return QNetwork(layer_sizes, weights, biases, encoding)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "QNetwork":
        net = QNetwork(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.encoding,
        )
        return net

    def copy_weights_from(self, other: "QNetwork") -> None:
        for w, ow in zip(self.weights, other.weights):
            w[...] = ow
        for b, ob in zip(self.biases, other.biases):
            b[...] = ob

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Q-values for one observation (1-D input) or a batch (2-D input)."""
        single = x.ndim == 1
        a = np.atleast_2d(x)
        if a.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input size {a.shape[1]} does not match network input {self.layer_sizes[0]}"
            )
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = a @ w.T + b
            if act == "relu":
                a = np.maximum(a, 0.0)
        return a[0] if single else a

    def _forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = a @ w.T + b
            if act == "relu":
                a = np.maximum(a, 0.0)
            acts.append(a)
        return a, acts

    def backward(
        self, acts: list[np.ndarray], d_out: np.ndarray
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar loss wrt weights/biases given dL/d(output)."""
        d_w = [np.zeros_like(w) for w in self.weights]
        d_b = [np.zeros_like(b) for b in self.biases]
        delta = d_out
        for i in reversed(range(len(self.weights))):
            if self.activations[i] == "relu":
                delta = delta * (acts[i + 1] > 0.0)
            d_w[i] = delta.T @ acts[i]
            d_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i]
        return d_w, d_b

    def adam_step(
        self,
        grads: list[np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.adam.t += 1
        t = self.adam.t
        for p, g, m, v in zip(self.parameters(), grads, self.adam.m, self.adam.v):
            m[...] = beta1 * m + (1.0 - beta1) * g
            v[...] = beta2 * v + (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def forward(net: QNetwork, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def boltzmann_probs(q: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of q / T with max-subtraction for overflow safety."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = (q - np.max(q)) / temperature
    e = np.exp(z)
    return e / e.sum()


def boltzmann_sample(q: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    return int(rng.choice(len(q), p=boltzmann_probs(q, temperature)))


@dataclass(frozen=True)
class Experience:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


class ReplayMemory:
    """FIFO ring buffer of the last ``capacity`` experiences."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: list[Experience] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, exp: Experience) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(exp)
        else:
            self._buf[self._next] = exp
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        idx = rng.integers(0, len(self._buf), size=batch_size)
        return [self._buf[i] for i in idx]

    def __contains__(self, exp: Experience) -> bool:
        return any(e is exp for e in self._buf)


def train_minibatch(
    net: QNetwork,
    target: QNetwork,
    batch: list[Experience],
    lr: float,
    gamma: float,
) -> float:
    """One Adam update on the squared error of the taken action's Q-value.

    Targets bootstrap through the frozen target network; terminal
    transitions use the bare reward.  Returns the mean loss of the batch.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    s = np.stack([e.s for e in batch])
    s_next = np.stack([e.s_next for e in batch])
    a = np.array([e.a for e in batch])
    r = np.array([e.r for e in batch])
    term = np.array([e.terminal for e in batch])

    q_next = target.forward(s_next)
    y = r + gamma * q_next.max(axis=1) * ~term

    q, acts = net._forward_cached(s)
    n = len(batch)
    taken = q[np.arange(n), a]
    err = taken - y
    loss = float(np.mean(err**2))

    d_out = np.zeros_like(q)
    d_out[np.arange(n), a] = 2.0 * err / n
    d_w, d_b = net.backward(acts, d_out)
    net.adam_step(d_w + d_b, lr)
    return loss


def schedule_count(schedule: list[tuple[int, int]], episode: int) -> int:
    """Car count for a 1-based episode from (after_episode, count) breakpoints."""
    count = schedule[0][1]
    for after, n in schedule:
        if episode > after:
            count = n
    return count


@dataclass
class TrainConfig:
    episodes: int = 5000
    steps_per_episode: int = 100
    batch_size: int = 32
    warmup: int = 32                 # no updates until the memory holds this many
    memory_capacity: int = 2000
    learning_rate: float = 0.005
    gamma: float = 0.975
    t_initial: float = 50.0
    t_floor: float = 1.0
    t_decay: float | None = None     # None: reach t_floor exactly at the last episode
    target_sync: int = 100           # hard-copy interval, in steps
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 64])
    encoding: str = "binned"
    car_schedule: list[tuple[int, int]] = field(
        default_factory=lambda: [(0, 125), (1300, 100), (3800, 125)]
    )

    def decay(self) -> float:
        if self.t_decay is not None:
            return self.t_decay
        return (self.t_floor / self.t_initial) ** (1.0 / self.episodes)

    def layer_sizes(self) -> list[int]:
        return [input_size(self.encoding)] + list(self.hidden_sizes) + [N_ACTIONS]


@dataclass
class TrainResult:
    net: QNetwork
    history: list[tuple[int, float, float, int]]  # (episode, avg_reward, T, n_cars)


def run_dqn_training(
    env_factory,
    cfg: TrainConfig,
    rng: np.random.Generator,
    net: QNetwork | None = None,
) -> TrainResult:
    """Train a Q-network over episodic interaction.

    ``env_factory(episode, n_cars, rng)`` must build an episode object with
    ``reset() -> obs`` and ``step(action) -> (obs, reward, terminal)`` where
    obs is the encoded observation vector.  One Boltzmann-sampled action per
    step; one minibatch update per step once the replay memory has warmed
    up; the temperature is multiplied by the decay factor after each episode
    while above the floor.
    """
    explore_rng = np.random.default_rng(rng.integers(2**63))
    batch_rng = np.random.default_rng(rng.integers(2**63))
    init_rng = np.random.default_rng(rng.integers(2**63))
    env_seed_rng = np.random.default_rng(rng.integers(2**63))

    if net is None:
        net = QNetwork.init(cfg.layer_sizes(), init_rng, cfg.encoding)
    target = net.copy()
    memory = ReplayMemory(cfg.memory_capacity)

    temperature = cfg.t_initial
    c = cfg.decay()
    history: list[tuple[int, float, float, int]] = []
    global_step = 0

    for episode in range(1, cfg.episodes + 1):
        n_cars = schedule_count(cfg.car_schedule, episode)
        env = env_factory(episode, n_cars, np.random.default_rng(env_seed_rng.integers(2**63)))
        obs = env.reset()
        rewards = []
        for _ in range(cfg.steps_per_episode):
            q = net.forward(obs)
            action = boltzmann_sample(q, temperature, explore_rng)
            next_obs, reward, terminal = env.step(action)
            memory.push(Experience(obs, action, reward, next_obs, terminal))
            if len(memory) >= cfg.warmup:
                train_minibatch(
                    net,
                    target,
                    memory.sample(cfg.batch_size, batch_rng),
                    cfg.learning_rate,
                    cfg.gamma,
                )
            global_step += 1
            if global_step % cfg.target_sync == 0:
                target.copy_weights_from(net)
            rewards.append(reward)
            obs = next_obs
            if terminal:
                break
        history.append((episode, float(np.mean(rewards)), temperature, n_cars))
        if temperature > cfg.t_floor:
            temperature = max(cfg.t_floor, temperature * c)

    return TrainResult(net=net, history=history)


def save_policy(net: QNetwork) -> bytes:
    """Serialize a network to the versioned JSON policy format."""
    doc = {
        "version": POLICY_FORMAT_VERSION,
        "encoding": net.encoding,
        "layer_sizes": net.layer_sizes,
        "activations": net.activations,
        "weights": [w.flatten().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    return json.dumps(doc, indent=1).encode()


def load_policy(raw: bytes) -> QNetwork:
    """Inverse of save_policy; exact round-trip of every weight."""
    try:
        doc = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PolicyFileError(f"unreadable policy file: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyFileError("policy file must hold a JSON object")
    version = doc.get("version")
    if version != POLICY_FORMAT_VERSION:
        raise PolicyVersionError(
            f"unsupported policy version {version!r} (expected {POLICY_FORMAT_VERSION})"
        )
    try:
        layer_sizes = [int(n) for n in doc["layer_sizes"]]
        encoding = doc["encoding"]
        weights = []
        biases = []
        for n_in, n_out, flat, b in zip(
            layer_sizes[:-1], layer_sizes[1:], doc["weights"], doc["biases"], strict=True
        ):
            w = np.array(flat, dtype=float)
            if w.size != n_in * n_out:
                raise PolicyFileError(
                    f"weight block has {w.size} entries, expected {n_in * n_out}"
                )
            weights.append(w.reshape(n_out, n_in))
            bv = np.array(b, dtype=float)
            if bv.size != n_out:
                raise PolicyFileError(f"bias block has {bv.size} entries, expected {n_out}")
            biases.append(bv)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PolicyFileError):
            raise
        raise PolicyFileError(f"malformed policy file: {exc}") from exc
    if input_size(encoding) != layer_sizes[0]:
        raise PolicyFileError(
            f"encoding {encoding!r} implies {input_size(encoding)} inputs, "
            f"file declares {layer_sizes[0]}"
        )
    return QNetwork(layer_sizes, weights, biases, encoding)
