"""Actor-critic scheduler with replay memory, mixing exploration and weight anchoring.

The critic regresses the immediate reward of a (state, allocation) pair; there
is no bootstrapped target and no target network. The actor maximizes the
critic's estimate, optionally plus a Fisher-weighted quadratic pull towards a
recorded parameter snapshot.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, DenseNet, NotReadyError, net_from_architecture

CHECKPOINT_FORMAT = 1


@dataclass
class AgentConfig:
    hidden_widths: tuple = (128, 128, 128)
    hidden_activation: str = "relu"
    batch_size: int = 256
    replay_capacity: int = 100_000
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epsilon_initial: float = 1.0
    epsilon_decay_fraction: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        if not 0.0 <= self.epsilon_initial <= 1.0:
            raise ValueError("epsilon_initial must lie in [0, 1]")
        if not 0.0 < self.epsilon_decay_fraction <= 1.0:
            raise ValueError("epsilon_decay_fraction must lie in (0, 1]")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"hidden_activation must be relu or tanh, got {self.hidden_activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class AnchorSet:
    theta_star: np.ndarray
    fisher: np.ndarray
    weight: float

    def __post_init__(self):
        theta = np.array(self.theta_star, copy=True)
        fisher = np.array(self.fisher, copy=True)
        if theta.shape != fisher.shape or theta.ndim != 1:
            raise ValueError("theta_star and fisher must be flat vectors of equal length")
        if np.any(fisher < 0) or not np.all(np.isfinite(fisher)):
            raise ValueError("fisher entries must be finite and nonnegative")
        if self.weight < 0:
            raise ValueError("anchor weight must be nonnegative")
        theta.flags.writeable = False
        fisher.flags.writeable = False
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "fisher", fisher)
        object.__setattr__(self, "weight", float(self.weight))

    def penalty(self, theta: np.ndarray) -> float:
        d = np.asarray(theta, dtype=np.float64) - self.theta_star
        return self.weight * float(np.sum(self.fisher * d * d))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return (2.0 * self.weight) * self.fisher * (theta - self.theta_star)

    def with_weight(self, weight: float) -> "AnchorSet":
        return AnchorSet(self.theta_star, self.fisher, weight)


class ReplayMemory:
    """Fixed-capacity FIFO ring of (state, action, reward) rows."""

    def __init__(self, capacity: int, state_width: int, action_width: int, dtype=np.float32):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_width), dtype=dtype)
        self.actions = np.zeros((self.capacity, action_width), dtype=dtype)
        self.rewards = np.zeros(self.capacity, dtype=dtype)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, state, action, reward: float) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int):
        if self._size < batch_size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} experiences")
        idx = rng.integers(0, self._size, size=batch_size)
        return self.states[idx], self.actions[idx], self.rewards[idx]

    def ordered(self):
        """Stored rows, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._next) % self.capacity
        return self.states[order], self.actions[order], self.rewards[order]


class ExplorationSchedule:
    """Mixing weight that falls linearly per step to zero at ``decay_fraction`` of the stage."""

    def __init__(self, total_steps: int, initial: float = 1.0, decay_fraction: float = 0.5):
        self.total_steps = int(total_steps)
        self.initial = float(initial)
        self.decay_fraction = float(decay_fraction)
        self.position = 0

    @property
    def decay_steps(self) -> float:
        return self.decay_fraction * self.total_steps

    def value_at(self, step: int) -> float:
        if self.decay_steps <= 0 or step >= self.decay_steps:
            return 0.0
        return self.initial * (1.0 - step / self.decay_steps)

    @property
    def value(self) -> float:
        return self.value_at(self.position)

    def advance(self) -> None:
        self.position += 1


@dataclass
class LearnReport:
    skipped: bool
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    anchor_penalty: float = 0.0


@dataclass
class Agent:
    num_users: int
    config: AgentConfig = field(default_factory=AgentConfig)
    actor: DenseNet | None = None
    critic: DenseNet | None = None
    actor_opt: Adam | None = None
    critic_opt: Adam | None = None
    memory: ReplayMemory | None = None
    exploration: ExplorationSchedule | None = None
    anchor: AnchorSet | None = None

    @classmethod
    def create(cls, num_users: int, config: AgentConfig, rng: np.random.Generator) -> "Agent":
        dtype = np.dtype(config.dtype)
        actor = DenseNet(4 * num_users, config.hidden_widths, num_users, "softmax",
                         hidden_activation=config.hidden_activation, rng=rng, dtype=dtype)
        critic = DenseNet(5 * num_users, config.hidden_widths, 1, "linear",
                          hidden_activation=config.hidden_activation, rng=rng, dtype=dtype)
        agent = cls(num_users, config, actor, critic)
        agent.reset_training_state(total_steps=1)
        return agent

    @property
    def state_width(self) -> int:
        return 4 * self.num_users

    def reset_training_state(self, total_steps: int) -> None:
        """Fresh optimizers, empty memory and a restarted exploration schedule."""
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        self.actor_opt = Adam(self.actor.size, cfg.actor_lr, cfg.beta1, cfg.beta2, cfg.adam_eps, dtype)
        self.critic_opt = Adam(self.critic.size, cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.adam_eps, dtype)
        self.memory = ReplayMemory(cfg.replay_capacity, self.state_width, self.num_users, dtype)
        self.exploration = ExplorationSchedule(total_steps, cfg.epsilon_initial, cfg.epsilon_decay_fraction)

    def act(self, features, rng: np.random.Generator | None = None, training: bool = False) -> np.ndarray:
        a = self.actor.forward(features).astype(np.float64)
        if not training:
            return a
        noise = rng.random(self.num_users)
        noise /= noise.sum()
        eps = self.exploration.value
        a = eps * noise + (1.0 - eps) * a
        return a / a.sum()

    def critic_loss(self, states, actions, rewards):
        """Mean squared error of the critic against the stored rewards, and its gradient."""
        if len(rewards) == 0:
            raise ValueError("empty batch")
        x = np.concatenate([states, actions], axis=1)
        q, cache = self.critic.forward_cache(x)
        err = q[:, 0] - np.asarray(rewards, dtype=q.dtype)
        loss = float(np.mean(err.astype(np.float64) ** 2))
        grad_q = (2.0 / len(err)) * err[:, None]
        grad, _ = self.critic.backward(cache, grad_q)
        return loss, grad

    def actor_loss(self, states):
        """Negative mean critic value of the actor's allocations, plus the anchor penalty.

        Returns ``(loss, gradient, penalty)``; the critic is held fixed.
        """
        if len(states) == 0:
            raise ValueError("empty batch")
        states = np.asarray(states, dtype=self.actor.dtype)
        a, actor_cache = self.actor.forward_cache(states)
        q, critic_cache = self.critic.forward_cache(np.concatenate([states, a], axis=1))
        loss = -float(np.mean(q, dtype=np.float64))
        grad_q = np.full_like(q, -1.0 / len(q))
        _, grad_x = self.critic.backward(critic_cache, grad_q, need_params=False)
        grad, _ = self.actor.backward(actor_cache, grad_x[:, self.state_width:])
        penalty = 0.0
        if self.anchor is not None:
            penalty = self.anchor.penalty(self.actor.params)
            grad += self.anchor.gradient(self.actor.params).astype(grad.dtype, copy=False)
        return loss + penalty, grad, penalty

    def learn_step(self, rng: np.random.Generator) -> LearnReport:
        if len(self.memory) < self.config.batch_size:
            return LearnReport(skipped=True)
        states, actions, rewards = self.memory.sample(rng, self.config.batch_size)
        c_loss, c_grad = self.critic_loss(states, actions, rewards)
        self.critic_opt.update(self.critic.params, c_grad)
        a_loss, a_grad, penalty = self.actor_loss(states)
        self.actor_opt.update(self.actor.params, a_grad)
        return LearnReport(False, c_loss, a_loss, penalty)

    def snapshot_anchor(self, weight: float) -> AnchorSet:
        if self.actor_opt is None or self.actor_opt.t == 0:
            raise NotReadyError("actor has not been trained yet")
        return AnchorSet(self.actor.flatten(), self.actor_opt.fisher_estimate(), weight)

    def clone(self) -> "Agent":
        """Copy of both networks and the anchor, with fresh training state."""
        other = Agent(self.num_users, self.config, self.actor.copy(), self.critic.copy(), anchor=self.anchor)
        other.reset_training_state(total_steps=1)
        return other

    def save(self, path) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "num_users": self.num_users,
            "config": asdict(self.config),
            "actor": self.actor.architecture(),
            "critic": self.critic.architecture(),
            "exploration": {
                "total_steps": self.exploration.total_steps,
                "initial": self.exploration.initial,
                "decay_fraction": self.exploration.decay_fraction,
                "position": self.exploration.position,
            },
            "actor_opt": {k: v for k, v in self.actor_opt.state_dict().items() if k not in ("m", "v")},
            "critic_opt": {k: v for k, v in self.critic_opt.state_dict().items() if k not in ("m", "v")},
            "anchor_weight": None if self.anchor is None else self.anchor.weight,
        }
        arrays = {
            "header": np.array(json.dumps(header)),
            "actor_params": self.actor.params,
            "critic_params": self.critic.params,
            "actor_m": self.actor_opt.m,
            "actor_v": self.actor_opt.v,
            "critic_m": self.critic_opt.m,
            "critic_v": self.critic_opt.v,
        }
        if self.anchor is not None:
            arrays["anchor_theta"] = self.anchor.theta_star
            arrays["anchor_fisher"] = self.anchor.fisher
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Agent":
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
            config = AgentConfig(**header["config"])
            actor = net_from_architecture(header["actor"])
            critic = net_from_architecture(header["critic"])
            actor.unflatten(data["actor_params"])
            critic.unflatten(data["critic_params"])
            agent = cls(header["num_users"], config, actor, critic)
            agent.reset_training_state(header["exploration"]["total_steps"])
            agent.exploration = ExplorationSchedule(**{k: header["exploration"][k]
                                                       for k in ("total_steps", "initial", "decay_fraction")})
            agent.exploration.position = header["exploration"]["position"]
            agent.actor_opt = Adam.from_state({**header["actor_opt"], "m": data["actor_m"], "v": data["actor_v"]})
            agent.critic_opt = Adam.from_state({**header["critic_opt"], "m": data["critic_m"], "v": data["critic_v"]})
            if header["anchor_weight"] is not None:
                agent.anchor = AnchorSet(data["anchor_theta"], data["anchor_fisher"], header["anchor_weight"])
        return agent
