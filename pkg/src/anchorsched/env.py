"""Discrete resource-block scheduling simulator.

Each time step runs in two phases so that a scheduler can observe the
arrivals of the current step before it allocates:

    arrivals()      job generation, priority designation
    serve(action)   allocation, capacity, delay/timeouts, reward, fading redraw

Within a user, blocks go to the priority job first (if any) and then to jobs
oldest-first (largest delay, then creation order). ``priority_first=False``
drops the priority exception.

``step(action)`` runs both phases back to back.

Random draws per step, in order (the reference simulator in the test suite
relies on this exact sequence):

    rng.random(U)                     job arrival coins
    rng.integers(1, b_max + 1, U)     job sizes (drawn for every user)
    rng.random()                      priority coin
    rng.integers(k)                   priority pick, only if the coin hit and k > 0
    rng.rayleigh(sigma_r, U)          fading for the next step
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

ALLOCATION_TOL = 1e-6


class ConfigError(ValueError):
    pass


class InvalidAllocation(ValueError):
    pass


@dataclass
class Job:
    owner_user: int
    requested_blocks: int
    delay: int = 0
    is_priority: bool = False
    creation_seq: int = 0


@dataclass(frozen=True)
class EnvConfig:
    num_users: int = 5
    total_blocks: int = 10
    max_init_blocks: int = 7
    max_delay: int = 5
    p_job: float = 0.5
    p_prio: float = 0.0001
    snr_db: float = 10.0
    rayleigh_scale: float = 0.3
    # penalty magnitudes; subtracted in assemble_reward
    w_capacity: float = 1.0
    w_timeout_normal: float = 1.0
    w_timeout_prio: float = 5.0
    # serve a user's priority job before its older jobs; False gives strict oldest-first
    priority_first: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def snr_linear(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    @property
    def reward_weights(self) -> tuple[float, float, float]:
        return self.w_capacity, self.w_timeout_normal, self.w_timeout_prio

    def validate(self) -> None:
        problems = []
        for name in ("num_users", "total_blocks", "max_init_blocks", "max_delay"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                problems.append(f"{name} must be an integer, got {value!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        if self.num_users < 1:
            problems.append("num_users must be >= 1")
        if self.total_blocks < 1:
            problems.append("total_blocks must be >= 1")
        if self.max_init_blocks < 1:
            problems.append("max_init_blocks must be >= 1")
        if self.max_delay < 1:
            problems.append("max_delay must be >= 1")
        for name in ("p_job", "p_prio"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {p}")
        if not self.rayleigh_scale > 0:
            problems.append("rayleigh_scale must be > 0")
        if not isinstance(self.priority_first, (bool, np.bool_)):
            problems.append(f"priority_first must be a boolean, got {self.priority_first!r}")
        for f in fields(self):
            if f.name == "priority_first":
                continue
            if not math.isfinite(float(getattr(self, f.name))):
                problems.append(f"{f.name} must be finite")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class EnvState:
    queue: list[Job] = field(default_factory=list)
    fading_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_index: int = 0


@dataclass
class StepOutcome:
    reward: float
    capacity: float
    timeouts_normal: int
    timeouts_prio: int
    blocks_consumed: np.ndarray
    priority_event: bool = False


def discretize_allocation(a, total_blocks: int) -> np.ndarray:
    """Turn an allocation ratio into integer block counts summing to ``total_blocks``.

    Floors ``a * N`` and hands the leftover blocks to the largest remainders,
    lowest user index first on ties.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or not np.all(np.isfinite(a)):
        raise InvalidAllocation(f"allocation must be a finite vector, got {a!r}")
    if np.any(a < 0):
        raise InvalidAllocation(f"allocation has negative entries: {a!r}")
    if abs(a.sum() - 1.0) > ALLOCATION_TOL:
        raise InvalidAllocation(f"allocation sums to {a.sum()!r}, not 1")
    exact = a * total_blocks
    blocks = np.floor(exact).astype(np.int64)
    # floor sum cannot exceed N while N * tolerance < 1
    leftover = total_blocks - int(blocks.sum())
    if leftover > 0:
        # stable sort on negated remainder keeps lowest index first among ties
        order = np.argsort(-(exact - blocks), kind="stable")
        blocks[order[:leftover]] += 1
    return blocks


def sum_capacity(blocks_consumed, fading, snr_linear: float) -> float:
    blocks_consumed = np.asarray(blocks_consumed, dtype=np.float64)
    power = np.asarray(fading, dtype=np.float64) ** 2
    return float(np.sum(blocks_consumed * np.log1p(power * snr_linear)))


def assemble_reward(capacity: float, timeouts_normal: int, timeouts_prio: int,
                    weights: tuple[float, float, float]) -> float:
    w_c, w_normal, w_prio = weights
    return w_c * capacity - w_normal * timeouts_normal - w_prio * timeouts_prio


def featurize(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Four features per user: load, priority load, power fading, normalized max delay."""
    U = config.num_users
    load = np.zeros(U)
    prio_load = np.zeros(U)
    max_delay = np.zeros(U)
    for job in state.queue:
        u = job.owner_user
        load[u] += job.requested_blocks
        if job.is_priority:
            prio_load[u] += job.requested_blocks
        max_delay[u] = max(max_delay[u], job.delay)
    features = np.empty((U, 4))
    features[:, 0] = load / config.total_blocks
    features[:, 1] = prio_load / config.total_blocks
    features[:, 2] = np.asarray(state.fading_amplitude, dtype=np.float64) ** 2
    features[:, 3] = max_delay / config.max_delay
    return features.reshape(-1)


class SchedulingEnv:
    """Stateful simulator wrapping an :class:`EnvState` and its random stream."""

    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config
        self.state = EnvState()
        self.rng = np.random.default_rng(0)
        self._next_seq = 0
        self._pending_event: bool | None = None

    def reset(self, seed=None) -> EnvState:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        self.state = EnvState(
            queue=[],
            fading_amplitude=self.rng.rayleigh(cfg.rayleigh_scale, cfg.num_users),
            step_index=0,
        )
        self._next_seq = 0
        self._pending_event = None
        return self.state

    def features(self) -> np.ndarray:
        return featurize(self.state, self.config)

    def arrivals(self) -> bool:
        """Generate new jobs and maybe designate a priority job. Returns True on a priority event."""
        if self._pending_event is not None:
            raise RuntimeError("arrivals() called twice without serve()")
        cfg = self.config
        rng = self.rng
        queue = self.state.queue
        arrive = rng.random(cfg.num_users) < cfg.p_job
        sizes = rng.integers(1, cfg.max_init_blocks + 1, size=cfg.num_users)
        for u in range(cfg.num_users):
            if arrive[u]:
                queue.append(Job(u, int(sizes[u]), 0, False, self._next_seq))
                self._next_seq += 1

        event = False
        if rng.random() < cfg.p_prio:
            candidates = [job for job in queue if not job.is_priority]
            if candidates:
                candidates[int(rng.integers(len(candidates)))].is_priority = True
                event = True
        self._pending_event = event
        return event

    def serve(self, action) -> StepOutcome:
        cfg = self.config
        blocks = discretize_allocation(action, cfg.total_blocks)
        if blocks.size != cfg.num_users:
            raise InvalidAllocation(f"expected {cfg.num_users} entries, got {blocks.size}")
        event = bool(self._pending_event)
        self._pending_event = None
        state = self.state

        per_user: list[list[Job]] = [[] for _ in range(cfg.num_users)]
        for job in state.queue:
            per_user[job.owner_user].append(job)
        consumed = np.zeros(cfg.num_users, dtype=np.int64)
        for u, jobs in enumerate(per_user):
            budget = int(blocks[u])
            if budget == 0 or not jobs:
                continue
            if cfg.priority_first:
                jobs.sort(key=lambda j: (not j.is_priority, -j.delay, j.creation_seq))
            else:
                jobs.sort(key=lambda j: (-j.delay, j.creation_seq))
            for job in jobs:
                take = min(budget, job.requested_blocks)
                job.requested_blocks -= take
                budget -= take
                consumed[u] += take
                if budget == 0:
                    break

        capacity = sum_capacity(consumed, state.fading_amplitude, cfg.snr_linear)

        timeouts_normal = 0
        timeouts_prio = 0
        survivors = []
        for job in state.queue:
            if job.requested_blocks <= 0:
                continue
            job.delay += 1
            if job.is_priority:
                timeouts_prio += 1
            elif job.delay > cfg.max_delay:
                timeouts_normal += 1
            else:
                survivors.append(job)
        state.queue = survivors

        reward = assemble_reward(capacity, timeouts_normal, timeouts_prio, cfg.reward_weights)
        state.fading_amplitude = self.rng.rayleigh(cfg.rayleigh_scale, cfg.num_users)
        state.step_index += 1
        return StepOutcome(reward, capacity, timeouts_normal, timeouts_prio, consumed, event)

    def step(self, action) -> StepOutcome:
        self.arrivals()
        return self.serve(action)
