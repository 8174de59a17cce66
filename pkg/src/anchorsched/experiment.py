"""Eight-scheduler training/evaluation protocol.

Scheduler regimes:

    BS      trained on the rare-priority baseline environment
    AU20    augmented environment (priority probability 20 %), doubled episodes
    AU100   priority on every step; also the anchor source
    AN1-3   start from AU100, anchored to it, trained on the baseline
    AU20+   AU20 continued without priority events
    AN1+    AN1 continued without priority events, anchor retained

Seed lineage: every random stream is seeded with
``SeedSequence([master_seed, repetition, crc32(label)])`` where ``label`` names
the scheduler, stage and purpose (e.g. ``"AN2/stage0/env"``, ``"BS/eval"``).
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import Agent, AgentConfig
from .env import EnvConfig, SchedulingEnv

log = logging.getLogger(__name__)

SCHEDULER_IDS = ("BS", "AU20", "AU100", "AN1", "AN2", "AN3", "AU20+", "AN1+")


class ProtocolError(RuntimeError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    p_prio: float
    episodes: int
    steps_per_episode: int
    init_from: str | None = None
    anchor: tuple[str, float] | None = None

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be >= 1")
        if not 0.0 <= self.p_prio <= 1.0:
            raise ValueError("p_prio must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode


@dataclass(frozen=True)
class SchedulerSpec:
    id: str
    stages: tuple[StagePlan, ...]

    @property
    def dependencies(self) -> tuple[str, ...]:
        deps = []
        for stage in self.stages:
            for dep in (stage.init_from, stage.anchor[0] if stage.anchor else None):
                if dep is not None and dep not in deps:
                    deps.append(dep)
        return tuple(deps)


@dataclass(frozen=True)
class EvalProtocol:
    episodes: int = 5
    steps_per_episode: int = 200_000
    p_prio: float = 0.0001


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    episodes: int = 30
    steps_per_episode: int = 10_000
    repetitions: int = 3
    anchor_weights: tuple = (1e5, 1e6, 1e7)
    p_prio_augmented: float = 0.2
    p_prio_priority: float = 1.0
    p_prio_forgetting: float = 0.0
    augmented_episode_factor: int = 2
    evaluation: EvalProtocol = field(default_factory=EvalProtocol)


def derive_seed(master_seed: int, repetition: int, label: str) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(repetition), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def build_protocol(cfg: ExperimentConfig) -> list[SchedulerSpec]:
    E, T = cfg.episodes, cfg.steps_per_episode
    base = cfg.env.p_prio
    w1, w2, w3 = cfg.anchor_weights
    return [
        SchedulerSpec("BS", (StagePlan(base, E, T),)),
        SchedulerSpec("AU20", (StagePlan(cfg.p_prio_augmented, cfg.augmented_episode_factor * E, T),)),
        SchedulerSpec("AU100", (StagePlan(cfg.p_prio_priority, E, T),)),
        SchedulerSpec("AN1", (StagePlan(base, E, T, init_from="AU100", anchor=("AU100", w1)),)),
        SchedulerSpec("AN2", (StagePlan(base, E, T, init_from="AU100", anchor=("AU100", w2)),)),
        SchedulerSpec("AN3", (StagePlan(base, E, T, init_from="AU100", anchor=("AU100", w3)),)),
        SchedulerSpec("AU20+", (StagePlan(cfg.p_prio_forgetting, E, T, init_from="AU20"),)),
        SchedulerSpec("AN1+", (StagePlan(cfg.p_prio_forgetting, E, T, init_from="AN1"),)),
    ]


def topological_order(specs: list[SchedulerSpec]) -> list[SchedulerSpec]:
    by_id = {s.id: s for s in specs}
    done: list[str] = []
    ordered = []
    pending = list(specs)
    while pending:
        ready = [s for s in pending if all(d in done for d in s.dependencies)]
        if not ready:
            missing = {d for s in pending for d in s.dependencies if d not in by_id}
            raise ProtocolError(f"unresolvable dependencies: {sorted(missing) or 'cycle'}")
        for s in ready:
            ordered.append(s)
            done.append(s.id)
            pending.remove(s)
    return ordered


def train(spec: SchedulerSpec, cfg: ExperimentConfig, master_seed: int, repetition: int,
          trained: dict[str, Agent] | None = None, on_episode=None):
    """Train one scheduler. ``trained`` maps dependency ids to their final agents.

    Returns ``(agent, log_rows)`` with one summary row per episode.
    """
    trained = trained or {}
    for dep in spec.dependencies:
        if dep not in trained:
            raise ProtocolError(f"{spec.id} needs {dep}, which has not been trained")
    agent = None
    rows = []
    for k, stage in enumerate(spec.stages):
        label = f"{spec.id}/stage{k}"
        if stage.init_from is not None:
            agent = trained[stage.init_from].clone()
        elif agent is None:
            init_rng = np.random.default_rng(derive_seed(master_seed, repetition, f"{label}/init"))
            agent = Agent.create(cfg.env.num_users, cfg.agent, init_rng)
        if stage.anchor is not None:
            source, weight = stage.anchor
            agent.anchor = trained[source].snapshot_anchor(weight)
        agent.reset_training_state(stage.total_steps)
        rows.extend(_run_stage(agent, stage, cfg, master_seed, repetition, spec.id, k, on_episode))
    return agent, rows


def _run_stage(agent: Agent, stage: StagePlan, cfg: ExperimentConfig, master_seed: int,
               repetition: int, scheduler: str, stage_index: int, on_episode=None):
    label = f"{scheduler}/stage{stage_index}"
    env = SchedulingEnv(replace(cfg.env, p_prio=stage.p_prio))
    env.reset(derive_seed(master_seed, repetition, f"{label}/env"))
    rng = np.random.default_rng(derive_seed(master_seed, repetition, f"{label}/agent"))
    rows = []
    for episode in range(stage.episodes):
        if episode > 0:
            env.reset()
        reward_sum = critic_sum = actor_sum = penalty_sum = 0.0
        updates = events = prio_timeouts = normal_timeouts = 0
        for _ in range(stage.steps_per_episode):
            events += env.arrivals()
            state = env.features()
            action = agent.act(state, rng, training=True)
            outcome = env.serve(action)
            agent.memory.add(state, action, outcome.reward)
            report = agent.learn_step(rng)
            agent.exploration.advance()
            reward_sum += outcome.reward
            prio_timeouts += outcome.timeouts_prio
            normal_timeouts += outcome.timeouts_normal
            if not report.skipped:
                updates += 1
                critic_sum += report.critic_loss
                actor_sum += report.actor_loss
                penalty_sum += report.anchor_penalty
        row = {
            "scheduler": scheduler,
            "repetition": repetition,
            "stage": stage_index,
            "episode": episode,
            "p_prio": stage.p_prio,
            "steps": stage.steps_per_episode,
            "learn_steps": stage.steps_per_episode,
            "updates": updates,
            "reward_mean": reward_sum / stage.steps_per_episode,
            "critic_loss_mean": critic_sum / updates if updates else None,
            "actor_loss_mean": actor_sum / updates if updates else None,
            "anchor_penalty_mean": penalty_sum / updates if updates else None,
            "epsilon_end": agent.exploration.value,
            "prio_events": events,
            "timeouts_prio": prio_timeouts,
            "timeouts_normal": normal_timeouts,
        }
        log.info("%s rep %d ep %d: reward %.4f prio %d/%d eps %.3f", scheduler, repetition, episode,
                 row["reward_mean"], prio_timeouts, events, row["epsilon_end"])
        if on_episode is not None:
            on_episode(row)
        rows.append(row)
    return rows


def evaluate(agent: Agent, protocol: EvalProtocol, env_config: EnvConfig, seed: int) -> dict:
    """Run the frozen actor; no exploration, no learning."""
    env = SchedulingEnv(replace(env_config, p_prio=protocol.p_prio))
    env.reset(seed)
    reward_sum = capacity_sum = 0.0
    normal = prio = events = 0
    for episode in range(protocol.episodes):
        if episode > 0:
            env.reset()
        for _ in range(protocol.steps_per_episode):
            events += env.arrivals()
            outcome = env.serve(agent.act(env.features()))
            reward_sum += outcome.reward
            capacity_sum += outcome.capacity
            normal += outcome.timeouts_normal
            prio += outcome.timeouts_prio
    steps = protocol.episodes * protocol.steps_per_episode
    return {
        "seed": seed,
        "eval_reward_mean": reward_sum / steps,
        "capacity_sum": capacity_sum,
        "timeouts_normal": normal,
        "timeouts_prio": prio,
        "prio_events": events,
    }


def prio_timeout_rate(row: dict) -> float:
    """Fraction of priority events that timed out (0 when there were none)."""
    return row["timeouts_prio"] / row["prio_events"] if row["prio_events"] else 0.0


def _stat(values, fn):
    return None if any(v is None for v in values) else float(fn(values))


def aggregate(rows: list[dict]) -> dict:
    """Normalize rows to the baseline scheduler and summarize across repetitions.

    Adds ``reward_norm_bs`` and ``prio_timeout_norm_bs`` to every row (in place)
    and returns per-scheduler means and population variances.
    """
    bs = [r for r in rows if r["scheduler"] == "BS"]
    if not bs:
        raise AggregationError("no BS rows to normalize against")
    bs_reward = float(np.mean([r["eval_reward_mean"] for r in bs]))
    bs_rate = float(np.mean([prio_timeout_rate(r) for r in bs]))
    for r in rows:
        r["reward_norm_bs"] = r["eval_reward_mean"] / bs_reward if bs_reward else None
        rate = prio_timeout_rate(r)
        if rate == 0.0:
            r["prio_timeout_norm_bs"] = 0.0
        else:
            # undefined when BS saw no priority timeouts at all
            r["prio_timeout_norm_bs"] = rate / bs_rate if bs_rate else None

    summary = {}
    order = [s for s in SCHEDULER_IDS if any(r["scheduler"] == s for r in rows)]
    order += sorted({r["scheduler"] for r in rows} - set(order))
    for sid in order:
        mine = [r for r in rows if r["scheduler"] == sid]
        reward_norm = [r["reward_norm_bs"] for r in mine]
        prio_norm = [r["prio_timeout_norm_bs"] for r in mine]
        rates = np.array([prio_timeout_rate(r) for r in mine])
        summary[sid] = {
            "repetitions": len(mine),
            "eval_reward_mean": float(np.mean([r["eval_reward_mean"] for r in mine])),
            "prio_timeout_rate_mean": float(rates.mean()),
            "prio_events_mean": float(np.mean([r["prio_events"] for r in mine])),
            "timeouts_normal_mean": float(np.mean([r["timeouts_normal"] for r in mine])),
            "reward_norm_bs_mean": _stat(reward_norm, np.mean),
            "reward_norm_bs_var": _stat(reward_norm, np.var),
            "prio_timeout_norm_bs_mean": _stat(prio_norm, np.mean),
            "prio_timeout_norm_bs_var": _stat(prio_norm, np.var),
        }
    return {
        "variance": "population (ddof=0) across repetitions",
        "prio_timeout_rate": "timeouts_prio / prio_events per run",
        "baseline": {"eval_reward_mean": bs_reward, "prio_timeout_rate_mean": bs_rate},
        "schedulers": summary,
    }
