import numpy as np
import pytest

from anchorsched.agent import Agent, AgentConfig
from anchorsched.env import EnvConfig
from anchorsched.experiment import (
    AggregationError,
    EvalProtocol,
    ExperimentConfig,
    ProtocolError,
    SchedulerSpec,
    StagePlan,
    aggregate,
    build_protocol,
    derive_seed,
    evaluate,
    prio_timeout_rate,
    topological_order,
    train,
)

TINY = ExperimentConfig(
    agent=AgentConfig(hidden_widths=(8, 8), batch_size=4, replay_capacity=32),
    episodes=2,
    steps_per_episode=10,
    evaluation=EvalProtocol(2, 50, 0.05),
)


def train_all(cfg=TINY, seed=0, rep=0):
    trained, logs = {}, {}
    for spec in topological_order(build_protocol(cfg)):
        trained[spec.id], logs[spec.id] = train(spec, cfg, seed, rep, trained)
    return trained, logs


@pytest.fixture(scope="module")
def tiny_protocol():
    return train_all()


def test_protocol_shape():
    specs = {s.id: s for s in build_protocol(ExperimentConfig())}
    assert list(specs) == ["BS", "AU20", "AU100", "AN1", "AN2", "AN3", "AU20+", "AN1+"]
    assert specs["BS"].stages == (StagePlan(0.0001, 30, 10000),)
    assert specs["AU20"].stages[0].p_prio == 0.2 and specs["AU20"].stages[0].episodes == 60
    assert specs["AU100"].stages == (StagePlan(1.0, 30, 10000),)
    for sid, w in [("AN1", 1e5), ("AN2", 1e6), ("AN3", 1e7)]:
        (stage,) = specs[sid].stages
        assert stage.init_from == "AU100" and stage.anchor == ("AU100", w) and stage.p_prio == 0.0001
    assert specs["AU20+"].stages[0].init_from == "AU20" and specs["AU20+"].stages[0].p_prio == 0.0
    assert specs["AN1+"].stages[0].init_from == "AN1" and specs["AN1+"].stages[0].anchor is None
    assert specs["AN1+"].dependencies == ("AN1",)


def test_training_budget_parity():
    specs = {s.id: s for s in build_protocol(ExperimentConfig())}
    an_total = specs["AU100"].stages[0].total_steps + specs["AN2"].stages[0].total_steps
    assert specs["AU20"].stages[0].total_steps == an_total == 2 * 30 * 10_000


def test_topological_order_respects_dependencies():
    order = [s.id for s in topological_order(build_protocol(TINY))]
    for before, after in [("AU100", "AN1"), ("AU100", "AN3"), ("AU20", "AU20+"), ("AN1", "AN1+")]:
        assert order.index(before) < order.index(after)


def test_missing_dependency_is_a_protocol_error():
    specs = {s.id: s for s in build_protocol(TINY)}
    with pytest.raises(ProtocolError):
        train(specs["AN1"], TINY, 0, 0, {})
    with pytest.raises(ProtocolError):
        topological_order([SchedulerSpec("X", (StagePlan(0.0, 1, 1, init_from="nope"),))])


def test_seed_lineage_is_stable_and_distinct():
    assert derive_seed(7, 0, "BS/eval") == derive_seed(7, 0, "BS/eval")
    seeds = {derive_seed(7, r, f"{s}/eval") for r in range(3) for s in ("BS", "AU20", "AN1")}
    assert len(seeds) == 9


def test_training_is_deterministic():
    specs = {s.id: s for s in build_protocol(TINY)}
    a, log_a = train(specs["BS"], TINY, 3, 1)
    b, log_b = train(specs["BS"], TINY, 3, 1)
    assert a.actor.params.tobytes() == b.actor.params.tobytes()
    assert a.critic.params.tobytes() == b.critic.params.tobytes()
    assert log_a == log_b


def test_anchored_stage_starts_from_source(tiny_protocol):
    trained, _ = tiny_protocol
    specs = {s.id: s for s in build_protocol(TINY)}
    source = trained["AU100"]
    anchor = source.snapshot_anchor(1e5)
    # rerun AN1 with zero steps of effect: check the anchor and the clone
    clone = source.clone()
    assert clone.actor.params.tobytes() == source.actor.params.tobytes()
    an1 = trained["AN1"]
    assert np.array_equal(an1.anchor.theta_star, anchor.theta_star)
    assert np.array_equal(an1.anchor.fisher, anchor.fisher)
    assert an1.anchor.weight == 1e5 and trained["AN3"].anchor.weight == 1e7
    assert specs["AN1"].stages[0].init_from == "AU100"


def test_continued_anchor_is_retained(tiny_protocol):
    trained, _ = tiny_protocol
    a, b = trained["AN1"].anchor, trained["AN1+"].anchor
    assert a is b or (np.array_equal(a.theta_star, b.theta_star) and np.array_equal(a.fisher, b.fisher)
                      and a.weight == b.weight)
    assert trained["AU20+"].anchor is None and trained["BS"].anchor is None


def test_training_logs(tiny_protocol):
    _, logs = tiny_protocol
    assert len(logs["AU20"]) == 2 * TINY.episodes
    assert len(logs["BS"]) == TINY.episodes
    total = lambda sid: sum(r["learn_steps"] for r in logs[sid])
    assert total("AU20") == total("AU100") + total("AN2")
    assert all(r["prio_events"] == 0 for r in logs["AU20+"])
    # with p_prio = 1 every step with a nonempty queue is an event
    assert sum(r["prio_events"] for r in logs["AU100"]) >= 0.8 * 2 * 10
    eps = [r["epsilon_end"] for r in logs["BS"]]
    assert eps[-1] == 0.0


def test_au100_priority_events_track_steps():
    cfg = ExperimentConfig(agent=TINY.agent, episodes=1, steps_per_episode=400)
    spec = next(s for s in build_protocol(cfg) if s.id == "AU100")
    _, log = train(spec, cfg, 0, 0)
    # the queue is empty on at most a small fraction of steps at this load
    assert log[0]["prio_events"] >= 0.95 * 400


def test_evaluate_is_pure_and_deterministic(tiny_protocol):
    trained, _ = tiny_protocol
    agent = trained["AN2"]
    before = agent.actor.params.tobytes(), agent.critic.params.tobytes()
    r1 = evaluate(agent, TINY.evaluation, TINY.env, 5)
    r2 = evaluate(agent, TINY.evaluation, TINY.env, 5)
    assert r1 == r2
    assert (agent.actor.params.tobytes(), agent.critic.params.tobytes()) == before


def test_uniform_agent_on_empty_environment():
    agent = Agent.create(5, TINY.agent, np.random.default_rng(0))
    agent.actor.params[:] = 0.0
    cfg = EnvConfig(p_job=0.0)
    row = evaluate(agent, EvalProtocol(1, 100, 0.0), cfg, 0)
    assert row["capacity_sum"] == 0.0 and row["eval_reward_mean"] == 0.0


def test_eval_priority_event_count_matches_binomial():
    # at the desk eval rate, 40000 steps give about 40 events (queue is almost never empty)
    agent = Agent.create(5, TINY.agent, np.random.default_rng(0))
    counts = [evaluate(agent, EvalProtocol(1, 20_000, 0.001), TINY.env, s)["prio_events"] for s in range(3)]
    mean = np.mean(counts)
    assert abs(mean - 20) < 3 * np.sqrt(20 / 3)


def _row(sid, rep, reward, prio, events=10):
    return {"scheduler": sid, "repetition": rep, "eval_reward_mean": reward,
            "timeouts_prio": prio, "prio_events": events, "timeouts_normal": 0}


def test_aggregate_normalizes_to_bs():
    rows = [_row("BS", r, x, p) for r, (x, p) in enumerate([(1.0, 4), (2.0, 6), (3.0, 5)])]
    rows += [_row("AU100", r, 2.0 * x, 0) for r, x in enumerate([1.0, 2.0, 3.0])]
    report = aggregate(rows)
    bs = report["schedulers"]["BS"]
    assert bs["reward_norm_bs_mean"] == pytest.approx(1.0, abs=1e-12)
    assert bs["prio_timeout_norm_bs_mean"] == pytest.approx(1.0, abs=1e-12)
    au = report["schedulers"]["AU100"]
    assert au["reward_norm_bs_mean"] == pytest.approx(2.0, abs=1e-12)
    assert au["prio_timeout_norm_bs_mean"] == 0.0
    # rewards (1, 2, 3) normalized by their mean 2 -> (0.5, 1, 1.5): variance 1/6
    assert bs["reward_norm_bs_var"] == pytest.approx(1 / 6, abs=1e-12)
    assert all(r["reward_norm_bs"] is not None for r in rows)


def test_aggregate_statistics_convention():
    values = [1.0, 2.0, 3.0]
    rows = [_row("BS", r, 1.0, 1) for r in range(3)] + [_row("X", r, v, 1) for r, v in enumerate(values)]
    s = aggregate(rows)["schedulers"]["X"]
    assert s["eval_reward_mean"] == pytest.approx(2.0)
    assert s["reward_norm_bs_var"] == pytest.approx(2 / 3, abs=1e-12)


def test_aggregate_requires_bs():
    with pytest.raises(AggregationError):
        aggregate([_row("AU20", 0, 1.0, 0)])


def test_prio_timeout_rate():
    assert prio_timeout_rate(_row("BS", 0, 0.0, 3, 12)) == 0.25
    assert prio_timeout_rate(_row("BS", 0, 0.0, 0, 0)) == 0.0


def test_aggregate_undefined_when_bs_has_no_priority_timeouts():
    rows = [_row("BS", r, 1.0, 0, 0) for r in range(3)] + [_row("AN1", r, 1.0, 1, 2) for r in range(3)]
    report = aggregate(rows)
    assert report["schedulers"]["AN1"]["prio_timeout_norm_bs_mean"] is None
    assert report["schedulers"]["BS"]["prio_timeout_norm_bs_mean"] == 0.0
    assert report["schedulers"]["AN1"]["reward_norm_bs_mean"] == 1.0
