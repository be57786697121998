import numpy as np
import pytest

from conftest import tiny_model
from qdtlab import datagen
from qdtlab.datagen import DatasetStats
from qdtlab.envsim import EnvConfig
from qdtlab.evalharness import (
    EvalConfig,
    EvalReport,
    constant_policy,
    coverage_windows,
    episode_records,
    evaluate,
    evaluate_params,
    generalization_test,
    improvement_pct,
    model_policy,
    offline_mse,
    rollout,
    rollout_batch,
    summarize,
    synergy_summary,
    table_rows,
)
from qdtlab.model import init_params
from qdtlab.trainer import mse_loss, stack_windows

UNIT_STATS = DatasetStats(np.zeros(11), np.ones(11), 100.0)
NOISELESS = EnvConfig(noise_std=0.0)


def simulate_constant(a, steps=1000):
    """Plain loop over the dynamics, independent of envsim; returns (total, last reward)."""
    a = np.asarray(a, dtype=float)
    s = np.zeros(11)
    total = r = 0.0
    for _ in range(steps):
        r = min(max(2 * s[0] - 0.01 * (a @ a) - 0.1 * (s @ s), -10.0), 10.0)
        total += r
        s = 0.9 * s
        s[:3] += 0.3 * a
        if np.linalg.norm(s) > 100:
            break
    return total, r


def test_zero_action_from_rest_returns_zero():
    ep = rollout(constant_policy([0.0, 0.0, 0.0]), UNIT_STATS, 50.0, 0, NOISELESS)
    assert ep.ret == 0.0 and ep.length == 1000


def test_constant_action_matches_simulation_oracle():
    ep = rollout(constant_policy([1.0, 0.0, 0.0]), UNIT_STATS, 50.0, 0, NOISELESS)
    expected, last = simulate_constant([1.0, 0.0, 0.0])
    assert abs(ep.ret - expected) < 1e-9
    # s0 settles at 3, so per-step reward approaches 2*3 - 0.01 - 0.9
    assert last == pytest.approx(5.09, abs=1e-9)


def test_rtg_identity_holds_at_every_step(rng):
    eps = rollout_batch(constant_policy([0.3, -0.2, 0.5]), UNIT_STATS, [30.0, 90.0], [1, 2],
                        EnvConfig(max_steps=200), 20, trace=True)
    for ep in eps:
        cum = 0.0
        for R, r in zip(ep.rtg_trace, ep.reward_trace):
            assert R == ep.target - cum
            cum += r
        assert cum == ep.ret


def test_policy_sees_zeroed_current_action_and_scaled_inputs():
    seen = []

    def spy(w):
        seen.append(w)
        return np.full((w.batch_size, w.length, 3), 0.4)

    stats = DatasetStats(np.zeros(11), np.full(11, 2.0), 10.0)
    rollout(spy, stats, 50.0, 0, EnvConfig(noise_std=0.0, max_steps=30), 5)
    for t, w in enumerate(seen):
        assert not w.actions[0, -1].any()
        assert np.all(w.actions[0, w.valid[0]][:-1] == 0.4)
        assert w.valid[0].sum() == min(t + 1, 5)
        assert w.timesteps[0, -1] == t
    # raw target 50 divided by the return scale; states divided by their std
    assert seen[0].rtg[0, -1] == 5.0
    assert not seen[0].states[0, -1].any()


def test_stub_grand_mean_matches_oracle_for_every_target():
    cfg = EvalConfig(targets=(30, 50, 70, 90), episodes_per_target=2, noise_enabled=False)
    rep = evaluate(constant_policy([1.0, 0.0, 0.0]), cfg, UNIT_STATS, "stub")
    expected, _ = simulate_constant([1.0, 0.0, 0.0])
    for m in rep.per_target_mean:
        assert abs(m - expected) < 1e-9


def test_default_grid_gives_80_records_and_is_deterministic():
    cfg = EvalConfig(max_steps=50)
    a = evaluate(constant_policy([0.5, 0.1, 0.0]), cfg, UNIT_STATS, "stub")
    b = evaluate(constant_policy([0.5, 0.1, 0.0]), cfg, UNIT_STATS, "stub")
    assert len(episode_records(a)) == 80
    assert all(len(r) == 20 for r in a.episode_returns)
    assert a.to_dict() == b.to_dict()
    c = evaluate(constant_policy([0.5, 0.1, 0.0]), EvalConfig(max_steps=50, eval_seed=1), UNIT_STATS, "stub")
    assert c.grand_mean != a.grand_mean


def test_returns_are_bounded_by_clip_times_horizon(rng):
    cfg = EvalConfig(max_steps=60, episodes_per_target=3)
    rep = evaluate(lambda w: rng.uniform(-1, 1, (w.batch_size, w.length, 3)), cfg, UNIT_STATS)
    assert np.abs(np.concatenate(rep.episode_returns)).max() <= 60 * 10


def test_summary_statistics():
    recs = [(30.0, 0, 1.0), (30.0, 1, 3.0), (50.0, 0, 5.0), (50.0, 1, 5.0)]
    rep = summarize("v", recs, param_count_=2_000_000, baseline_mean=2.0)
    assert rep.per_target_mean == [2.0, 5.0] and rep.per_target_std == [1.0, 0.0]
    assert rep.grand_mean == 3.5 and rep.grand_std == 0.5
    assert rep.improvement_pct == 75.0 and rep.return_per_million_params == 1.75
    assert EvalReport.from_dict(rep.to_dict()) == rep


def test_improvement_uses_baseline_magnitude():
    assert improvement_pct(-50.0, -100.0) == 50.0
    assert np.isnan(improvement_pct(1.0, 0.0))


def test_synergy_and_table():
    reps = {k: summarize(k, [(30.0, 0, v)], 10, 0.1) for k, v in
            (("standard", 10.0), ("quantum", 25.0), ("q-attn", 12.0), ("q-ff", 15.0))}
    syn = synergy_summary(reps)
    assert syn["synergy"] == 15.0 - (2.0 + 5.0) and syn["combined_exceeds_sum"]
    rows = table_rows(reps)
    assert [r["variant"] for r in rows] == ["standard", "quantum", "q-attn", "q-ff"]
    assert {"avg_return", "avg_std", "parameters", "final_loss"} <= set(rows[0])


def test_evaluate_params_runs_a_model(small_dataset):
    cfg = tiny_model()
    rep = evaluate_params(init_params(cfg), cfg, EvalConfig(targets=(30,), episodes_per_target=2, max_steps=15),
                          small_dataset.stats)
    assert rep.variant == "quantum" and rep.param_count > 0 and len(rep.episode_returns[0]) == 2


# --- generalisation ------------------------------------------------------------

def test_coverage_windows_partition_every_step(small_dataset):
    items = coverage_windows(small_dataset, 7, small_dataset.stats)
    assert sum(int(v.sum()) for *_, v in items) == small_dataset.total_steps


def test_zero_action_mse_equals_mean_squared_action(small_dataset):
    mse, n = offline_mse(constant_policy([0.0, 0.0, 0.0]), small_dataset, small_dataset.stats, 5, batch_size=7)
    acts = np.concatenate([t.actions for t in small_dataset.trajectories])
    assert n == len(acts)
    assert abs(mse - float((acts ** 2).sum(axis=1).mean())) < 1e-10


def test_offline_mse_on_training_tier_matches_trainer_loss(small_dataset):
    cfg = tiny_model()
    params = init_params(cfg, 3)
    policy = model_policy(params, cfg)
    mse, _ = offline_mse(policy, small_dataset, small_dataset.stats, cfg.context_len, batch_size=5)
    w = stack_windows(coverage_windows(small_dataset, cfg.context_len, small_dataset.stats))
    direct = mse_loss(policy(w), w.actions, w.valid).item()
    assert abs(mse - direct) < 1e-12


def test_generalization_emits_four_blocks(small_dataset, short_env):
    cfg = tiny_model()
    tiers = {t: datagen.collect(datagen.TierSpec(datagen.Tier(t), 3, s), short_env, seed=1)
             for t, s in (("expert", 0.05), ("random", 0.8))}
    rep = generalization_test(init_params(cfg), cfg, small_dataset.stats, tiers,
                              EvalConfig(targets=(30,), episodes_per_target=2, max_steps=10))
    assert [(b["tier"], b["measurement"]) for b in rep.blocks] == [
        ("expert", "offline_mse"), ("expert", "rollout_tier_stats"),
        ("random", "offline_mse"), ("random", "rollout_tier_stats")]
