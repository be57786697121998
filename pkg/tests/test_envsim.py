import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdtlab import envsim
from qdtlab.envsim import EnvConfig, EnvError, EnvState

NOISELESS = EnvConfig(noise_std=0.0)


def closed_form(s0, actions, t):
    """State after t+1 noise-free steps, summed directly instead of iterated."""
    C = np.zeros((11, 3))
    C[0, 0] = C[1, 1] = C[2, 2] = 1.0
    s = 0.9 ** (t + 1) * s0
    for k in range(t + 1):
        s = s + 0.9 ** (t - k) * 0.3 * (C @ actions[k])
    return s


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_noise_free_trajectory_matches_closed_form(seed):
    r = np.random.default_rng(seed)
    s0 = r.normal(size=11)
    acts = r.uniform(-1, 1, (50, 3))
    state = EnvState(s0.copy())
    for t in range(50):
        state, _ = envsim.step(state, acts[t], NOISELESS)
        np.testing.assert_allclose(state.s, closed_form(s0, acts, t), rtol=0, atol=1e-12)


def test_reward_at_unit_first_component():
    s = np.zeros(11)
    s[0] = 1.0
    _, r = envsim.step(EnvState(s), np.zeros(3), NOISELESS)
    assert r == 1.9


def test_reward_clips_low():
    s = np.zeros(11)
    s[0] = -10.0
    _, r = envsim.step(EnvState(s), np.zeros(3), NOISELESS)
    assert r == -10.0


def test_reward_upper_clip():
    s = np.zeros(11)
    s[0] = 10.0
    # 2*10 - 0.1*100 = 10 is the unclipped maximum, so narrow the range to see the clip act
    assert envsim.reward_fn(s, np.zeros(3), NOISELESS) == 10.0
    assert envsim.reward_fn(s, np.zeros(3), EnvConfig(noise_std=0.0, reward_clip=(-10.0, 5.0))) == 5.0


def test_reward_uses_pre_transition_state():
    s = np.zeros(11)
    _, r = envsim.step(EnvState(s), np.array([1.0, 0.0, 0.0]), NOISELESS)
    assert r == pytest.approx(-0.01, abs=1e-15)


def test_out_of_range_actions_are_clamped_and_counted():
    st0 = EnvState(np.zeros(11))
    st1, r = envsim.step(st0, np.array([3.0, -2.0, 0.5]), NOISELESS)
    ref, rr = envsim.step(st0, np.array([1.0, -1.0, 0.5]), NOISELESS)
    np.testing.assert_array_equal(st1.s, ref.s)
    assert r == rr and st1.clamped == 2


def test_episode_ends_at_horizon():
    cfg = EnvConfig(noise_std=0.0, max_steps=5)
    s = envsim.reset(cfg)
    for _ in range(5):
        assert not s.done
        s, _ = envsim.step(s, np.zeros(3), cfg)
    assert s.done and s.t == 5
    with pytest.raises(EnvError):
        envsim.step(s, np.zeros(3), cfg)


def test_episode_ends_when_state_diverges():
    s = np.zeros(11)
    s[5] = 120.0
    nxt, _ = envsim.step(EnvState(s), np.zeros(3), NOISELESS)
    assert nxt.done and nxt.t == 1


def test_noisy_step_needs_generator():
    with pytest.raises(EnvError):
        envsim.step(EnvState(np.zeros(11)), np.zeros(3), EnvConfig())


def test_seeded_noise_is_reproducible():
    cfg = EnvConfig()

    def run():
        rng = np.random.default_rng(9)
        s = envsim.reset(cfg, rng)
        for _ in range(10):
            s, _ = envsim.step(s, np.ones(3) * 0.2, cfg, rng)
        return s.s

    np.testing.assert_array_equal(run(), run())


def test_reset_is_zero_without_noise():
    np.testing.assert_array_equal(envsim.reset(NOISELESS).s, np.zeros(11))


def test_noise_scale_is_a_standard_deviation():
    cfg = EnvConfig(noise_std=0.05)
    rng = np.random.default_rng(0)
    s0 = np.stack([envsim.reset(cfg, rng).s for _ in range(4000)])
    assert abs(s0.std() - 0.05) < 0.002


@pytest.mark.parametrize("kw", [{"noise_std": -1.0}, {"max_steps": 0}, {"action_coupling": np.zeros((3, 3))}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        EnvConfig(**kw)


def test_bad_state_shape():
    with pytest.raises(ValueError):
        EnvState(np.zeros(4))
