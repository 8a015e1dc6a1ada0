import numpy as np
import numpy.testing as npt
import pytest

from star.config import RunConfig
from star.glimpse import Window, glimpse_length
from star.network import (
    EVAL_TAG,
    TRAIN_TAG,
    Model,
    build_trajectories,
    chunk_backward,
    episode_streams,
    lc_gradient_gate,
    load_checkpoint,
    monte_carlo_predict,
    rollout_episode,
    run_chunk,
    save_checkpoint,
    sweep_times,
    tiny_gate_config,
    train_model,
    train_step,
)
from star.numerics import linear_forward, relu_forward, softmax
from star.policy import reinforce_contribution


def random_window(cfg, rng, label=0):
    return Window(rng.normal(size=(cfg.window_len, cfg.n_channels)), label=label)


class TestShapes:
    def test_default_shape_audit(self, default_shape_cfg):
        """Every intermediate under the documented default geometry."""
        cfg = default_shape_cfg
        assert (cfg.window_len, cfg.n_channels) == (20, 23)
        assert glimpse_length(cfg) == 27
        assert cfg.observation_width == 220
        assert cfg.core_input_width == 120          # 3 agents x 40 filters
        model = Model(cfg)
        assert model.enc_glimpse[0].weight.shape == (128, 27)
        assert model.enc_loc[0].weight.shape == (128, 2)
        assert model.enc_out[0].weight.shape == (220, 128)
        assert model.conv.weight.shape == (40, 220)  # 1 x M filters, M = obs width
        assert model.core.weight.shape == (4 * 220, 120 + 220)
        for head in model.loc_heads:
            assert head.params.weight.shape == (1, 220 + 220)
        assert model.time_head.params.weight.shape == (1, 220)
        assert model.classifier.weight.shape == (cfg.n_classes, 220)

        rng = np.random.default_rng(0)
        w = random_window(cfg, rng)
        res = run_chunk(model, cfg, w.values, w.label,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        assert res.tape["glimpses"][0].shape == (1, 3, 27)
        assert res.tape["obs"][0].shape == (1, 3, 220)
        assert res.tape["hidden"][0].shape == (1, 220)
        assert res.tape["loc_inputs"][0].shape == (1, 3, 440)
        assert res.final_probs.shape == (1, cfg.n_classes)

    def test_encoder_zero_params_zero_observation(self, tiny_cfg):
        model = Model(tiny_cfg)
        for name in ("enc_glimpse", "enc_loc", "enc_out"):
            model.groups[name].weight[...] = 0.0
            model.groups[name].bias[...] = 0.0
        rng = np.random.default_rng(1)
        w = random_window(tiny_cfg, rng)
        res = run_chunk(model, tiny_cfg, w.values, 0,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        npt.assert_array_equal(res.tape["obs"][0], np.zeros_like(res.tape["obs"][0]))

    def test_shared_encoder_same_glimpse_same_observation(self, tiny_cfg):
        # both agents at the same location see the same window cells, and the
        # shared encoder maps them to identical observations
        model = Model(tiny_cfg)
        rng = np.random.default_rng(2)
        w = random_window(tiny_cfg, rng)
        init = np.array([[0.25, 0.25, -0.5]])  # both agents at l=0.25
        res = run_chunk(model, tiny_cfg, w.values, 0, n_episodes=1,
                        init_override=init, actions_override=None,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        obs = res.tape["obs"][0]
        npt.assert_array_equal(obs[0, 0], obs[0, 1])

    def test_zero_conv_filters_zero_merge(self, tiny_cfg):
        model = Model(tiny_cfg)
        model.groups["conv_merge"].weight[...] = 0.0
        model.groups["conv_merge"].bias[...] = 0.0
        rng = np.random.default_rng(3)
        w = random_window(tiny_cfg, rng)
        streams = episode_streams(0, TRAIN_TAG, 0, 0, 1)
        res = run_chunk(model, tiny_cfg, w.values, 0, streams=streams, want_tape=True)
        # zero merge means the core input is all zero at every step; with the
        # core's state evolving only from biases, probabilities stay symmetric
        assert res.final_probs.shape == (1, tiny_cfg.n_classes)

    def test_classifier_uniform_when_zeroed(self, tiny_cfg):
        model = Model(tiny_cfg)
        model.groups["classifier"].weight[...] = 0.0
        model.groups["classifier"].bias[...] = 0.0
        rng = np.random.default_rng(4)
        w = random_window(tiny_cfg, rng)
        probs, _ = monte_carlo_predict(w, model, tiny_cfg,
                                       episode_streams(0, EVAL_TAG, 0, 0, 2))
        npt.assert_allclose(probs, np.full(tiny_cfg.n_classes, 1 / tiny_cfg.n_classes),
                            atol=1e-12)

    def test_merge_permutation_permutes_rows(self, tiny_cfg, rng):
        # the 1 x M conv treats agent rows independently
        from star.numerics import conv_1xm_forward
        model = Model(tiny_cfg)
        obs = rng.normal(size=(4, tiny_cfg.n_agents, tiny_cfg.observation_width))
        out = conv_1xm_forward(model.conv, obs)
        perm = np.ascontiguousarray(obs[:, ::-1, :])
        out_perm = conv_1xm_forward(model.conv, perm)
        npt.assert_allclose(out_perm, out[:, ::-1, :], rtol=1e-12, atol=1e-14)


class TestPolicyWiring:
    def test_sigma_zero_actions_equal_tanh_of_head_outputs(self, tiny_cfg):
        cfg = tiny_cfg.replace(variance=0.0)
        model = Model(cfg)
        rng = np.random.default_rng(5)
        w = random_window(cfg, rng)
        res = run_chunk(model, cfg, w.values, 0,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        for s in range(cfg.episode_len):
            for i in range(cfg.n_agents):
                x = res.tape["loc_inputs"][s][:, i, :]
                expected = np.tanh(linear_forward(model.loc_heads[i].params, x))[..., 0]
                npt.assert_allclose(res.values[s, :, i], expected, atol=1e-12)

    def test_per_agent_heads_generally_differ(self, tiny_cfg):
        model = Model(tiny_cfg)
        w0 = model.loc_heads[0].params.weight
        w1 = model.loc_heads[1].params.weight
        assert not np.array_equal(w0, w1)

    def test_time_mean_independent_of_observations(self, tiny_cfg):
        # the time head reads the core state only; same hidden state, same mean
        model = Model(tiny_cfg)
        rng = np.random.default_rng(6)
        h = rng.normal(size=(3, tiny_cfg.core_width))
        m1 = model.time_head.mean(h)
        m2 = model.time_head.mean(h)  # observations never enter the call
        npt.assert_array_equal(m1, m2)
        assert model.time_head.params.in_width == tiny_cfg.core_width


class TestRollout:
    def test_trajectory_has_exactly_s_steps(self, tiny_cfg):
        model = Model(tiny_cfg)
        rng = np.random.default_rng(7)
        w = random_window(tiny_cfg, rng)
        traj = rollout_episode(w, model, tiny_cfg, np.random.default_rng(0))
        assert len(traj.steps) == tiny_cfg.episode_len
        for step in traj.steps:
            assert len(step.loc_actions) == tiny_cfg.n_agents
            assert step.time_action is not None
        assert traj.reward in (0, 1)

    def test_temporal_ablation_removes_exactly_one_action(self, tiny_cfg):
        cfg = tiny_cfg.replace(use_time_attention=False)
        model = Model(cfg)
        rng = np.random.default_rng(8)
        w = random_window(cfg, rng)
        traj = rollout_episode(w, model, cfg, np.random.default_rng(0))
        for step in traj.steps:
            assert len(step.loc_actions) == cfg.n_agents
            assert step.time_action is None

    def test_time_sweep_covers_window(self, tiny_cfg):
        cfg = tiny_cfg.replace(use_time_attention=False)
        sweep = sweep_times(cfg)
        assert sweep[0] == -1.0 and sweep[-1] == 1.0
        model = Model(cfg)
        rng = np.random.default_rng(9)
        w = random_window(cfg, rng)
        traj = rollout_episode(w, model, cfg, np.random.default_rng(0))
        npt.assert_allclose([s.time for s in traj.steps], sweep, atol=1e-15)

    def test_sigma_zero_fixed_init_bitwise_identical(self, tiny_cfg):
        cfg = tiny_cfg.replace(variance=0.0)
        model = Model(cfg)
        rng = np.random.default_rng(10)
        w = random_window(cfg, rng)
        init = np.array([0.2, -0.3, 0.1])
        t1 = rollout_episode(w, model, cfg, np.random.default_rng(0), init_override=init)
        t2 = rollout_episode(w, model, cfg, np.random.default_rng(1), init_override=init)
        npt.assert_array_equal(t1.final_prediction, t2.final_prediction)
        for s1, s2 in zip(t1.steps, t2.steps):
            npt.assert_array_equal(s1.prediction, s2.prediction)
            npt.assert_array_equal(s1.locations, s2.locations)

    def test_same_stream_same_trajectory(self, tiny_cfg):
        model = Model(tiny_cfg)
        rng = np.random.default_rng(11)
        w = random_window(tiny_cfg, rng)
        t1 = rollout_episode(w, model, tiny_cfg, np.random.default_rng(42))
        t2 = rollout_episode(w, model, tiny_cfg, np.random.default_rng(42))
        for s1, s2 in zip(t1.steps, t2.steps):
            assert s1.loc_actions == s2.loc_actions
            assert s1.time_action == s2.time_action

    def test_log_density_matches_action_fields(self, tiny_cfg):
        from star.policy import gaussian_log_pdf
        model = Model(tiny_cfg)
        rng = np.random.default_rng(12)
        w = random_window(tiny_cfg, rng)
        traj = rollout_episode(w, model, tiny_cfg, np.random.default_rng(3))
        for step in traj.steps:
            for a in step.loc_actions:
                assert a.log_density == gaussian_log_pdf(a.sample, a.mean, tiny_cfg.variance)
                assert -1.0 <= a.value <= 1.0


class TestMonteCarlo:
    def test_m1_equals_single_rollout(self, tiny_cfg):
        cfg = tiny_cfg.replace(mc_copies=1)
        model = Model(cfg)
        rng = np.random.default_rng(13)
        w = random_window(cfg, rng)
        streams = episode_streams(0, EVAL_TAG, 0, 0, 1)
        probs, trajs = monte_carlo_predict(w, model, cfg, streams)
        npt.assert_array_equal(probs, trajs[0].final_prediction)

    def test_sigma_zero_shared_init_mean_equals_each_copy(self, tiny_cfg):
        cfg = tiny_cfg.replace(variance=0.0, mc_copies=3)
        model = Model(cfg)
        rng = np.random.default_rng(14)
        w = random_window(cfg, rng)
        init = np.tile(np.array([[0.5, -0.5, 0.0]]), (3, 1))
        res = run_chunk(model, cfg, w.values, 0, n_episodes=3, init_override=init,
                        streams=episode_streams(0, EVAL_TAG, 0, 0, 3))
        for e in range(3):
            npt.assert_array_equal(res.final_probs[e], res.final_probs[0])

    def test_averaged_prediction_on_simplex(self, tiny_cfg):
        model = Model(tiny_cfg)
        rng = np.random.default_rng(15)
        w = random_window(tiny_cfg, rng)
        probs, _ = monte_carlo_predict(w, model, tiny_cfg,
                                       episode_streams(0, EVAL_TAG, 0, 0, 5))
        assert abs(probs.sum() - 1.0) <= 1e-12
        assert (probs >= 0).all()

    def test_averaging_reduces_variance(self, tiny_cfg):
        # spread of the averaged prediction shrinks when M grows
        model = Model(tiny_cfg)
        rng = np.random.default_rng(16)
        w = random_window(tiny_cfg, rng)
        reps = 200
        firsts_m1 = np.empty(reps)
        firsts_m8 = np.empty(reps)
        for r in range(reps):
            p1, _ = monte_carlo_predict(w, model, tiny_cfg,
                                        [np.random.default_rng((1, r))],
                                        want_trajectories=False)
            p8, _ = monte_carlo_predict(w, model, tiny_cfg,
                                        [np.random.default_rng((2, r, m)) for m in range(8)],
                                        want_trajectories=False)
            firsts_m1[r] = p1[0]
            firsts_m8[r] = p8[0]
        assert firsts_m8.var() < firsts_m1.var()


class TestChanceReward:
    def test_untrained_reward_near_chance(self):
        cfg = RunConfig(window_len=8, n_channels=6, n_classes=4, n_agents=2,
                        episode_len=6, mc_copies=1, enc_glimpse_width=12,
                        enc_loc_width=12, enc_out_width=12, conv_filters=4,
                        core_width=12, seed=21)
        model = Model(cfg)
        rng = np.random.default_rng(17)
        episodes = 2000
        per_class = episodes // cfg.n_classes
        rewards = []
        for label in range(cfg.n_classes):
            for e in range(per_class):
                w = random_window(cfg, rng, label=label)
                res = run_chunk(model, cfg, w.values, label,
                                streams=[np.random.default_rng((3, label, e))])
                rewards.append(int(res.rewards[0]))
        assert abs(np.mean(rewards) - 1 / cfg.n_classes) <= 0.05


class TestTrainStep:
    def test_zero_learning_rate_leaves_params_bitwise(self, tiny_cfg):
        cfg = tiny_cfg.replace(learning_rate=0.0)
        model = Model(cfg)
        before = {k: (g.weight.copy(), g.bias.copy()) for k, g in model.groups.items()}
        rng = np.random.default_rng(18)
        batch = [random_window(cfg, rng, label=i % cfg.n_classes) for i in range(4)]
        train_step(model, cfg, batch)
        for k, g in model.groups.items():
            npt.assert_array_equal(g.weight, before[k][0])
            npt.assert_array_equal(g.bias, before[k][1])

    def test_mean_reward_in_unit_interval(self, tiny_cfg):
        model = Model(tiny_cfg)
        rng = np.random.default_rng(19)
        batch = [random_window(tiny_cfg, rng, label=i % tiny_cfg.n_classes) for i in range(5)]
        loss, reward = train_step(model, tiny_cfg, batch)
        assert 0.0 <= reward <= 1.0
        assert loss > 0.0

    def test_worker_count_does_not_change_results(self, tiny_cfg):
        rng = np.random.default_rng(20)
        windows = [random_window(tiny_cfg, rng, label=i % tiny_cfg.n_classes)
                   for i in range(6)]
        results = {}
        for workers in (1, 2):
            cfg = tiny_cfg.replace(workers=workers, epochs=2, fuse_windows=2)
            model = Model(cfg)
            train_model(model, cfg, windows)
            results[workers] = {k: g.weight.copy() for k, g in model.groups.items()}
        for k in results[1]:
            npt.assert_array_equal(results[1][k], results[2][k])

    def test_empty_batch_rejected(self, tiny_cfg):
        model = Model(tiny_cfg)
        with pytest.raises(ValueError):
            train_step(model, tiny_cfg, [])


class TestGradientGate:
    def test_full_lc_gradient_matches_finite_differences(self):
        assert lc_gradient_gate() < 1e-4

    @pytest.mark.parametrize("flags", [
        dict(n_agents=1, use_encoder=False, use_conv_merge=False, use_time_attention=False),
        dict(n_agents=1, use_encoder=True, use_conv_merge=False, use_time_attention=False),
        dict(n_agents=2, use_encoder=True, use_conv_merge=True, per_agent_encoders=True),
    ])
    def test_gate_passes_for_ablation_variants(self, flags):
        cfg = tiny_gate_config().replace(**flags)
        assert lc_gradient_gate(cfg) < 1e-4

    def test_gate_config_is_tiny(self):
        cfg = tiny_gate_config()
        assert (cfg.window_len, cfg.n_channels, cfg.n_agents) == (8, 6, 2)
        assert (cfg.episode_len, cfg.mc_copies, cfg.variance) == (3, 1, 0.0)


class TestReinforcePaths:
    def test_trajectory_contribution_matches_engine(self, tiny_cfg):
        # dual route: the per-trajectory accumulation must agree with the
        # engine's vectorized accumulation for the same episode
        model = Model(tiny_cfg)
        rng = np.random.default_rng(22)
        w = random_window(tiny_cfg, rng)
        streams = episode_streams(0, TRAIN_TAG, 0, 0, 1)
        res = run_chunk(model, tiny_cfg, w.values, w.label, streams=streams, want_tape=True)

        engine = model.grad_clone()
        coeffs = np.array([0.7])
        d_zero = np.zeros_like(res.final_probs)
        chunk_backward(engine, tiny_cfg, res, d_zero, coeffs)

        manual = model.grad_clone()
        traj = build_trajectories(res, tiny_cfg, keep_head_inputs=True)[0]
        reinforce_contribution(traj, reward=1, baseline=0.3, loc_heads=manual.loc_heads,
                               time_head=manual.time_head, mc_copies=1, weight=1.0)
        for i in range(tiny_cfg.n_agents):
            npt.assert_allclose(manual.groups[f"loc_head_{i}"].grad_weight,
                                engine.groups[f"loc_head_{i}"].grad_weight, rtol=1e-10, atol=1e-12)
        npt.assert_allclose(manual.groups["time_head"].grad_weight,
                            engine.groups["time_head"].grad_weight, rtol=1e-10, atol=1e-12)

    def test_incomplete_trajectory_rejected(self, tiny_cfg):
        model = Model(tiny_cfg)
        from star.network import Trajectory
        with pytest.raises(RuntimeError, match="incomplete"):
            reinforce_contribution(Trajectory(steps=[], reward=None),
                                   1, 0.0, model.loc_heads, model.time_head)

    def test_prediction_target_moves_classifier(self, tiny_cfg):
        cfg = tiny_cfg.replace(reinforce_target="prediction")
        model = Model(cfg)
        rng = np.random.default_rng(23)
        w = random_window(cfg, rng)
        res = run_chunk(model, cfg, w.values, w.label,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        clone = model.grad_clone()
        chunk_backward(clone, cfg, res, np.zeros_like(res.final_probs), np.array([1.0]))
        assert np.abs(clone.groups["classifier"].grad_weight).sum() > 0
        # location heads get no credit in prediction mode
        assert np.abs(clone.groups["loc_head_0"].grad_weight).sum() == 0


class TestSingleStepSurfaces:
    def test_step_ops_reproduce_engine_rollout(self, tiny_cfg):
        # compose encode -> merge -> core -> classify by hand and compare
        # against the vectorized engine for a variance-0 episode
        from star.glimpse import NormalizedLocation, foveate
        from star.network import classify, core_step, encode_observation, merge_observations
        from star.numerics import LstmState

        cfg = tiny_cfg.replace(variance=0.0)
        model = Model(cfg)
        rng = np.random.default_rng(30)
        w = random_window(cfg, rng)
        init = np.array([0.3, -0.6, 0.2])
        traj = rollout_episode(w, model, cfg, np.random.default_rng(0), init_override=init)

        state = LstmState.zeros(cfg.core_width)
        locs, t = init[:cfg.n_agents], float(init[cfg.n_agents])
        for step in traj.steps:
            obs = np.stack([
                encode_observation(model, cfg,
                                   foveate(w, NormalizedLocation(t, locs[i]), cfg).flat(),
                                   locs[i], t, agent=i)
                for i in range(cfg.n_agents)
            ])
            _, r_g = merge_observations(model, cfg, obs)
            state = core_step(model, r_g, state)
            probs = classify(model, state.hidden)
            npt.assert_allclose(probs, step.prediction, rtol=1e-10, atol=1e-12)
            locs = np.array([a.value for a in step.loc_actions])
            t = step.time_action.value

    def test_propose_actions_shapes_and_independence(self, tiny_cfg):
        from star.network import propose_actions
        model = Model(tiny_cfg)
        rng = np.random.default_rng(31)
        h = rng.normal(size=tiny_cfg.core_width)
        obs = rng.normal(size=(tiny_cfg.n_agents, tiny_cfg.observation_width))
        locs, time_action = propose_actions(model, tiny_cfg, h, obs, np.random.default_rng(5))
        assert len(locs) == tiny_cfg.n_agents
        assert all(-1.0 <= a.value <= 1.0 for a in locs)
        # perturbing the observations never moves the time mean
        obs2 = obs + 100.0
        _, time_action2 = propose_actions(model, tiny_cfg, h, obs2, np.random.default_rng(5))
        assert time_action.mean == time_action2.mean


class TestAblationShapes:
    def test_single_agent_keeps_derived_shapes(self, tiny_cfg):
        cfg = tiny_cfg.replace(n_agents=1)
        model = Model(cfg)
        assert cfg.core_input_width == cfg.conv_filters
        rng = np.random.default_rng(24)
        w = random_window(cfg, rng)
        traj = rollout_episode(w, model, cfg, np.random.default_rng(0))
        assert len(traj.steps[0].loc_actions) == 1

    def test_encoder_off_feeds_raw_glimpses(self, tiny_cfg):
        cfg = tiny_cfg.replace(use_encoder=False, use_conv_merge=False)
        assert cfg.observation_width == glimpse_length(cfg)
        model = Model(cfg)
        assert "enc_glimpse" not in model.groups
        assert model.core.in_width == cfg.n_agents * glimpse_length(cfg) + cfg.core_width
        rng = np.random.default_rng(25)
        w = random_window(cfg, rng)
        res = run_chunk(model, cfg, w.values, 0,
                        streams=episode_streams(0, TRAIN_TAG, 0, 0, 1), want_tape=True)
        npt.assert_array_equal(res.tape["obs"][0], res.tape["glimpses"][0])

    def test_conv_off_flattens_observations(self, tiny_cfg):
        cfg = tiny_cfg.replace(use_conv_merge=False)
        model = Model(cfg)
        assert "conv_merge" not in model.groups
        assert model.core.in_width == cfg.n_agents * cfg.enc_out_width + cfg.core_width

    def test_per_agent_encoders_flag(self, tiny_cfg):
        cfg = tiny_cfg.replace(per_agent_encoders=True)
        model = Model(cfg)
        assert "enc_glimpse_0" in model.groups and "enc_glimpse_1" in model.groups
        rng = np.random.default_rng(26)
        w = random_window(cfg, rng)
        traj = rollout_episode(w, model, cfg, np.random.default_rng(0))
        assert len(traj.steps) == cfg.episode_len


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tiny_cfg, tmp_path):
        model = Model(tiny_cfg)
        extras = {"channel_mean": np.random.default_rng(0).normal(size=tiny_cfg.n_channels),
                  "channel_std": np.abs(np.random.default_rng(1).normal(size=tiny_cfg.n_channels))}
        path = tmp_path / "model.star"
        save_checkpoint(path, model, extras)
        loaded, cfg2, extras2 = load_checkpoint(path)
        assert cfg2 == tiny_cfg
        for name, g in model.groups.items():
            npt.assert_array_equal(loaded.groups[name].weight, g.weight)
            npt.assert_array_equal(loaded.groups[name].bias, g.bias)
        npt.assert_array_equal(extras2["channel_mean"], extras["channel_mean"])
        npt.assert_array_equal(extras2["channel_std"], extras["channel_std"])

    def test_magic_bytes(self, tiny_cfg, tmp_path):
        path = tmp_path / "model.star"
        save_checkpoint(path, Model(tiny_cfg))
        assert path.read_bytes()[:5] == b"STAR1"

    def test_bad_magic_rejected(self, tmp_path):
        from star.errors import CheckpointError
        path = tmp_path / "junk.star"
        path.write_bytes(b"NOPE!" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tiny_cfg, tmp_path):
        model = Model(tiny_cfg)
        p1, p2 = tmp_path / "a.star", tmp_path / "b.star"
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()
