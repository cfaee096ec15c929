import numpy as np

from kfvo.agent import RunningNorm, init_policy
from kfvo.backend import NoiseParams, WorldConfig, generate_world
from kfvo.geometry import ate_rmse
from kfvo.run import (KeepAllStrategy, PolicyStrategy, ThresholdStrategy,
                      frames_from_world, run_sequence)
from kfvo.window import Action


def noiseless_world(n=30, profile="orbit", seed=0):
    noise = NoiseParams(sigma0=0.0, kappa=0.0, sigma_token=0.0)
    return generate_world(WorldConfig(length=n, profile=profile, seed=seed, noise=noise))


class TestRunSequence:
    def test_keep_all_covers_every_frame(self):
        world = noiseless_world(25)
        result = run_sequence(world, frames_from_world(world), KeepAllStrategy())
        assert len(result.trajectory) == 25
        assert result.keyframe_rate == 1.0
        assert len(result.decisions) == 25 - 7
        assert ate_rmse(result.trajectory, world.trajectory, alignment="none") < 1e-9

    def test_decisions_carry_latency_and_error(self):
        world = noiseless_world(15)
        result = run_sequence(world, frames_from_world(world), KeepAllStrategy())
        for d in result.decisions:
            assert d.latency_ns >= 0
            assert d.e_tran is not None and d.e_tran < 1e-9

    def test_threshold_strategy_discards_stationary_frames(self):
        world = generate_world(WorldConfig(
            length=80, profile="stop-and-go", seed=2,
            noise=NoiseParams(sigma0=0.0, kappa=0.0, sigma_token=0.0)))
        result = run_sequence(world, frames_from_world(world), ThresholdStrategy(0.05))
        actions = {d.frame_id: d.action for d in result.decisions}
        pts = world.trajectory.positions()
        # noiseless: a frame that did not move from its predecessor keyframe
        # chain must be discarded; large motions must be kept
        for d in result.decisions:
            step = np.linalg.norm(pts[d.frame_id] - pts[d.frame_id - 1])
            if step > 0.1:
                assert d.action == Action.KEYFRAME.value
        assert 0.0 < result.keyframe_rate < 1.0
        assert len(result.trajectory) == 80

    def test_infinite_threshold_equals_discard_always(self):
        world = noiseless_world(30, profile="random-walk")
        result = run_sequence(world, frames_from_world(world), ThresholdStrategy(1e9))
        assert all(d.action == Action.DISCARD.value for d in result.decisions)

    def test_policy_strategy_runs_with_random_params(self):
        world = noiseless_world(20)
        params = init_policy(np.random.default_rng(0), 80, 92)
        strategy = PolicyStrategy(params, RunningNorm(48))
        result = run_sequence(world, frames_from_world(world), strategy)
        assert len(result.trajectory) == 20
        assert all(d.action in ("keyframe", "discard") for d in result.decisions)

    def test_deterministic_given_same_world_seed(self):
        def one():
            world = noiseless_world(25, profile="stop-and-go", seed=4)
            r = run_sequence(world, frames_from_world(world), ThresholdStrategy(0.05))
            return [(d.frame_id, d.action) for d in r.decisions], \
                [tuple(p.t) for _, p in r.trajectory.entries]
        assert one() == one()
