import math

import numpy as np
import pytest

from v2gsim.env import MicrogridEnv, synthetic_profiles
from v2gsim.fleet import sample_fleet
from v2gsim.ppo import (Mlp, PpoAgent, PpoHyper, TrainingDiverged,
                        clipped_surrogate_update, compute_returns_and_advantages,
                        load_checkpoint, logit, rollout_episode, sample_action,
                        save_checkpoint, scale_to_bounds, sigmoid,
                        squashed_log_prob, train)


def numeric_grad(f, net, eps=1e-6):
    """Central finite differences of scalar f() w.r.t. the flat params."""
    flat = net.flat_params()
    grad = np.zeros_like(flat)
    for i in range(len(flat)):
        flat[i] += eps
        net.set_flat_params(flat)
        up = f()
        flat[i] -= 2 * eps
        net.set_flat_params(flat)
        down = f()
        flat[i] += eps
        net.set_flat_params(flat)
        grad[i] = (up - down) / (2 * eps)
    return grad


def flat_grads(net, grads):
    ws = [g for g, _ in grads]
    bs = [g for _, g in grads]
    return np.concatenate([g.ravel() for g in ws + bs])


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_mse_backprop_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sizes = (3, 4, 1)  # 3*4 + 4 + 4 + 1 = 21 weights <= 64
        net = Mlp(sizes, rng, final_scale=1.0)
        x = rng.standard_normal((6, 3))
        target = rng.standard_normal(6)

        def loss():
            out = net.forward(x)
            return float(np.mean((out - target) ** 2))

        cache = []
        out = net.forward(x, cache)
        dout = 2.0 * (out - target) / len(out)
        analytic = flat_grads(net, net.backward(cache, dout))
        numeric = numeric_grad(loss, net)
        denom = np.maximum(np.abs(numeric), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        assert rel.max() < 1e-4

    def test_surrogate_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        net = Mlp((4, 5, 1), rng, final_scale=1.0)
        x = rng.standard_normal((8, 4))
        actions = sigmoid(rng.normal(0, 1, size=8))
        old_lp = squashed_log_prob(net.forward(x), actions, 0.3) \
            + rng.normal(0, 0.05, size=8)
        adv = rng.standard_normal(8)
        eps_clip = 0.2

        def objective():
            pre = net.forward(x)
            lp = squashed_log_prob(pre, actions, 0.3)
            ratio = np.exp(lp - old_lp)
            clipped = np.clip(ratio, 1 - eps_clip, 1 + eps_clip)
            return float(np.mean(np.minimum(ratio * adv, clipped * adv)))

        cache = []
        pre = net.forward(x, cache)
        lp = squashed_log_prob(pre, actions, 0.3)
        ratio = np.exp(lp - old_lp)
        clipped = np.clip(ratio, 1 - eps_clip, 1 + eps_clip)
        unclipped = ratio * adv <= clipped * adv
        u = logit(actions)
        dpre = np.where(unclipped, ratio * adv * (u - pre) / 0.09, 0.0) / 8
        analytic = flat_grads(net, net.backward(cache, dpre))
        numeric = numeric_grad(objective, net)
        denom = np.maximum(np.abs(numeric), 1e-8)
        assert (np.abs(analytic - numeric) / denom).max() < 1e-4


class TestPolicyHead:
    def test_zero_weights_give_midpoint(self):
        rng = np.random.default_rng(0)
        agent = PpoAgent(28, PpoHyper(), rng)
        for net in (agent.actor, agent.behavior):
            for w in net.weights:
                w[...] = 0.0
        mean = agent.actor_forward(np.zeros(28))
        assert mean[0] == pytest.approx(0.5)
        assert scale_to_bounds(mean[0], -100.0, 100.0) == pytest.approx(0.0)

    def test_affine_scaling(self):
        assert scale_to_bounds(0.75, -100.0, 100.0) == pytest.approx(50.0)

    def test_actor_output_strictly_inside_unit_interval(self, rng):
        agent = PpoAgent(28, PpoHyper(), rng)
        for _ in range(100):
            mean = agent.actor_forward(rng.uniform(-1e3, 1e3, size=28))
            assert 0.0 < mean[0] < 1.0

    def test_log_prob_matches_closed_form(self, rng):
        mean = 0.62
        raw, lp = sample_action(mean, 0.3, rng)
        u = logit(raw)
        pre = logit(mean)
        density = (math.exp(-0.5 * ((u - pre) / 0.3) ** 2)
                   / (0.3 * math.sqrt(2 * math.pi)))
        density /= raw * (1 - raw)  # squash correction
        assert lp == pytest.approx(math.log(density), rel=1e-9)

    def test_critic_zero_weights(self):
        rng = np.random.default_rng(0)
        agent = PpoAgent(28, PpoHyper(), rng)
        for w in agent.critic.weights:
            w[...] = 0.0
        assert agent.critic_forward(np.ones(28))[0] == 0.0

    def test_linear_critic(self):
        rng = np.random.default_rng(0)
        net = Mlp((3, 1), rng)
        net.weights[0][...] = np.array([[1.0], [2.0], [3.0]])
        assert net.forward(np.array([1.0, 1.0, 1.0]))[0] == pytest.approx(6.0)


class TestReturns:
    def test_gamma_zero(self):
        r = [3.0, -1.0, 2.0]
        returns, _ = compute_returns_and_advantages(r, [0, 0, 0], 0.0)
        assert np.allclose(returns, r)

    def test_constant_reward_hand_values(self):
        returns, _ = compute_returns_and_advantages([1, 1, 1], [0, 0, 0], 0.95)
        assert np.allclose(returns, [2.8525, 1.95, 1.0])

    def test_zero_rewards(self):
        returns, adv = compute_returns_and_advantages([0.0] * 5, [0.0] * 5, 0.9)
        assert np.all(returns == 0)
        assert np.all(adv == 0)

    def test_gae_equals_mc_at_lambda_one(self, rng):
        r = rng.standard_normal(10)
        v = rng.standard_normal(10)
        ret_mc, adv_mc = compute_returns_and_advantages(r, v, 0.95, 1.0)
        _, adv_gae = compute_returns_and_advantages(r, v, 0.95, 0.99999)
        assert np.allclose(adv_mc, adv_gae, atol=1e-3)


class TestClippedUpdate:
    def _batch(self, rng, n=16):
        states = rng.standard_normal((n, 28))
        actions = sigmoid(rng.normal(0, 0.5, size=n))
        adv = rng.standard_normal(n)
        returns = rng.standard_normal(n)
        return states, actions, adv, returns

    def test_clip_branch_selection_value(self):
        # ratio 2, A > 0, eps 0.2: min picks the clipped 1.2*A branch
        ratio = 2.0
        adv = 1.5
        clipped = np.clip(ratio, 0.8, 1.2)
        assert min(ratio * adv, clipped * adv) == pytest.approx(1.2 * adv)

    def test_clip_inertness_when_ratios_inside_band(self, rng):
        # mild policy drift keeps every ratio inside (1 - eps, 1 + eps)
        # for both epsilons: the updates must coincide exactly
        states, actions, adv, returns = self._batch(rng)
        drift = rng.normal(0.0, 0.02, size=len(actions))
        results = {}
        for eps in (0.95, 0.2):
            agent = PpoAgent(28, PpoHyper(clip_epsilon=eps, lr_actor=1e-3),
                             np.random.default_rng(5))
            old_lp = squashed_log_prob(agent.actor.forward(agent.normalize(states)),
                                       actions, agent.hyper.action_std) + drift
            diag = clipped_surrogate_update(agent, states, actions, old_lp,
                                            adv, returns)
            assert diag["clip_fraction"] == 0.0
            results[eps] = agent.actor.flat_params()
        assert np.array_equal(results[0.95], results[0.2])

    def test_weight_divergence_aborts_gracefully(self):
        env = MicrogridEnv(synthetic_profiles(seed=0), sample_fleet(5, seed=4))
        hyper = PpoHyper(episodes=4, divergence_weight_limit=1e-6,
                         checkpoint_every=10**9)
        with pytest.raises(TrainingDiverged):
            train(env, hyper, seed=3)

    def test_ratio_one_gives_vanilla_gradient(self, rng):
        states, actions, adv, returns = self._batch(rng)
        agent = PpoAgent(28, PpoHyper(lr_actor=1e-3), np.random.default_rng(5))
        pre = agent.actor.forward(agent.normalize(states))
        old_lp = squashed_log_prob(pre, actions, agent.hyper.action_std)
        diag = clipped_surrogate_update(agent, states, actions, old_lp, adv,
                                        returns)
        assert diag["mean_ratio"] == pytest.approx(1.0)
        assert diag["clip_fraction"] == 0.0
        assert diag["actor_loss"] == pytest.approx(-float(np.mean(adv)))

    def test_single_parameter_bandit_moves_uphill(self):
        # One state, linear actor (1 weight, no hidden): the pre-squash
        # mean must move toward actions with positive advantage.
        rng = np.random.default_rng(11)
        hyper = PpoHyper(lr_actor=1e-2, hidden=(), action_std=0.3)
        agent = PpoAgent(1, hyper, rng)
        agent.actor.weights[0][...] = 0.0
        agent.actor.biases[0][...] = 0.0
        states = np.ones((32, 1))
        # actions above sigmoid(0)=0.5 carry positive advantage
        actions = sigmoid(rng.normal(0.0, 0.3, size=32))
        adv = np.where(actions > 0.5, 1.0, -1.0)
        pre = agent.actor.forward(agent.normalize(states))
        old_lp = squashed_log_prob(pre, actions, 0.3)
        for _ in range(50):
            clipped_surrogate_update(agent, states, actions, old_lp, adv,
                                     np.zeros(32))
        assert agent.actor.forward(np.ones((1, 1)))[0] > 0.0

    def test_nan_loss_aborts(self, rng):
        states, actions, adv, returns = self._batch(rng)
        agent = PpoAgent(28, PpoHyper(), np.random.default_rng(5))
        with pytest.raises(TrainingDiverged):
            clipped_surrogate_update(agent, states, actions,
                                     np.full(len(actions), np.nan), adv, returns)


class TestTraining:
    def _env(self):
        return MicrogridEnv(synthetic_profiles(seed=0), sample_fleet(5, seed=4))

    def test_single_episode_contract(self, tmp_path):
        hyper = PpoHyper(episodes=1, checkpoint_every=1)
        result = train(self._env(), hyper, seed=3, checkpoint_dir=str(tmp_path))
        assert len(result["curve"]) == 1
        assert (tmp_path / "checkpoint.npz").exists()

    def test_bit_identical_curves(self):
        hyper = PpoHyper(episodes=6, checkpoint_every=10**9)
        r1 = train(self._env(), hyper, seed=21)
        r2 = train(self._env(), hyper, seed=21)
        c1 = [(r.reward, r.f1, r.f2, r.f3) for r in r1["curve"]]
        c2 = [(r.reward, r.f1, r.f2, r.f3) for r in r2["curve"]]
        assert c1 == c2

    def test_actions_always_admissible(self):
        env = self._env()
        hyper = PpoHyper(episodes=2, checkpoint_every=10**9)
        result = train(env, hyper, seed=8)
        rng = np.random.default_rng(0)
        traj, _ = rollout_episode(env, result["agent"], rng)
        # raw agent powers lie inside the projected bounds: the env never
        # had to clip them
        env.reset()
        for p in traj.powers:
            lo, hi = env.admissible_bounds()
            assert lo - 1e-9 <= p <= hi + 1e-9
            env.step(p)

    def test_checkpoint_round_trip(self, tmp_path):
        hyper = PpoHyper(episodes=2, checkpoint_every=10**9)
        result = train(self._env(), hyper, seed=13)
        agent = result["agent"]
        rng = np.random.default_rng(99)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, agent, 2, rng)
        loaded, episode, rng2 = load_checkpoint(path)
        assert episode == 2
        obs = np.random.default_rng(1).uniform(size=28)
        assert loaded.actor_forward(obs)[0] == agent.actor_forward(obs)[0]
        assert loaded.opt_actor.t == agent.opt_actor.t
        assert rng2.bit_generator.state == rng.bit_generator.state
