"""Compact actor-critic PPO over the microgrid environment.

Pure numpy: dense ReLU networks with hand-rolled backprop and Adam. The
actor emits a pre-squash mean; exploration is Gaussian in pre-squash
space with a fixed std, the sampled value is squashed through a sigmoid
to (0, 1) and scaled to the env's admissible power bounds. The behavior
policy is a frozen snapshot of the actor refreshed every `update_step`
minibatch updates, and its log-probs are stored at rollout time.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)
_U_CLIP = 20.0   # pre-squash samples live in [-20, 20]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoHyper:
    lr_actor: float = 1e-6
    lr_critic: float = 2e-6
    discount: float = 0.95
    clip_epsilon: float = 0.2
    update_step: int = 10          # behavior-policy refresh period, in updates
    minibatch: int = 32
    episodes: int = 300_000
    episode_length: int = 20
    action_std: float = 0.3
    gae_lambda: float = 1.0        # 1.0 = Monte-Carlo returns
    reward_scale: float = 1.0      # trainer-side return scaling (curve stays raw)
    hidden: tuple = (64, 64)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1000
    divergence_weight_limit: float = 1e6

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if self.minibatch < 1 or self.episode_length < 1:
            raise ValueError("minibatch and episode_length must be >= 1")


class Mlp:
    """Dense net, ReLU hidden layers, linear head. float64 throughout."""

    INIT_SCHEME = "he_uniform_v1"

    def __init__(self, sizes, rng, final_scale: float = 1e-2):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes, self.sizes[1:])):
            limit = math.sqrt(6.0 / n_in)
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            if i == len(self.sizes) - 2:
                w *= final_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    def forward(self, x: np.ndarray, cache: list = None) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if cache is not None:
            cache.append(h)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.maximum(h, 0.0)
            if cache is not None:
                cache.append(h)
        return h[:, 0]

    def backward(self, cache: list, dout: np.ndarray) -> list:
        """Gradients of sum(dout * output) w.r.t. every weight/bias."""
        grads = [None] * len(self.weights)
        delta = np.asarray(dout, dtype=float)[:, None]
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[i]
            if i != len(self.weights) - 1:
                delta = delta * (cache[i + 1] > 0.0)
            grads[i] = (h_in.T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = delta @ self.weights[i].T
        return grads

    def copy_from(self, other: "Mlp") -> None:
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for arr in self.weights + self.biases:
            arr[...] = flat[i:i + arr.size].reshape(arr.shape)
            i += arr.size

    def max_abs_weight(self) -> float:
        return max(float(np.abs(a).max()) for a in self.weights + self.biases)


class Adam:
    def __init__(self, net: Mlp, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in net.weights + net.biases]
        self.v = [np.zeros_like(a) for a in net.weights + net.biases]

    def step(self, net: Mlp, grads: list) -> None:
        self.t += 1
        flat_grads = [g for g, _ in grads] + [g for _, g in grads]
        params = net.weights + net.biases
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, flat_grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def sigmoid(u):
    return 1.0 / (1.0 + np.exp(-np.asarray(u, dtype=float)))


def logit(a):
    # guard against exactly-saturated sigmoid outputs
    a = np.clip(np.asarray(a, dtype=float), 2.1e-9, 1.0 - 2.1e-9)
    return np.log(a) - np.log1p(-a)


def squashed_log_prob(pre_mean, raw_action, std: float):
    """log-density of the (0,1) action under the squashed Gaussian policy:
    N(logit(a); m, std) with the |da/du| = a(1-a) change of variables."""
    a = np.clip(np.asarray(raw_action, dtype=float), 2.1e-9, 1.0 - 2.1e-9)
    u = logit(a)
    z = (u - pre_mean) / std
    return -0.5 * z * z - math.log(std) - 0.5 * _LOG_2PI - np.log(a * (1.0 - a))


def sample_action(mean, std: float, rng) -> tuple:
    """Draw a raw action in (0,1) around the squashed mean; returns
    (raw_action, log_prob)."""
    pre = logit(mean)
    u = np.clip(pre + std * rng.standard_normal(np.shape(pre) or None),
                -_U_CLIP, _U_CLIP)
    a = sigmoid(u)
    return a, squashed_log_prob(pre, a, std)


def scale_to_bounds(raw, lo: float, hi: float):
    return lo + np.asarray(raw, dtype=float) * (hi - lo)


def compute_returns_and_advantages(rewards, values, discount: float,
                                   gae_lambda: float = 1.0) -> tuple:
    """Discounted returns and (unnormalized) advantages for one episode."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    n = len(r)
    returns = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = r[t] + discount * acc
        returns[t] = acc
    if gae_lambda >= 1.0:
        adv = returns - v
    else:
        adv = np.empty(n)
        next_v = 0.0
        acc = 0.0
        for t in range(n - 1, -1, -1):
            delta = r[t] + discount * next_v - v[t]
            acc = delta + discount * gae_lambda * acc
            adv[t] = acc
            next_v = v[t]
    return returns, adv


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    raw_actions: list = field(default_factory=list)
    powers: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


class PpoAgent:
    """Actor + critic with their optimizers and observation scaling."""

    def __init__(self, obs_dim: int, hyper: PpoHyper, rng, obs_scale=None):
        self.hyper = hyper
        sizes = (obs_dim, *hyper.hidden, 1)
        self.actor = Mlp(sizes, rng)
        self.critic = Mlp(sizes, rng)
        self.behavior = Mlp(sizes, rng)
        self.behavior.copy_from(self.actor)
        self.opt_actor = Adam(self.actor, hyper.lr_actor, hyper.adam_beta1,
                              hyper.adam_beta2, hyper.adam_eps)
        self.opt_critic = Adam(self.critic, hyper.lr_critic, hyper.adam_beta1,
                               hyper.adam_beta2, hyper.adam_eps)
        self.obs_scale = (np.ones(obs_dim) if obs_scale is None
                          else np.asarray(obs_scale, dtype=float))

    def normalize(self, obs):
        return np.atleast_2d(np.asarray(obs, dtype=float)) / self.obs_scale

    def actor_forward(self, obs, net: Mlp = None) -> np.ndarray:
        """Squashed action mean in (0, 1)."""
        net = net or self.actor
        pre = net.forward(self.normalize(obs))
        if not np.all(np.isfinite(pre)):
            raise TrainingDiverged("actor produced non-finite output")
        return sigmoid(pre)

    def critic_forward(self, obs) -> np.ndarray:
        v = self.critic.forward(self.normalize(obs))
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged("critic produced non-finite output")
        return v

    def act(self, obs, bounds: tuple, rng, deterministic: bool = False) -> dict:
        mean = self.actor_forward(obs, net=self.behavior)[0]
        if deterministic:
            raw, logp = mean, 0.0
        else:
            raw, logp = sample_action(mean, self.hyper.action_std, rng)
            raw, logp = float(raw), float(logp)
        lo, hi = bounds
        return {"raw": raw, "log_prob": logp,
                "power": float(scale_to_bounds(raw, lo, hi)),
                "value": float(self.critic_forward(obs)[0])}


def clipped_surrogate_update(agent: PpoAgent, states, raw_actions, old_log_probs,
                             advantages, returns) -> dict:
    """One minibatch step on actor (clipped objective) and critic (MSE).

    Returns loss diagnostics. Raises TrainingDiverged on NaN losses.
    """
    hyper = agent.hyper
    s = agent.normalize(states)
    a = np.asarray(raw_actions, dtype=float)
    old_lp = np.asarray(old_log_probs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    ret = np.asarray(returns, dtype=float)
    n = len(a)
    std = hyper.action_std

    cache = []
    pre = agent.actor.forward(s, cache)
    u = np.clip(logit(a), -_U_CLIP, _U_CLIP)
    new_lp = squashed_log_prob(pre, a, std)
    ratio = np.exp(new_lp - old_lp)
    clipped = np.clip(ratio, 1.0 - hyper.clip_epsilon, 1.0 + hyper.clip_epsilon)
    surr1 = ratio * adv
    surr2 = clipped * adv
    objective = np.minimum(surr1, surr2)
    actor_loss = -float(objective.mean())
    if not math.isfinite(actor_loss):
        raise TrainingDiverged("NaN actor loss")

    # d(-objective)/d pre_mean; the clipped branch has zero gradient.
    unclipped = surr1 <= surr2
    dlogp_dpre = (u - pre) / (std * std)
    dpre = np.where(unclipped, -ratio * adv * dlogp_dpre, 0.0) / n
    agent.opt_actor.step(agent.actor, agent.actor.backward(cache, dpre))

    cache = []
    v = agent.critic.forward(s, cache)
    critic_loss = float(np.mean((v - ret) ** 2))
    if not math.isfinite(critic_loss):
        raise TrainingDiverged("NaN critic loss")
    dv = 2.0 * (v - ret) / n
    agent.opt_critic.step(agent.critic, agent.critic.backward(cache, dv))

    return {"actor_loss": actor_loss, "critic_loss": critic_loss,
            "mean_ratio": float(ratio.mean()),
            "clip_fraction": float(np.mean(~unclipped))}


@dataclass
class CurveRow:
    episode: int
    reward: float
    f1: float
    f2: float
    f3: float
    sigma2: float


def rollout_episode(env, agent: PpoAgent, rng, deterministic=False) -> tuple:
    """One episode with the behavior policy; returns (Trajectory, CurveRow
    totals tuple)."""
    traj = Trajectory()
    state = env.reset()
    totals = np.zeros(4)
    sigma2 = 0.0
    done = False
    while not done:
        vec = state.to_vector()
        bounds = env.admissible_bounds()
        choice = agent.act(vec, bounds, rng, deterministic=deterministic)
        out = env.step(choice["power"])
        traj.states.append(vec)
        traj.raw_actions.append(choice["raw"])
        traj.powers.append(out.applied_power)
        traj.log_probs.append(choice["log_prob"])
        traj.rewards.append(out.reward)
        traj.values.append(choice["value"])
        traj.dones.append(out.done)
        totals += (out.reward, out.f1, out.f2, out.f3)
        sigma2 = out.next_state.variance
        state = out.next_state
        done = out.done
    return traj, (totals[0], totals[1], totals[2], totals[3], sigma2)


def train(env, hyper: PpoHyper, seed, checkpoint_dir=None) -> dict:
    """Train for hyper.episodes episodes; returns the learning curve and
    the final/best agents. Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    obs_dim = len(env.reset().to_vector())
    scale = env.observation_scale() if hasattr(env, "observation_scale") else None
    agent = PpoAgent(obs_dim, hyper, rng, obs_scale=scale)

    episodes_per_update = max(1, math.ceil(hyper.minibatch / hyper.episode_length))
    curve = []
    buffer = []
    updates = 0
    best_reward = -np.inf
    best_actor = agent.actor.flat_params()
    last_good = agent.actor.flat_params()

    for ep in range(hyper.episodes):
        try:
            traj, (reward, f1, f2, f3, sigma2) = rollout_episode(env, agent, rng)
        except TrainingDiverged:
            agent.actor.set_flat_params(last_good)
            raise
        if not math.isfinite(reward):
            agent.actor.set_flat_params(last_good)
            raise TrainingDiverged(f"non-finite episode reward at episode {ep}")
        curve.append(CurveRow(ep, reward, f1, f2, f3, sigma2))
        if reward > best_reward:
            best_reward = reward
            best_actor = agent.actor.flat_params()

        scaled = np.asarray(traj.rewards) * hyper.reward_scale
        returns, adv = compute_returns_and_advantages(
            scaled, traj.values, hyper.discount, hyper.gae_lambda)
        buffer.append((np.array(traj.states), np.array(traj.raw_actions),
                       np.array(traj.log_probs), returns, adv))

        if (ep + 1) % episodes_per_update == 0:
            states = np.concatenate([b[0] for b in buffer])
            actions = np.concatenate([b[1] for b in buffer])
            old_lp = np.concatenate([b[2] for b in buffer])
            rets = np.concatenate([b[3] for b in buffer])
            advs = np.concatenate([b[4] for b in buffer])
            advs = (advs - advs.mean()) / (advs.std() + 1e-8)
            order = rng.permutation(len(actions))
            for start in range(0, len(order), hyper.minibatch):
                idx = order[start:start + hyper.minibatch]
                clipped_surrogate_update(agent, states[idx], actions[idx],
                                         old_lp[idx], advs[idx], rets[idx])
                updates += 1
                if updates % hyper.update_step == 0:
                    agent.behavior.copy_from(agent.actor)
            buffer = []
            limit = hyper.divergence_weight_limit
            if agent.actor.max_abs_weight() > limit or \
                    agent.critic.max_abs_weight() > limit:
                agent.actor.set_flat_params(last_good)
                raise TrainingDiverged(f"weight magnitude exceeded {limit:g}")
            last_good = agent.actor.flat_params()

        if checkpoint_dir and (ep + 1) % hyper.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, "checkpoint.npz"),
                            agent, ep + 1, rng)

    agent.behavior.copy_from(agent.actor)
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "checkpoint.npz"),
                        agent, hyper.episodes, rng)
    return {"curve": curve, "agent": agent, "best_actor": best_actor,
            "best_reward": best_reward, "updates": updates}


def evaluate_policy(env, agent: PpoAgent) -> dict:
    """Deterministic (mean-action) day rollout; returns the applied
    schedule and episode totals."""
    rng = np.random.default_rng(0)  # unused in deterministic mode
    traj, (reward, f1, f2, f3, sigma2) = rollout_episode(
        env, agent, rng, deterministic=True)
    return {"schedule": np.array(traj.powers), "reward": reward,
            "f1": f1, "f2": f2, "f3": f3, "sigma2": sigma2,
            "energy_trajectory": np.array(env.energy_trajectory)}


CHECKPOINT_VERSION = "v2gsim-checkpoint-v1"


def save_checkpoint(path, agent: PpoAgent, episode: int, rng) -> None:
    arrays = {}
    for name, net in (("actor", agent.actor), ("critic", agent.critic),
                      ("behavior", agent.behavior)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    for name, opt in (("opt_actor", agent.opt_actor), ("opt_critic", agent.opt_critic)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{name}_m{i}"] = m
            arrays[f"{name}_v{i}"] = v
        arrays[f"{name}_t"] = np.array([opt.t])
    arrays["obs_scale"] = agent.obs_scale
    meta = {"version": CHECKPOINT_VERSION, "episode": episode,
            "hyper": asdict(agent.hyper),
            "sizes": list(agent.actor.sizes),
            "init_scheme": Mlp.INIT_SCHEME,
            "rng_state": rng.bit_generator.state}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple:
    """Returns (agent, episode, rng) restored from a checkpoint file."""
    data = np.load(path)
    meta = json.loads(bytes(data["meta"]).decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']!r}")
    hyper_dict = dict(meta["hyper"])
    hyper_dict["hidden"] = tuple(hyper_dict["hidden"])
    hyper = PpoHyper(**hyper_dict)
    sizes = meta["sizes"]
    agent = PpoAgent(sizes[0], hyper, np.random.default_rng(0),
                     obs_scale=data["obs_scale"])
    for name, net in (("actor", agent.actor), ("critic", agent.critic),
                      ("behavior", agent.behavior)):
        for i in range(len(net.weights)):
            net.weights[i] = data[f"{name}_w{i}"].copy()
            net.biases[i] = data[f"{name}_b{i}"].copy()
    for name, opt in (("opt_actor", agent.opt_actor), ("opt_critic", agent.opt_critic)):
        for i in range(len(opt.m)):
            opt.m[i] = data[f"{name}_m{i}"].copy()
            opt.v[i] = data[f"{name}_v{i}"].copy()
        opt.t = int(data[f"{name}_t"][0])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return agent, meta["episode"], rng
