"""Feed-forward actor-critic trained with clipped-surrogate policy optimisation."""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ballista.errors import InvalidArgumentError, NumericalFault

LR_MIN = 1e-5
LR_MAX = 1e-2
LR_FACTOR = 1.5
MAX_GRAD_NORM = 1.0

CHECKPOINT_MAGIC = b"BLST"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.15
    gamma: float = 0.99
    gae_lambda: float = 0.93
    steps_per_env: int = 26
    minibatches: int = 6
    epochs: int = 5
    entropy_coef: float = 0.0
    value_loss_coef: float = 0.98
    desired_kl: float = 0.02
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    hidden: tuple = (256, 128, 64)
    init_std: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise InvalidArgumentError("clip must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise InvalidArgumentError("gamma and gae_lambda must lie in (0, 1]")
        if self.steps_per_env < 1 or self.minibatches < 1 or self.epochs < 1:
            raise InvalidArgumentError("steps_per_env, minibatches and epochs must be >= 1")
        if not self.init_std > 0:
            raise InvalidArgumentError("init_std must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PPOConfig":
        return cls(**data)


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ELU())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Gaussian policy with a state-independent log-std and a separate value network.

    ``obs_scale`` is a fixed per-channel divisor applied before both networks.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 128, 64), init_std: float = 0.5,
                 obs_scale: Optional[np.ndarray] = None):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = int(obs_dim), int(act_dim), tuple(hidden)
        self.actor = _mlp([obs_dim, *hidden, act_dim])
        self.critic = _mlp([obs_dim, *hidden, 1])
        self.log_std = nn.Parameter(torch.full((act_dim,), math.log(init_std), dtype=torch.float32))
        scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        if scale.shape != (obs_dim,) or np.any(scale <= 0):
            raise InvalidArgumentError("obs_scale must be a positive vector of length obs_dim")
        self.register_buffer("obs_scale", torch.as_tensor(scale, dtype=torch.float32))

    def _norm(self, obs: torch.Tensor) -> torch.Tensor:
        return obs / self.obs_scale

    def forward(self, obs: torch.Tensor):
        x = self._norm(obs)
        return self.actor(x), self.critic(x).squeeze(-1)

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(self._norm(obs)).squeeze(-1)

    def distribution(self, obs: torch.Tensor):
        mean, value = self(obs)
        # non-finite outputs are reported by the caller, not by torch's argument checks
        std = self.log_std.exp().expand_as(mean)
        return torch.distributions.Normal(mean, std, validate_args=False), value

    @property
    def std(self) -> np.ndarray:
        return self.log_std.detach().exp().numpy()

    def act(self, obs: np.ndarray, generator: Optional[torch.Generator] = None,
            deterministic: bool = False):
        """Sample actions for a batch of observations.

        Returns numpy arrays (actions, log_probs, values).
        """
        with torch.no_grad():
            o = torch.as_tensor(obs, dtype=torch.float32)
            mean, value = self(o)
            if not (torch.isfinite(mean).all() and torch.isfinite(value).all()):
                raise NumericalFault("policy produced non-finite actions or values")
            std = self.log_std.exp().expand_as(mean)
            if deterministic:
                action = mean
            else:
                action = mean + std * torch.randn(mean.shape, generator=generator,
                                                  dtype=torch.float32)
            dist = torch.distributions.Normal(mean, std)
            logp = dist.log_prob(action).sum(-1)
        return action.numpy(), logp.numpy(), value.numpy()

    def layer_shapes(self):
        return [(m.out_features, m.in_features) for m in self.actor if isinstance(m, nn.Linear)] + \
               [(m.out_features, m.in_features) for m in self.critic if isinstance(m, nn.Linear)]


class RolloutBuffer:
    """Fixed-horizon storage, indexed [step, env]."""

    def __init__(self, horizon: int, num_envs: int, obs_dim: int, act_dim: int):
        self.horizon, self.num_envs = horizon, num_envs
        self.obs = np.zeros((horizon, num_envs, obs_dim))
        self.actions = np.zeros((horizon, num_envs, act_dim))
        self.log_probs = np.zeros((horizon, num_envs))
        self.values = np.zeros((horizon, num_envs))
        self.rewards = np.zeros((horizon, num_envs))
        self.dones = np.zeros((horizon, num_envs))
        self.last_values = np.zeros(num_envs)
        self.advantages = np.zeros((horizon, num_envs))
        self.returns = np.zeros((horizon, num_envs))

    def __len__(self):
        return self.horizon * self.num_envs


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates over arrays indexed [step, env].

    ``dones[t]`` marks that the episode ended at step t, so no value is
    bootstrapped across it. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_value = np.asarray(last_values, dtype=float)
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def collect(policy: ActorCritic, envs, horizon: int, obs: np.ndarray,
            generator: Optional[torch.Generator] = None, deterministic: bool = False,
            on_step=None):
    """Roll the policy for ``horizon`` steps in a vectorised env.

    Returns (buffer, last observation, list of per-step episode dicts, true estimates).
    """
    n = obs.shape[0]
    buf = RolloutBuffer(horizon, n, policy.obs_dim, policy.act_dim)
    episodes = []
    estimates = []
    for t in range(horizon):
        action, logp, value = policy.act(obs, generator, deterministic)
        if not (np.all(np.isfinite(action)) and np.all(np.isfinite(value))):
            raise NumericalFault(f"non-finite policy output at rollout step {t}")
        buf.obs[t] = obs
        buf.actions[t] = action
        buf.log_probs[t] = logp
        buf.values[t] = value
        obs, reward, done, info = envs.step(action)
        buf.rewards[t] = reward
        buf.dones[t] = done
        estimates.append(info["true_estimate"])
        if info["episode"] is not None:
            episodes.append(info["episode"])
        if on_step is not None:
            on_step(t, buf.obs[t], action, reward, done)
    with torch.no_grad():
        buf.last_values[:] = policy.value(torch.as_tensor(obs, dtype=torch.float32)).numpy()
    return buf, obs, episodes, np.concatenate(estimates)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float) -> torch.Tensor:
    """Mean of min(ratio * A, clip(ratio, 1 - clip, 1 + clip) * A); to be maximised."""
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip)
    return torch.min(ratio * advantages, clipped * advantages).mean()


def adapt_learning_rate(lr: float, kl: float, desired_kl: float) -> float:
    if not math.isfinite(kl):
        return max(lr / 2.0, LR_MIN)
    if kl > 2.0 * desired_kl:
        lr = lr / LR_FACTOR
    elif kl < desired_kl / 2.0:
        lr = lr * LR_FACTOR
    return float(min(max(lr, LR_MIN), LR_MAX))


def make_optimizer(policy: ActorCritic, cfg: PPOConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(policy.parameters(), lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay)


def _kl_gaussian(mu_old, std_old, mu_new, std_new):
    return (torch.log(std_new / std_old)
            + (std_old ** 2 + (mu_old - mu_new) ** 2) / (2.0 * std_new ** 2) - 0.5).sum(-1)


def update(policy: ActorCritic, optimizer: torch.optim.Optimizer, buf: RolloutBuffer,
           cfg: PPOConfig, generator: Optional[torch.Generator] = None) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches with KL-adaptive step size.

    The batch is split into ``cfg.minibatches`` contiguous slices of a fresh
    permutation each epoch; slice sizes differ by at most one.

    The learning rate is adapted after every minibatch from the KL between the
    rollout policy and the updated one on that minibatch.
    """
    total = len(buf)
    if total < cfg.minibatches:
        raise InvalidArgumentError(f"{total} samples cannot fill {cfg.minibatches} minibatches")
    # sizes differ by at most one when the batch does not divide evenly
    bounds = np.linspace(0, total, cfg.minibatches + 1).round().astype(int)
    f32 = torch.float32
    obs = torch.as_tensor(buf.obs.reshape(total, -1), dtype=f32)
    act = torch.as_tensor(buf.actions.reshape(total, -1), dtype=f32)
    old_logp = torch.as_tensor(buf.log_probs.reshape(total), dtype=f32)
    adv = torch.as_tensor(normalize_advantages(buf.advantages.reshape(total)), dtype=f32)
    ret = torch.as_tensor(buf.returns.reshape(total), dtype=f32)
    with torch.no_grad():
        old_mean, _ = policy(obs)
        old_std = policy.log_std.exp().expand_as(old_mean).clone()

    lr = optimizer.param_groups[0]["lr"]
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0, "clip_frac": 0.0, "skipped": 0}
    n_updates = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(total, generator=generator)
        for k in range(cfg.minibatches):
            idx = perm[bounds[k]:bounds[k + 1]]
            dist, value = policy.distribution(obs[idx])
            logp = dist.log_prob(act[idx]).sum(-1)
            with torch.no_grad():
                kl = _kl_gaussian(old_mean[idx], old_std[idx], dist.mean, dist.stddev).mean().item()
            if not math.isfinite(kl):
                lr = adapt_learning_rate(lr, kl, cfg.desired_kl)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                stats["skipped"] += 1
                continue
            lr = adapt_learning_rate(lr, kl, cfg.desired_kl)
            for g in optimizer.param_groups:
                g["lr"] = lr
            ratio = torch.exp(logp - old_logp[idx])
            surrogate = clipped_surrogate(ratio, adv[idx], cfg.clip)
            value_loss = ((value - ret[idx]) ** 2).mean()
            entropy = dist.entropy().sum(-1).mean()
            loss = -surrogate + cfg.value_loss_coef * value_loss - cfg.entropy_coef * entropy
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), MAX_GRAD_NORM)
            optimizer.step()
            with torch.no_grad():
                clip_frac = ((ratio - 1.0).abs() > cfg.clip).float().mean().item()
            stats["policy_loss"] += -surrogate.item()
            stats["value_loss"] += value_loss.item()
            stats["kl"] += kl
            stats["clip_frac"] += clip_frac
            n_updates += 1
    for key in ("policy_loss", "value_loss", "kl", "clip_frac"):
        stats[key] /= max(n_updates, 1)
    stats["lr"] = lr
    if not all(math.isfinite(p.detach().sum().item()) for p in policy.parameters()):
        raise NumericalFault("policy parameters became non-finite")
    return stats


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, policy: ActorCritic) -> None:
    """Flat weight file.

    Layout (little-endian): magic ``BLST``, uint32 version, uint32 obs_dim,
    uint32 act_dim, uint32 n_hidden, n_hidden x uint32 hidden sizes, then
    float32 arrays in order: obs_scale, log_std, and for the actor followed by
    the critic each layer's row-major weight (out x in) then bias.
    """
    header = struct.pack("<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, policy.obs_dim,
                         policy.act_dim, len(policy.hidden))
    header += struct.pack(f"<{len(policy.hidden)}I", *policy.hidden)
    arrays = [policy.obs_scale.numpy(), policy.log_std.detach().numpy()]
    for net in (policy.actor, policy.critic):
        for m in net:
            if isinstance(m, nn.Linear):
                arrays.append(m.weight.detach().numpy())
                arrays.append(m.bias.detach().numpy())
    with open(path, "wb") as fh:
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint_layout(path):
    with open(path, "rb") as fh:
        magic, version, obs_dim, act_dim, n_hidden = struct.unpack("<4sIIII", fh.read(20))
        if magic != CHECKPOINT_MAGIC:
            raise InvalidArgumentError(f"{path} is not a checkpoint file")
        if version != CHECKPOINT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint version {version}")
        hidden = struct.unpack(f"<{n_hidden}I", fh.read(4 * n_hidden))
    return obs_dim, act_dim, tuple(hidden)


def load_checkpoint(path, expect_obs_dim: Optional[int] = None,
                    expect_act_dim: Optional[int] = None) -> ActorCritic:
    obs_dim, act_dim, hidden = read_checkpoint_layout(path)
    if expect_obs_dim is not None and obs_dim != expect_obs_dim:
        raise InvalidArgumentError(f"checkpoint has obs_dim {obs_dim}, expected {expect_obs_dim}")
    if expect_act_dim is not None and act_dim != expect_act_dim:
        raise InvalidArgumentError(f"checkpoint has act_dim {act_dim}, expected {expect_act_dim}")
    policy = ActorCritic(obs_dim, act_dim, hidden)
    with open(path, "rb") as fh:
        fh.seek(20 + 4 * len(hidden))
        data = np.frombuffer(fh.read(), dtype="<f4")
    tensors = [policy.obs_scale, policy.log_std]
    for net in (policy.actor, policy.critic):
        for m in net:
            if isinstance(m, nn.Linear):
                tensors += [m.weight, m.bias]
    expected = sum(t.numel() for t in tensors)
    if data.size != expected:
        raise InvalidArgumentError(f"checkpoint holds {data.size} floats, layout needs {expected}")
    pos = 0
    with torch.no_grad():
        for t in tensors:
            chunk = data[pos:pos + t.numel()].astype(np.float32).reshape(tuple(t.shape))
            t.copy_(torch.from_numpy(chunk))
            pos += t.numel()
    return policy


# ------------------------------------------------------------------ bandit

class BanditEnv:
    """One-step task with reward ``-(a - optimum)^2``; every step ends the episode."""

    def __init__(self, num_envs: int, optimum: float = 0.7):
        self.num_envs = num_envs
        self.optimum = optimum

    def reset(self) -> np.ndarray:
        return np.ones((self.num_envs, 1))

    def step(self, actions: np.ndarray):
        a = np.asarray(actions, dtype=float)[:, 0]
        reward = -(a - self.optimum) ** 2
        info = {"episode": None, "true_estimate": np.zeros(self.num_envs)}
        return np.ones((self.num_envs, 1)), reward, np.ones(self.num_envs, dtype=bool), info


def train_bandit(iterations: int = 200, num_envs: int = 64, seed: int = 0,
                 cfg: Optional[PPOConfig] = None):
    """PPO on :class:`BanditEnv`; returns the policy mean action after each iteration."""
    cfg = cfg or PPOConfig(steps_per_env=4, minibatches=4, hidden=(32, 32), epochs=5)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    env = BanditEnv(num_envs)
    policy = ActorCritic(1, 1, cfg.hidden, cfg.init_std)
    opt = make_optimizer(policy, cfg)
    obs = env.reset()
    means = []
    for _ in range(iterations):
        buf, obs, _, _ = collect(policy, env, cfg.steps_per_env, obs, gen)
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones,
                                                  buf.last_values, cfg.gamma, cfg.gae_lambda)
        update(policy, opt, buf, cfg, gen)
        with torch.no_grad():
            means.append(float(policy(torch.ones(1, 1, dtype=torch.float32))[0][0, 0]))
    return np.asarray(means)
