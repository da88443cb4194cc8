"""Hybrid-action MAPPO: per-agent discrete/continuous actors, centralized critics.

Each agent owns two actors that read its local observation: a categorical
head over {no-migrate, candidate 1..n} and a Beta head over the migrated
fraction. Each agent also owns two critics (one per head) that read the
concatenated observations of every agent. Parameters of all agents are stored
stacked along a leading agent axis so one batched matmul serves everyone.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from premig.env import AvatarEnv, HybridAction
from premig.numerics import (
    ContractViolation,
    DenseLayerParams,
    OptimizerState,
    Tensor,
    beta_entropy,
    beta_log_prob,
    beta_log_density,
    categorical_entropy,
    categorical_log_prob,
    dense_forward,
    init_dense,
    log_softmax,
    masked_logits,
    minimum,
    optimizer_step,
)
from premig.numerics.distributions import BETA_EDGE
from premig.numerics.checkpoint import assign, flatten, load_params, save_params
from premig.world import ConfigurationError

log = logging.getLogger(__name__)

CURVE_FIELDS = ["episode", "mean_return", "actor_loss_d", "actor_loss_c",
                "critic_loss_d", "critic_loss_c", "infeasibility_rate"]


@dataclass
class TrainConfig:
    step_size: float = 1e-3
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4  # K
    minibatch: int = 32  # G, in slots
    episodes: int = 300  # E
    episodes_per_round: int = 2
    entropy_coef: float = 0.01
    hidden: int = 64
    buffer_capacity: int = 20000  # D, in agent-slots
    baseline: str = "state"  # or "counterfactual"
    mask_continuous: bool = True  # drop the fraction loss where no-migrate was chosen
    reward_scale: float = 0.1  # critics regress scaled returns
    share_params: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ConfigurationError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigurationError("gamma and gae_lambda must lie in (0, 1]")
        if self.baseline not in ("state", "counterfactual"):
            raise ConfigurationError(f"unknown baseline mode {self.baseline!r}")
        if min(self.epochs, self.minibatch, self.episodes_per_round, self.hidden) < 1 or self.episodes < 0:
            raise ConfigurationError("epochs, minibatch, episodes_per_round, hidden must be >= 1")


# -- networks ------------------------------------------------------------------

@dataclass
class PolicyHeads:
    trunk_d: list  # two DenseLayerParams, tanh
    head_d: DenseLayerParams  # -> n+1 logits
    trunk_c: list
    head_c: DenseLayerParams  # -> 2, softplus + 1 -> (alpha, beta)
    frozen: dict = field(default_factory=dict)  # old-policy snapshot, name -> array

    def tensors(self) -> dict:
        return flatten("", {"trunk_d": self.trunk_d, "head_d": self.head_d,
                            "trunk_c": self.trunk_c, "head_c": self.head_c})

    def discrete_params(self) -> list[Tensor]:
        return list(flatten("", {"trunk_d": self.trunk_d, "head_d": self.head_d}).values())

    def continuous_params(self) -> list[Tensor]:
        return list(flatten("", {"trunk_c": self.trunk_c, "head_c": self.head_c}).values())

    def freeze(self) -> None:
        self.frozen = {k: t.data.copy() for k, t in self.tensors().items()}


@dataclass
class Critics:
    discrete: list  # three DenseLayerParams: D -> h -> h -> 1
    continuous: list
    target: dict = field(default_factory=dict)  # name -> array

    def tensors(self) -> dict:
        return flatten("", {"discrete": self.discrete, "continuous": self.continuous})

    def sync_target(self) -> None:
        self.target = {k: t.data.copy() for k, t in self.tensors().items()}


def _mlp(rng, dims, lead):
    return [init_dense(rng, a, b, lead) for a, b in zip(dims[:-1], dims[1:])]


def init_heads(rng: np.random.Generator, n_agents: int, obs_dim: int, n_actions: int,
               hidden: int = 64, share: bool = False) -> PolicyHeads:
    lead = (1,) if share else (n_agents,)
    heads = PolicyHeads(_mlp(rng, [obs_dim, hidden, hidden], lead), init_dense(rng, hidden, n_actions, lead, 0.1),
                        _mlp(rng, [obs_dim, hidden, hidden], lead), init_dense(rng, hidden, 2, lead, 0.1))
    heads.freeze()
    return heads


def init_critics(rng: np.random.Generator, n_agents: int, in_dim: int, hidden: int = 64,
                 extra_d: int = 0, share: bool = False) -> Critics:
    lead = (1,) if share else (n_agents,)
    c = Critics(_mlp(rng, [in_dim + extra_d, hidden, hidden, 1], lead), _mlp(rng, [in_dim, hidden, hidden, 1], lead))
    c.sync_target()
    return c


def _trunk(layers, x):
    h = x
    for layer in layers:
        h = dense_forward(layer, h).tanh()
    return h


def _with(layers, arrays: dict, prefix: str):
    """Detached copies of ``layers`` holding ``arrays`` (for frozen/target passes)."""
    return [_dense_at(arrays, f"{prefix}.{k}") for k in range(len(layers))]


def policy_forward(heads: PolicyHeads, x) -> tuple[Tensor, Tensor, Tensor]:
    """``x`` (A, B, N) -> logits (A, B, n+1), alpha (A, B), beta (A, B)."""
    logits = dense_forward(heads.head_d, _trunk(heads.trunk_d, x))
    conc = dense_forward(heads.head_c, _trunk(heads.trunk_c, x)).softplus() + 1.0
    return logits, conc[..., 0], conc[..., 1]


def critic_forward(layers, x) -> Tensor:
    """``x`` (B, D) shared or (A, B, D) per agent -> (A, B)."""
    h = x
    for k, layer in enumerate(layers):
        h = dense_forward(layer, h)
        if k < len(layers) - 1:
            h = h.tanh()
    return h[..., 0]


def target_values(critics: Critics, which: str, x) -> np.ndarray:
    layers = critics.discrete if which == "d" else critics.continuous
    prefix = "discrete" if which == "d" else "continuous"
    return critic_forward(_with(layers, critics.target, prefix), x).data


# -- inputs --------------------------------------------------------------------

def policy_input(obs: np.ndarray, t_clip: float) -> np.ndarray:
    """Scale the latency entry to [0, 1]; everything else already is."""
    x = np.array(obs, dtype=float)
    x[..., -1] = x[..., -1] / t_clip
    return x


def global_input(x: np.ndarray) -> np.ndarray:
    """(..., A, N) per-agent inputs -> (..., A*N) critic input."""
    return x.reshape(*x.shape[:-2], -1)


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(idx)]


# -- acting --------------------------------------------------------------------

def act(heads: PolicyHeads, obs: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
        t_clip: float, deterministic: bool = False):
    """Sample one hybrid action per agent.

    Returns ``(actions, disc, frac, logp_d, logp_c)``. Discrete indices beyond
    the current candidate list are masked out.
    """
    x = policy_input(obs, t_clip)[:, None, :]  # (A, 1, N)
    old = _frozen_heads(heads)
    logits, alpha, beta = (t.data[:, 0] for t in policy_forward(old, x))
    logp = log_softmax(np.where(mask, logits, -np.inf))
    A = len(obs)
    if deterministic:
        disc = np.argmax(logp, axis=-1)
        frac = alpha / (alpha + beta)
        lp_c = np.zeros(A)
    else:
        cdf = np.cumsum(np.exp(logp), axis=-1)
        u = rng.random(A) * cdf[:, -1]
        disc = np.minimum((cdf <= u[:, None]).sum(axis=-1), logp.shape[-1] - 1)
        frac = np.clip(rng.beta(alpha, beta), BETA_EDGE, 1.0 - BETA_EDGE)
        lp_c = beta_log_density(alpha, beta, frac)
    lp_d = logp[np.arange(A), disc]
    actions = [HybridAction(int(d), float(f) if d > 0 else 0.0) for d, f in zip(disc, frac)]
    return actions, disc, frac, lp_d, lp_c


def _dense_at(arrays: dict, prefix: str) -> DenseLayerParams:
    return DenseLayerParams(Tensor(arrays[f"{prefix}.weights"]), Tensor(arrays[f"{prefix}.bias"]))


def _frozen_heads(heads: PolicyHeads) -> PolicyHeads:
    fz = heads.frozen
    return PolicyHeads(_with(heads.trunk_d, fz, "trunk_d"), _dense_at(fz, "head_d"),
                       _with(heads.trunk_c, fz, "trunk_c"), _dense_at(fz, "head_c"))


# -- returns and advantages ----------------------------------------------------

def compute_returns(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Q_t = V(o_t) + sum_{k>=t} (gamma*lam)^(k-t) delta_k, with V(o_{T+1}) = 0.

    ``rewards`` and ``values`` are (T,) or (T, A).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    v_next = np.concatenate([v[1:], np.zeros_like(v[:1])])
    delta = r + gamma * v_next - v
    acc = np.zeros_like(v[0])
    adv = np.zeros_like(v)
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return v + adv


def counterfactual_baseline(probs: np.ndarray, q_all: np.ndarray) -> np.ndarray:
    """b = sum_a pi(a|o) Q(o, a); ``probs`` and ``q_all`` are (..., n_actions)."""
    return np.sum(probs * q_all, axis=-1)


def compute_advantages(q_hat, baseline, mask=None, normalize: bool = True) -> np.ndarray:
    """A = Q_hat - baseline, then mean/std normalized over the (masked) entries."""
    adv = np.asarray(q_hat, dtype=float) - np.asarray(baseline, dtype=float)
    if not normalize:
        return adv
    m = np.ones_like(adv, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.sum() < 2:
        return adv - (adv[m].mean() if m.any() else 0.0)
    mu, sd = adv[m].mean(), adv[m].std()
    return (adv - mu) / (sd if sd > 1e-12 else 1.0)


# -- buffer --------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    capacity: int = 20000  # agent-slots
    obs: list = field(default_factory=list)  # (A, N) policy inputs
    mask: list = field(default_factory=list)
    disc: list = field(default_factory=list)
    frac: list = field(default_factory=list)
    logp_d: list = field(default_factory=list)
    logp_c: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    episode_ends: list = field(default_factory=list)  # exclusive slot indices
    arrays: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.obs)

    def add(self, obs, mask, disc, frac, logp_d, logp_c, reward) -> None:
        if (len(self.obs) + 1) * len(obs) > self.capacity:
            raise ContractViolation(f"rollout buffer capacity {self.capacity} exceeded")
        for name, val in zip(("obs", "mask", "disc", "frac", "logp_d", "logp_c", "reward"),
                             (obs, mask, disc, frac, logp_d, logp_c, reward)):
            getattr(self, name).append(np.array(val))

    def end_episode(self) -> None:
        self.episode_ends.append(len(self.obs))

    def finalize(self) -> dict:
        self.arrays = {k: np.stack(getattr(self, k)) for k in
                       ("obs", "mask", "disc", "frac", "logp_d", "logp_c", "reward")}
        return self.arrays

    def episodes(self):
        start = 0
        for end in self.episode_ends:
            yield slice(start, end)
            start = end

    def clear(self) -> None:
        for k in ("obs", "mask", "disc", "frac", "logp_d", "logp_c", "reward", "episode_ends"):
            getattr(self, k).clear()
        self.arrays = {}


# -- losses --------------------------------------------------------------------

def _masked_mean(x: Tensor, m: np.ndarray) -> Tensor:
    """Per-agent mean over the batch axis restricted to ``m``, summed over agents."""
    m = np.asarray(m, dtype=float)
    denom = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    return (x * (m / denom)).sum()


def actor_loss_discrete(heads: PolicyHeads, x, disc, mask, logp_old, adv, clip: float,
                        entropy_coef: float) -> Tensor:
    """Clipped surrogate for the categorical head; arrays are (A, B, ...)."""
    logits, _, _ = policy_forward(heads, x)
    logits = masked_logits(logits, mask)
    logp = categorical_log_prob(logits, disc)
    ratio = (logp - logp_old).exp()
    surr = minimum(ratio * adv, ratio.clip(1.0 - clip, 1.0 + clip) * adv)
    ones = np.ones(np.shape(disc))
    return -_masked_mean(surr, ones) - entropy_coef * _masked_mean(categorical_entropy(logits), ones)


def actor_loss_continuous(heads: PolicyHeads, x, frac, logp_old, adv, weight, clip: float,
                          entropy_coef: float) -> Tensor:
    _, alpha, beta = policy_forward(heads, x)
    logp = beta_log_prob(alpha, beta, frac)
    ratio = (logp - logp_old).exp()
    surr = minimum(ratio * adv, ratio.clip(1.0 - clip, 1.0 + clip) * adv)
    return -_masked_mean(surr, weight) - entropy_coef * _masked_mean(beta_entropy(alpha, beta), weight)


def critic_loss(layers, x, target) -> Tensor:
    pred = critic_forward(layers, x)
    err = pred - np.asarray(target)
    return _masked_mean(err * err, np.ones(err.shape))


# -- training ------------------------------------------------------------------

@dataclass
class Learner:
    heads: PolicyHeads
    critics: Critics
    cfg: TrainConfig
    n_actions: int
    t_clip: float
    opt_d: OptimizerState = None
    opt_c: OptimizerState = None
    opt_vd: OptimizerState = None
    opt_vc: OptimizerState = None

    def __post_init__(self):
        kw = {"step_size": self.cfg.step_size}
        self.opt_d = OptimizerState.for_params(self.heads.discrete_params(), **kw)
        self.opt_c = OptimizerState.for_params(self.heads.continuous_params(), **kw)
        self.opt_vd = OptimizerState.for_params(list(flatten("", self.critics.discrete).values()), **kw)
        self.opt_vc = OptimizerState.for_params(list(flatten("", self.critics.continuous).values()), **kw)

    def all_tensors(self) -> dict:
        return {**{"heads." + k: v for k, v in self.heads.tensors().items()},
                **{"critics." + k: v for k, v in self.critics.tensors().items()}}


def make_learner(n_agents: int, obs_dim: int, n_actions: int, t_clip: float, cfg: TrainConfig) -> Learner:
    rng = np.random.default_rng(cfg.seed)
    heads = init_heads(rng, n_agents, obs_dim, n_actions, cfg.hidden, cfg.share_params)
    extra = n_actions if cfg.baseline == "counterfactual" else 0
    critics = init_critics(rng, n_agents, n_agents * obs_dim, cfg.hidden, extra, cfg.share_params)
    return Learner(heads, critics, cfg, n_actions, t_clip)


def _critic_d_input(lr: Learner, g: np.ndarray, disc: np.ndarray | None, A: int) -> np.ndarray:
    """Discrete-critic input: global obs (B, D), plus agent's own action in counterfactual mode."""
    if lr.cfg.baseline != "counterfactual":
        return g
    oh = one_hot(disc, lr.n_actions)  # (B, A, n)
    return np.concatenate([np.broadcast_to(g[None], (A,) + g.shape), oh.transpose(1, 0, 2)], axis=-1)


def prepare_round(lr: Learner, buf: RolloutBuffer) -> dict:
    """Returns, advantages and weights for everything in ``buf`` (arrays are (S, A))."""
    a = buf.finalize()
    cfg = lr.cfg
    obs, disc = a["obs"], a["disc"]
    S, A, _ = obs.shape
    g = global_input(obs)  # (S, D)
    r = a["reward"] * cfg.reward_scale
    cd_in = _critic_d_input(lr, g, disc, A)
    # shared critics return one column; every agent reads the same value
    v_d = np.broadcast_to(target_values(lr.critics, "d", cd_in).T, r.shape)  # (S, A)
    v_c = np.broadcast_to(target_values(lr.critics, "c", g).T, r.shape)
    q_d, q_c = np.zeros_like(r), np.zeros_like(r)
    for sl in buf.episodes():
        q_d[sl] = compute_returns(r[sl], v_d[sl], cfg.gamma, cfg.gae_lambda)
        q_c[sl] = compute_returns(r[sl], v_c[sl], cfg.gamma, cfg.gae_lambda)
    if cfg.baseline == "counterfactual":
        logits, _, _ = policy_forward(_frozen_heads(lr.heads), obs.transpose(1, 0, 2))
        lg = np.where(a["mask"].transpose(1, 0, 2), logits.data, -np.inf)
        probs = np.exp(log_softmax(lg))  # (A, S, n)
        q_all = np.stack([target_values(lr.critics, "d", _critic_d_input(lr, g, np.full_like(disc, k), A))
                          for k in range(lr.n_actions)], axis=-1)  # (A, S, n)
        b_d = counterfactual_baseline(probs, q_all).T
    else:
        b_d = v_d
    weight_c = (disc > 0) if cfg.mask_continuous else np.ones_like(disc, dtype=bool)
    a["q_d"], a["q_c"] = q_d, q_c
    a["adv_d"] = compute_advantages(q_d, b_d)
    a["adv_c"] = compute_advantages(q_c, v_c, weight_c)
    a["weight_c"] = weight_c.astype(float)
    a["global"] = g
    return a


def ppo_update(lr: Learner, data: dict, rng: np.random.Generator) -> dict:
    """K epochs of minibatch clipped-surrogate and critic regression updates.

    A non-finite loss aborts the round and restores the round-start parameters.
    """
    cfg = lr.cfg
    tensors = lr.all_tensors()
    backup = {k: t.data.copy() for k, t in tensors.items()}
    S, A = data["disc"].shape
    sums = {"actor_loss_d": 0.0, "actor_loss_c": 0.0, "critic_loss_d": 0.0, "critic_loss_c": 0.0}
    n = 0
    T = lambda k, idx: np.swapaxes(data[k][idx], 0, 1)  # (B, A, ...) -> (A, B, ...)
    for _ in range(cfg.epochs):
        order = rng.permutation(S)
        for s in range(0, S, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            x = T("obs", idx)
            g = data["global"][idx]
            losses = {
                "actor_loss_d": (actor_loss_discrete(lr.heads, x, T("disc", idx), T("mask", idx), T("logp_d", idx),
                                                     T("adv_d", idx), cfg.clip, cfg.entropy_coef),
                                 lr.heads.discrete_params(), lr.opt_d),
                "actor_loss_c": (actor_loss_continuous(lr.heads, x, T("frac", idx), T("logp_c", idx),
                                                       T("adv_c", idx), T("weight_c", idx), cfg.clip,
                                                       cfg.entropy_coef),
                                 lr.heads.continuous_params(), lr.opt_c),
                "critic_loss_d": (critic_loss(lr.critics.discrete, _critic_d_input(lr, g, data["disc"][idx], A),
                                              T("q_d", idx)),
                                  list(flatten("", lr.critics.discrete).values()), lr.opt_vd),
                "critic_loss_c": (critic_loss(lr.critics.continuous, g, T("q_c", idx)),
                                  list(flatten("", lr.critics.continuous).values()), lr.opt_vc),
            }
            if not all(np.isfinite(l.data) for l, _, _ in losses.values()):
                for k, t in tensors.items():
                    t.data = backup[k]
                bad = {k: float(l.data) for k, (l, _, _) in losses.items()}
                log.warning("non-finite loss %s; round rolled back", bad)
                return {**{k: float("nan") for k in sums}, "aborted": True}
            for name, (loss, params, opt) in losses.items():
                for p in params:
                    p.zero_grad()
                loss.backward()
                optimizer_step(opt, params)
                sums[name] += float(loss.data)
            n += 1
    lr.heads.freeze()
    lr.critics.sync_target()
    return {**{k: v / max(n, 1) for k, v in sums.items()}, "aborted": False}


@dataclass
class TrainResult:
    learner: Learner
    curve: list  # dicts with CURVE_FIELDS
    wall_clock: float = 0.0


def rollout(env: AvatarEnv, lr: Learner, rng: np.random.Generator, seed: int,
            buf: RolloutBuffer | None = None, deterministic: bool = False):
    """Play one episode; returns (per-slot rewards (T, A), infeasibility rate, breakdowns)."""
    obs = env.reset(seed)
    rewards, flags, bds = [], [], []
    while not env.done:
        mask = env.action_mask()
        actions, disc, frac, lp_d, lp_c = act(lr.heads, obs, mask, rng, env.cfg.t_clip, deterministic)
        res = env.step(actions)
        if buf is not None:
            buf.add(policy_input(obs, env.cfg.t_clip), mask, disc, frac, lp_d, lp_c, res.rewards)
        rewards.append(res.rewards)
        flags.append(res.infeasibility_flags)
        bds.append(res.breakdowns)
        obs = res.observations
    if buf is not None:
        buf.end_episode()
    return np.array(rewards), float(np.mean(flags)), bds


def train(env: AvatarEnv, cfg: TrainConfig, seed_base: int | None = None,
          progress=None) -> TrainResult:
    """E episodes of rollout -> returns -> advantages -> clipped updates."""
    t0 = time.perf_counter()
    lr = make_learner(env.n_agents, env.obs_dim, env.n_actions, env.cfg.t_clip, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    seed_base = cfg.seed * 100_003 if seed_base is None else seed_base
    buf = RolloutBuffer(cfg.buffer_capacity)
    curve, pending = [], []
    for ep in range(cfg.episodes):
        rewards, infeas, _ = rollout(env, lr, rng, seed_base + ep, buf)
        pending.append({"episode": ep + 1, "mean_return": float(rewards.sum(0).mean()),
                        "infeasibility_rate": infeas})
        if len(buf.episode_ends) == cfg.episodes_per_round or ep == cfg.episodes - 1:
            diag = ppo_update(lr, prepare_round(lr, buf), rng)
            buf.clear()
            for row in pending:
                row.update({k: diag[k] for k in CURVE_FIELDS if k in diag})
                curve.append(row)
            pending = []
            if progress is not None:
                progress(curve[-1])
    return TrainResult(lr, curve, time.perf_counter() - t0)


def write_curve(path, curve: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(float(row[k])) if k != "episode" else int(row[k]) for k in CURVE_FIELDS})


def save_learner(path, lr: Learner, meta: dict | None = None) -> None:
    m = dict(meta or {})
    m.update(kind="hybrid-mappo", n_actions=lr.n_actions, t_clip=lr.t_clip,
             config=copy.deepcopy(lr.cfg.__dict__))
    save_params(path, lr.all_tensors(), m)


def load_learner(path, n_agents: int, obs_dim: int) -> Learner:
    arrays, meta = load_params(path)
    cfg = TrainConfig(**meta["config"])
    lr = make_learner(n_agents, obs_dim, int(meta["n_actions"]), float(meta["t_clip"]), cfg)
    assign(lr.all_tensors(), arrays)
    lr.heads.freeze()
    lr.critics.sync_target()
    return lr
