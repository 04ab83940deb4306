"""Clipped-surrogate policy optimization over the layer-path decision process.

The policy is a one-hidden-layer tanh network over the embedded position
(one-hot model, one-hot layer, normalized step) with two heads: logits over
every hop plus stop, and the mean of a diagonal Gaussian over the hop's input
scale with a learned state-independent log standard deviation. The value
network shares the embedding but not the trunk. All arithmetic is float64
numpy with hand-derived gradients, so analytic gradients can be checked
against central finite differences exactly.

Advantages use exponentially weighted temporal-difference residuals computed
backward over whole episodes (terminal value zero; episodes always end).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .arch_search import InferencePath, LayerRef, PathAction, PathEnv, PathState
from .errors import DomainError, ProtocolError, TrainingError
from .tensor_store import save_tensor_map

__all__ = [
    "PPOConfig",
    "PolicyParams",
    "ValueParams",
    "Trajectory",
    "gae",
    "policy_loss",
    "value_loss",
    "entropy_bonus",
    "total_loss",
    "policy_loss_and_grads",
    "value_loss_and_grads",
    "total_loss_and_grads",
    "Adam",
    "train",
    "TrainResult",
    "RiggedPathEnv",
    "embed_state",
    "save_policy",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    learning_rate: float = 3e-4
    epochs_per_batch: int = 4
    episodes_per_iter: int = 8
    max_iter: int = 1000
    warmup_iters: int = 200
    seed: int = 0
    hidden: int = 64
    normalize_adv: bool = True
    snapshot_every: int = 50

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise DomainError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise DomainError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0.0:
            raise DomainError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.c1 < 0.0 or self.c2 < 0.0:
            raise DomainError("loss coefficients must be nonnegative")
        if self.learning_rate <= 0.0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("epochs_per_batch", "episodes_per_iter", "max_iter", "hidden"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.warmup_iters < 0:
            raise DomainError("warmup_iters must be >= 0")


# --- parameters ---------------------------------------------------------------


@dataclass
class PolicyParams:
    """Shared tanh trunk with a discrete head and a Gaussian scale head."""

    w1: np.ndarray
    b1: np.ndarray
    w_logits: np.ndarray
    b_logits: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    log_std: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w_logits": self.w_logits, "b_logits": self.b_logits,
            "w_scale": self.w_scale, "b_scale": self.b_scale,
            "log_std": self.log_std,
        }

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays().values()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParams":
        out = {}
        pos = 0
        for name, arr in self.arrays().items():
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return PolicyParams(**out)

    @classmethod
    def init(cls, obs_dim: int, num_actions: int, scale_dim: int, hidden: int,
             rng: np.random.Generator) -> "PolicyParams":
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(obs_dim), size=(hidden, obs_dim)),
            b1=np.zeros(hidden),
            w_logits=rng.normal(0.0, 0.01, size=(num_actions, hidden)),
            b_logits=np.zeros(num_actions),
            w_scale=rng.normal(0.0, 0.01, size=(scale_dim, hidden)),
            # hops start near unit scale so early paths behave like plain layers
            b_scale=np.ones(scale_dim),
            log_std=np.full(scale_dim, math.log(0.3)),
        )


@dataclass
class ValueParams:
    """One-hidden-layer tanh state-value network."""

    w1: np.ndarray
    b1: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w_out": self.w_out, "b_out": self.b_out}

    def copy(self) -> "ValueParams":
        return ValueParams(**{k: v.copy() for k, v in self.arrays().items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays().values()])

    def from_vector(self, vec: np.ndarray) -> "ValueParams":
        out = {}
        pos = 0
        for name, arr in self.arrays().items():
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return ValueParams(**out)

    @classmethod
    def init(cls, obs_dim: int, hidden: int, rng: np.random.Generator) -> "ValueParams":
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(obs_dim), size=(hidden, obs_dim)),
            b1=np.zeros(hidden),
            w_out=rng.normal(0.0, 0.01, size=hidden),
            b_out=np.zeros(()),
        )


def embed_state(state: PathState, num_models: int, num_layers: int, t_max: int) -> np.ndarray:
    """One-hot model and layer of the current position plus normalized step.

    The start state embeds as all zeros, which no reachable position shares.
    """
    obs = np.zeros(num_models + num_layers + 1)
    if state.current is not None:
        obs[state.current.model_index - 1] = 1.0
        obs[num_models + state.current.layer_index - 1] = 1.0
    obs[-1] = state.t / t_max
    return obs


# --- advantage estimation ------------------------------------------------------


def gae(rewards, values, gamma: float, gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward-recursive advantage estimate and value targets.

    values must hold one more entry than rewards; the last entry is the
    terminal state's value (zero for finished episodes). The recursion
    adv[t] = delta[t] + gamma * lambda * adv[t+1] telescopes to the
    exponentially weighted sum of temporal-difference residuals, and the
    value target is values[t] + adv[t].
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise DomainError(
            f"need len(values) == len(rewards) + 1, got {v.shape[0]} and {r.shape[0]}"
        )
    adv = np.zeros_like(r)
    carry = 0.0
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        carry = delta + gamma * gae_lambda * carry
        adv[t] = carry
    return adv, v[:-1] + adv


# --- batches --------------------------------------------------------------------


@dataclass
class Trajectory:
    """Flattened batch of whole episodes."""

    obs: np.ndarray          # (B, obs_dim)
    actions: np.ndarray      # (B,) int
    is_hop: np.ndarray       # (B,) bool
    scales: np.ndarray       # (B, scale_dim), zero rows on stop steps
    logprobs: np.ndarray     # (B,) recorded under the collection policy
    rewards: np.ndarray      # (B,)
    values: np.ndarray       # (B,) critic values at collection time
    dones: np.ndarray        # (B,) bool
    stop_allowed: np.ndarray  # (B,) bool, False masks the stop logit
    advantages: np.ndarray   # (B,)
    returns: np.ndarray      # (B,)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def from_episodes(cls, episodes: list[dict], gamma: float,
                      gae_lambda: float) -> "Trajectory":
        advs, rets = [], []
        for ep in episodes:
            a, g = gae(ep["rewards"], np.append(ep["values"], 0.0), gamma, gae_lambda)
            advs.append(a)
            rets.append(g)
        cat = lambda key: np.concatenate([np.asarray(ep[key]) for ep in episodes])
        return cls(
            obs=np.vstack([ep["obs"] for ep in episodes]),
            actions=cat("actions").astype(np.int64),
            is_hop=cat("is_hop").astype(bool),
            scales=np.vstack([ep["scales"] for ep in episodes]),
            logprobs=cat("logprobs"),
            rewards=cat("rewards"),
            values=cat("values"),
            dones=cat("dones").astype(bool),
            stop_allowed=cat("stop_allowed").astype(bool),
            advantages=np.concatenate(advs),
            returns=np.concatenate(rets),
        )

    def with_advantages(self, adv: np.ndarray) -> "Trajectory":
        return replace(self, advantages=adv)


# --- policy / value math ---------------------------------------------------------


def _policy_forward(pol: PolicyParams, obs: np.ndarray):
    z1pre = obs @ pol.w1.T + pol.b1
    z1 = np.tanh(z1pre)
    logits = z1 @ pol.w_logits.T + pol.b_logits
    mu = z1 @ pol.w_scale.T + pol.b_scale
    return z1, logits, mu


def _masked_log_softmax(logits: np.ndarray, stop_allowed: np.ndarray):
    """Log-probabilities with the final (stop) logit masked where disallowed."""
    masked = logits.copy()
    masked[~stop_allowed, -1] = -np.inf
    m = masked.max(axis=1, keepdims=True)
    ex = np.exp(masked - m)
    total = ex.sum(axis=1, keepdims=True)
    p = ex / total
    logp = masked - (m + np.log(total))
    return logp, p


def _log_probs(batch: Trajectory, pol: PolicyParams):
    """Joint log-probability of each recorded action under a policy."""
    z1, logits, mu = _policy_forward(pol, batch.obs)
    logp_disc, p = _masked_log_softmax(logits, batch.stop_allowed)
    lp = logp_disc[np.arange(len(batch)), batch.actions]
    sigma = np.exp(pol.log_std)
    diff = (batch.scales - mu) / sigma
    lp_gauss = (
        -0.5 * (diff ** 2).sum(axis=1)
        - pol.log_std.sum()
        - 0.5 * pol.log_std.shape[0] * _LOG_2PI
    )
    lp = lp + np.where(batch.is_hop, lp_gauss, 0.0)
    return lp, dict(z1=z1, logits=logits, mu=mu, logp_disc=logp_disc, p=p,
                    sigma=sigma, diff=diff)


def _zero_grads(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


def _policy_backward(pol: PolicyParams, batch: Trajectory, cache: dict,
                     d_lp: np.ndarray, d_logits_extra: np.ndarray | None = None,
                     d_log_std_extra: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(joint log-prob) plus direct logit/log-std terms."""
    b = len(batch)
    p = cache["p"]
    onehot = np.zeros_like(p)
    onehot[np.arange(b), batch.actions] = 1.0
    d_logits = d_lp[:, None] * (onehot - p)
    if d_logits_extra is not None:
        d_logits = d_logits + d_logits_extra
    hop = batch.is_hop.astype(np.float64)
    d_lp_hop = d_lp * hop
    d_mu = d_lp_hop[:, None] * cache["diff"] / cache["sigma"]
    grads = _zero_grads(pol)
    grads["log_std"] += (d_lp_hop[:, None] * (cache["diff"] ** 2 - 1.0)).sum(axis=0)
    if d_log_std_extra is not None:
        grads["log_std"] += d_log_std_extra
    z1 = cache["z1"]
    grads["w_logits"] += d_logits.T @ z1
    grads["b_logits"] += d_logits.sum(axis=0)
    grads["w_scale"] += d_mu.T @ z1
    grads["b_scale"] += d_mu.sum(axis=0)
    d_z1 = d_logits @ pol.w_logits + d_mu @ pol.w_scale
    d_z1pre = d_z1 * (1.0 - z1 ** 2)
    grads["w1"] += d_z1pre.T @ batch.obs
    grads["b1"] += d_z1pre.sum(axis=0)
    return grads


def policy_loss_and_grads(batch: Trajectory, pol: PolicyParams, pol_old: PolicyParams,
                          clip_eps: float) -> tuple[float, dict[str, np.ndarray]]:
    """Negated clipped surrogate and its gradient with respect to the policy."""
    lp_new, cache = _log_probs(batch, pol)
    lp_old, _ = _log_probs(batch, pol_old)
    rho = np.exp(lp_new - lp_old)
    if not np.isfinite(rho).all():
        raise TrainingError("non-finite policy ratio")
    adv = batch.advantages
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    loss = -float(np.minimum(unclipped, clipped).mean())
    active = (unclipped <= clipped).astype(np.float64)
    d_lp = -(adv * rho * active) / len(batch)
    return loss, _policy_backward(pol, batch, cache, d_lp)


def entropy_and_grads(batch: Trajectory, pol: PolicyParams) -> tuple[float, dict[str, np.ndarray]]:
    """Mean discrete entropy plus the Gaussian head's differential entropy."""
    _, cache = _log_probs(batch, pol)
    p, logp = cache["p"], cache["logp_disc"]
    plogp = np.where(p > 0.0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0)
    h_disc = -plogp.sum(axis=1)
    dh = pol.log_std.shape[0]
    h_gauss = float(pol.log_std.sum() + 0.5 * dh * (1.0 + _LOG_2PI))
    h = float(h_disc.mean()) + h_gauss
    # dH_disc/dlogits_j = -p_j (log p_j + H_row); start from zero log-prob flow
    d_logits = np.where(p > 0.0, -p * (np.where(np.isfinite(logp), logp, 0.0)
                                       + h_disc[:, None]), 0.0) / len(batch)
    grads = _policy_backward(pol, batch, cache, np.zeros(len(batch)),
                             d_logits_extra=d_logits,
                             d_log_std_extra=np.ones(dh))
    return h, grads


def value_loss_and_grads(batch: Trajectory, val: ValueParams) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error against the value targets and its gradient."""
    z1pre = batch.obs @ val.w1.T + val.b1
    z1 = np.tanh(z1pre)
    v = z1 @ val.w_out + val.b_out
    err = v - batch.returns
    loss = float((err ** 2).mean())
    d_v = 2.0 * err / len(batch)
    grads = _zero_grads(val)
    grads["w_out"] += d_v @ z1
    grads["b_out"] += np.asarray(d_v.sum())
    d_z1pre = np.outer(d_v, val.w_out) * (1.0 - z1 ** 2)
    grads["w1"] += d_z1pre.T @ batch.obs
    grads["b1"] += d_z1pre.sum(axis=0)
    return loss, grads


def policy_loss(batch: Trajectory, pol: PolicyParams, pol_old: PolicyParams,
                clip_eps: float) -> float:
    return policy_loss_and_grads(batch, pol, pol_old, clip_eps)[0]


def value_loss(batch: Trajectory, val: ValueParams) -> float:
    return value_loss_and_grads(batch, val)[0]


def entropy_bonus(batch: Trajectory, pol: PolicyParams) -> float:
    return entropy_and_grads(batch, pol)[0]


def total_loss_and_grads(batch: Trajectory, pol: PolicyParams, pol_old: PolicyParams,
                         val: ValueParams, c1: float, c2: float, clip_eps: float):
    """Combined objective: surrogate + c1 * value error - c2 * entropy."""
    l_pol, g_pol = policy_loss_and_grads(batch, pol, pol_old, clip_eps)
    l_val, g_val = value_loss_and_grads(batch, val)
    h, g_h = entropy_and_grads(batch, pol)
    loss = l_pol + c1 * l_val - c2 * h
    for k in g_pol:
        g_pol[k] = g_pol[k] - c2 * g_h[k]
    for k in g_val:
        g_val[k] = c1 * g_val[k]
    return loss, g_pol, g_val


def total_loss(batch: Trajectory, pol: PolicyParams, pol_old: PolicyParams,
               val: ValueParams, c1: float, c2: float, clip_eps: float) -> float:
    return total_loss_and_grads(batch, pol, pol_old, val, c1, c2, clip_eps)[0]


# --- optimizer -------------------------------------------------------------------


class Adam:
    """First/second-moment adaptive steps with bias correction."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = _zero_grads(params)
        self.v = _zero_grads(params)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        arrays = self.params.arrays()
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            arrays[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    policy: PolicyParams
    value: ValueParams
    best_path: InferencePath
    best_return: float
    history: list[dict]
    snapshots: list[tuple[int, InferencePath, float]]


def _sample_episode(env, pol: PolicyParams, rng: np.random.Generator,
                    num_actions: int) -> dict:
    num_models, num_layers, t_max = env.num_models, env.num_layers, env.t_max
    scale_dim = env.hidden_width
    state = env.reset()
    rows = {k: [] for k in ("obs", "actions", "is_hop", "scales", "logprobs",
                            "rewards", "values", "dones", "stop_allowed")}
    hops, hop_scales = [], []
    while True:
        obs = embed_state(state, num_models, num_layers, t_max)
        z1 = np.tanh(pol.w1 @ obs + pol.b1)
        logits = pol.w_logits @ z1 + pol.b_logits
        mu = pol.w_scale @ z1 + pol.b_scale
        stop_ok = state.t > 0
        if not stop_ok:
            logits = logits.copy()
            logits[-1] = -np.inf
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        a = int(rng.choice(num_actions, p=p))
        lp = float(np.log(p[a]))
        if a == num_actions - 1:
            action = PathAction.stop()
            scale = np.zeros(scale_dim)
        else:
            ref = LayerRef(a // num_layers + 1, a % num_layers + 1)
            action = PathAction(target=ref)
            sigma = np.exp(pol.log_std)
            scale = mu + sigma * rng.standard_normal(scale_dim)
            diff = (scale - mu) / sigma
            lp += float(-0.5 * (diff ** 2).sum() - pol.log_std.sum()
                        - 0.5 * scale_dim * _LOG_2PI)
            hops.append(ref)
            hop_scales.append(scale.astype(np.float32))
        new_state, reward, done = env.step(state, action,
                                           None if action.is_stop else scale)
        rows["obs"].append(obs)
        rows["actions"].append(a)
        rows["is_hop"].append(not action.is_stop)
        rows["scales"].append(scale)
        rows["logprobs"].append(lp)
        rows["rewards"].append(reward)
        rows["dones"].append(done)
        rows["stop_allowed"].append(stop_ok)
        state = new_state
        if done:
            break
    rows["obs"] = np.asarray(rows["obs"])
    rows["scales"] = np.asarray(rows["scales"])
    for k in ("actions", "is_hop", "logprobs", "rewards", "dones", "stop_allowed"):
        rows[k] = np.asarray(rows[k])
    rows["path"] = InferencePath(tuple(hops), tuple(hop_scales)) if hops else None
    rows["episode_return"] = float(rows["rewards"].sum())
    return rows


def _value_of(val: ValueParams, obs: np.ndarray) -> np.ndarray:
    return np.tanh(obs @ val.w1.T + val.b1) @ val.w_out + val.b_out


def train(zoo, lam, env_cfg, ppo_cfg: PPOConfig, *, env=None,
          init_policy: PolicyParams | None = None,
          init_value: ValueParams | None = None) -> TrainResult:
    """Run the search loop for one weight vector.

    Episodes are sampled from the first iteration on, but network updates only
    start after the warmup window. Returns the best path ever rolled out, the
    final parameters, and the per-iteration history.
    """
    if env is None:
        env = PathEnv(env_cfg, list(zoo))
    num_actions = env.num_models * env.num_layers + 1
    obs_dim = env.num_models + env.num_layers + 1
    init_rng = np.random.default_rng([ppo_cfg.seed & 0xFFFFFFFFFFFFFFFF, 11])
    pol = init_policy.copy() if init_policy is not None else PolicyParams.init(
        obs_dim, num_actions, env.hidden_width, ppo_cfg.hidden, init_rng)
    val = init_value.copy() if init_value is not None else ValueParams.init(
        obs_dim, ppo_cfg.hidden, init_rng)
    opt_pol = Adam(pol, ppo_cfg.learning_rate)
    opt_val = Adam(val, ppo_cfg.learning_rate)
    rollout_rng = np.random.default_rng([ppo_cfg.seed & 0xFFFFFFFFFFFFFFFF, 13])

    best_path: InferencePath | None = None
    best_return = -np.inf
    history: list[dict] = []
    snapshots: list[tuple[int, InferencePath, float]] = []

    for it in range(1, ppo_cfg.max_iter + 1):
        episodes = []
        for _ in range(ppo_cfg.episodes_per_iter):
            ep = _sample_episode(env, pol, rollout_rng, num_actions)
            ep["values"] = _value_of(val, ep["obs"])
            episodes.append(ep)
            if ep["path"] is not None and ep["episode_return"] > best_return:
                best_return = ep["episode_return"]
                best_path = ep["path"]
        mean_return = float(np.mean([ep["episode_return"] for ep in episodes]))

        l_pol = l_val = h = float("nan")
        if it > ppo_cfg.warmup_iters:
            batch = Trajectory.from_episodes(episodes, ppo_cfg.gamma, ppo_cfg.gae_lambda)
            if ppo_cfg.normalize_adv and len(batch) > 1:
                adv = batch.advantages
                batch = batch.with_advantages((adv - adv.mean()) / (adv.std() + 1e-8))
            pol_old = pol.copy()
            for epoch in range(ppo_cfg.epochs_per_batch):
                loss, g_pol, g_val = total_loss_and_grads(
                    batch, pol, pol_old, val, ppo_cfg.c1, ppo_cfg.c2, ppo_cfg.clip_eps)
                if not np.isfinite(loss):
                    raise TrainingError(f"loss diverged at iteration {it}")
                if epoch == 0:
                    l_pol = policy_loss(batch, pol, pol_old, ppo_cfg.clip_eps)
                    l_val = value_loss(batch, val)
                    h = entropy_bonus(batch, pol)
                opt_pol.step(g_pol)
                opt_val.step(g_val)

        history.append({
            "iter": it,
            "mean_return": mean_return,
            "best_return": float(best_return),
            "policy_loss": l_pol,
            "value_loss": l_val,
            "entropy": h,
        })
        if ppo_cfg.snapshot_every > 0 and it % ppo_cfg.snapshot_every == 0 and best_path is not None:
            snapshots.append((it, best_path, float(best_return)))

    if best_path is None:
        raise TrainingError("no complete path was rolled out")
    return TrainResult(policy=pol, value=val, best_path=best_path,
                       best_return=float(best_return), history=history,
                       snapshots=snapshots)


def save_policy(result: TrainResult, path) -> None:
    """Persist policy and value parameters in the shared container format."""
    tensors = {}
    for name, arr in result.policy.arrays().items():
        tensors[f"policy.{name}"] = arr.astype(np.float32)
    for name, arr in result.value.arrays().items():
        tensors[f"value.{name}"] = np.asarray(arr, dtype=np.float32).reshape(
            arr.shape if arr.shape else (1,))
    save_tensor_map(path, tensors,
                    arch={"kind": "ppo_networks"},
                    meta={"best_return": repr(result.best_return)})


# --- rigged environment for convergence checks -------------------------------------


class RiggedPathEnv:
    """Planted-path environment: each hop pays 1 when it matches the hidden
    target's next entry, minus the usual length penalty. The optimal return is
    known in closed form, which makes convergence measurable."""

    def __init__(self, target: list[tuple[int, int]], beta1: float = 0.01,
                 t_max: int = 4, num_models: int = 2, num_layers: int = 2,
                 hidden_width: int = 4):
        self.target = [LayerRef(m, l) for m, l in target]
        self.beta1 = beta1
        self.t_max = t_max
        self.num_models = num_models
        self.num_layers = num_layers
        self.hidden_width = hidden_width

    def reset(self) -> PathState:
        return PathState(current=None, t=0, partial_path=())

    def step(self, state: PathState, action: PathAction,
             scale=None) -> tuple[PathState, float, bool]:
        if state.done:
            raise ProtocolError("episode already finished; reset the environment")
        if action.is_stop:
            if state.t == 0:
                raise ProtocolError("cannot stop before the first hop")
            new_state = PathState(current=state.current, t=state.t,
                                  partial_path=state.partial_path, done=True)
            return new_state, -self.beta1 * state.t, True
        t_new = state.t + 1
        hit = (state.t < len(self.target) and action.target == self.target[state.t]
               and state.partial_path == tuple(self.target[:state.t]))
        reward = (1.0 if hit else 0.0) - self.beta1 * t_new
        done = t_new >= self.t_max
        new_state = PathState(current=action.target, t=t_new,
                              partial_path=state.partial_path + (action.target,),
                              done=done)
        return new_state, reward, done

    def optimal_return(self) -> float:
        """Best achievable episode return over all stopping strategies."""
        best = -np.inf
        t_star = len(self.target)
        for length in range(1, self.t_max + 1):
            hits = min(length, t_star)
            penalty = self.beta1 * length * (length + 1) / 2.0
            stop_penalty = self.beta1 * length if length < self.t_max else 0.0
            best = max(best, hits - penalty - stop_penalty)
        return float(best)
