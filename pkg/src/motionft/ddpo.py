"""DDPO with importance sampling and a PPO-clipped surrogate.

Each iteration collects a fresh on-policy buffer (``n_prompts`` distinct
prompts x ``replicas``), then runs several epochs of minibatch updates on the
LoRA parameters, re-evaluating each stored transition's log-density under
the current adapters.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import (
    DiffusionTrajectory,
    SamplingSchedule,
    cfg_predict_with_cache,
    gaussian_logp,
    posterior_from_eps,
    sample_ancestral,
)
from .nncore import AdamState, NumericError, adam_step, clip_grad_norm
from .reward import reward

log = logging.getLogger(__name__)

LOG_W_CLAMP = 20.0


@dataclass
class DdpoConfig:
    n_prompts: int = 64
    replicas: int = 4
    update_epochs: int = 4
    clip_eps: float = 1e-4
    lr: float = 3e-4
    minibatch: int = 256
    max_iterations: int = 300
    grad_clip: float = 1.0
    kl_guard: float = 0.05
    cfg_scale: float = 2.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")

    @property
    def capacity(self) -> int:
        return self.n_prompts * self.replicas


@dataclass
class ReplayBuffer:
    capacity: int = 256
    trajectories: list = field(default_factory=list)
    prompt_stats: dict = field(default_factory=dict)

    def fill(self, trajs) -> None:
        if len(trajs) > self.capacity:
            raise ValueError("buffer overflow")
        self.trajectories = list(trajs)
        self.prompt_stats = {}

    def __len__(self) -> int:
        return len(self.trajectories)

    def stacked(self):
        """Arrays of shape (N, K, ...) over trajectories and steps."""
        trajs = self.trajectories
        x_t = np.stack([[s.x_t for s in tr.steps] for tr in trajs])
        x_prev = np.stack([[s.x_prev for s in tr.steps] for tr in trajs])
        logp = np.array([[s.logp_old for s in tr.steps] for tr in trajs])
        idx = np.array([[s.idx for s in tr.steps] for tr in trajs])
        tokens = np.array([tr.tokens for tr in trajs], dtype=np.int64)
        adv = np.array([tr.advantage for tr in trajs], dtype=np.float64)
        return x_t, x_prev, logp, idx, tokens, adv


def collect(model, reward_enc, prompts, cfg: DdpoConfig, sched: SamplingSchedule, rng, max_retries: int = 3):
    """Sample ``cfg.n_prompts`` distinct prompt records, ``cfg.replicas`` chains each."""
    if not model.adapters:
        raise ValueError("collection expects a model with LoRA adapters")
    if len(prompts) < cfg.n_prompts:
        raise ValueError(f"need {cfg.n_prompts} distinct prompts, have {len(prompts)}")
    chosen = rng.choice(len(prompts), size=cfg.n_prompts, replace=False)
    recs = [prompts[i] for i in chosen]
    ids = np.repeat([r.instance_id for r in recs], cfg.replicas)
    tokens = np.repeat(np.array([r.tokens.ids for r in recs], dtype=np.int64), cfg.replicas, axis=0)
    for attempt in range(max_retries + 1):
        try:
            trajs = sample_ancestral(model, tokens, sched, cfg.cfg_scale, rng, record=True, prompt_ids=ids)
            break
        except NumericError as exc:
            log.warning("non-finite trajectory batch (%s); resampling", exc)
            if attempt == max_retries:
                raise
    x0 = np.stack([tr.x0 for tr in trajs])
    r = reward(reward_enc, x0, tokens)
    for tr, rv in zip(trajs, r):
        tr.reward = float(rv)
    buf = ReplayBuffer(cfg.capacity)
    buf.fill(trajs)
    return buf


def compute_advantages(buffer: ReplayBuffer, eps: float = 1e-6) -> ReplayBuffer:
    """Per-prompt standardisation of terminal rewards over that prompt's replicas."""
    groups: dict[int, list[int]] = {}
    for i, tr in enumerate(buffer.trajectories):
        if tr.reward is None:
            raise ValueError("trajectory without reward")
        groups.setdefault(tr.prompt_id, []).append(i)
    for pid, members in groups.items():
        r = np.array([buffer.trajectories[i].reward for i in members])
        mean, std = float(r.mean()), float(r.std())
        buffer.prompt_stats[pid] = (mean, std)
        for i, rv in zip(members, r):
            buffer.trajectories[i].advantage = float((rv - mean) / (std + eps))
    return buffer


def importance_weight(logp_new, logp_old):
    return np.exp(np.clip(np.asarray(logp_new) - np.asarray(logp_old), -LOG_W_CLAMP, LOG_W_CLAMP))


def ddpo_loss(w, advantage, clip_eps: float):
    """Negative clipped surrogate, elementwise."""
    if clip_eps <= 0:
        raise ValueError("clip_eps must be positive")
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    return -np.minimum(w * a, np.clip(w, 1.0 - clip_eps, 1.0 + clip_eps) * a)


def surrogate_and_grad(model, sched: SamplingSchedule, scale, x_t, x_prev, logp_old, idx, tokens, adv, clip_eps):
    """Mean clipped loss over a minibatch of step records and its LoRA gradient.

    Returns (loss, grads, w, unclipped_loss).
    """
    n = x_t.shape[0]
    eps_hat, back = cfg_predict_with_cache(model, x_t, sched.ts[idx], tokens, scale)
    dist = posterior_from_eps(x_t, eps_hat, idx, sched)
    logp_new = gaussian_logp(x_prev, dist.mean, dist.sigma)
    delta = logp_new - logp_old
    w = importance_weight(logp_new, logp_old)
    unclipped = w * adv
    clipped = np.clip(w, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    loss = float(np.mean(-np.minimum(unclipped, clipped)))
    # d loss / d logp_new: gradient only where the unclipped branch is the min
    # and the log-ratio clamp is inactive
    active = (unclipped <= clipped) & (np.abs(delta) < LOG_W_CLAMP)
    g_logp = np.where(active, -adv * w, 0.0) / n
    sig2 = (dist.sigma ** 2).reshape(-1, 1, 1)
    g_mean = g_logp.reshape(-1, 1, 1) * (x_prev - dist.mean) / sig2
    g_eps = g_mean * (-(sched.coef_x[idx] * sched.coef_eps[idx]).reshape(-1, 1, 1))
    grads = back(g_eps)
    return loss, grads, w, float(np.mean(-unclipped)), delta


def policy_update(model, buffer: ReplayBuffer, cfg: DdpoConfig, sched: SamplingSchedule, rng,
                  state: AdamState | None = None):
    """Several epochs of clipped-surrogate minibatch steps on the adapters."""
    state = state if state is not None else AdamState()
    x_t, x_prev, logp_old, idx, tokens, adv = buffer.stacked()
    N, K = logp_old.shape
    flat = lambda a: a.reshape((N * K,) + a.shape[2:])
    x_t, x_prev, logp_old, idx = flat(x_t), flat(x_prev), flat(logp_old), flat(idx)
    tokens = np.repeat(tokens, K, axis=0)
    adv = np.repeat(adv, K)

    losses, abs_dev, clip_fracs, kls = [], [], [], []
    first = None
    aborted = False
    for epoch in range(cfg.update_epochs):
        order = rng.permutation(N * K)
        for s in range(0, N * K, cfg.minibatch):
            mb = order[s:s + cfg.minibatch]
            loss, grads, w, unclipped, delta = surrogate_and_grad(
                model, sched, cfg.cfg_scale, x_t[mb], x_prev[mb], logp_old[mb], idx[mb], tokens[mb], adv[mb],
                cfg.clip_eps)
            if first is None:
                first = {"max_abs_w_minus_1": float(np.max(np.abs(w - 1.0))), "loss": loss,
                         "unclipped_loss": unclipped, "mean_adv": float(np.mean(adv[mb]))}
            kl = 0.5 * float(np.mean(delta ** 2))
            losses.append(loss)
            abs_dev.append(float(np.mean(np.abs(w - 1.0))))
            clip_fracs.append(float(np.mean(np.abs(w - 1.0) > cfg.clip_eps)))
            kls.append(kl)
            if kl > cfg.kl_guard:
                log.info("approx KL %.4f above guard %.4f; skipping rest of buffer", kl, cfg.kl_guard)
                aborted = True
                break
            clip_grad_norm(grads, cfg.grad_clip)
            adam_step(model.adapters.tensors(), grads, state, cfg.lr)
        if aborted:
            break
    return {
        "loss": float(np.mean(losses)),
        "mean_abs_w_minus_1": float(np.mean(abs_dev)),
        "clip_frac": float(np.mean(clip_fracs)),
        "approx_kl": float(np.mean(kls)),
        "kl_aborted": aborted,
        "first_minibatch": first,
    }, state


def finetune(model, reward_enc, prompts, cfg: DdpoConfig, sched: SamplingSchedule, seed: int = 0,
             on_iteration=None, on_checkpoint=None):
    """Alternate collection and update for ``cfg.max_iterations`` iterations.

    ``prompts`` are prompt-only records.  Returns the list of per-iteration
    log dicts; ``on_iteration(entry)`` and ``on_checkpoint(it)`` are optional hooks.
    """
    if any(hasattr(p, "frames") for p in prompts):
        raise ValueError("finetune expects a prompts-only split")
    if not reward_enc.frozen:
        reward_enc.freeze()
    rng = np.random.default_rng(seed)
    state = AdamState()
    history = []
    for it in range(cfg.max_iterations):
        t0 = time.perf_counter()
        buf = compute_advantages(collect(model, reward_enc, prompts, cfg, sched, rng))
        rewards = np.array([tr.reward for tr in buf.trajectories])
        stats, state = policy_update(model, buf, cfg, sched, rng, state)
        entry = {
            "iter": it,
            "mean_reward": float(rewards.mean()),
            "std_reward": float(rewards.std()),
            "loss": stats["loss"],
            "clip_frac": stats["clip_frac"],
            "approx_kl": stats["approx_kl"],
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        history.append(entry)
        if on_iteration is not None:
            on_iteration(entry)
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(it + 1)
    return history


def config_dict(cfg: DdpoConfig) -> dict:
    return asdict(cfg)
