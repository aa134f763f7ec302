"""Conditional DDPM over fixed-length motion sequences.

The denoiser predicts noise from ``[x_t (flattened), pooled prompt embedding,
sinusoidal timestep embedding]`` with a residual SiLU MLP.  Reverse steps
use the DDPM posterior over an active (possibly subsampled) schedule, so each
transition is a Gaussian with a closed-form log-density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nncore import (
    AdamState,
    Linear,
    LoraAdapter,
    LoraSet,
    NumericError,
    ParamStore,
    SiLU,
    adam_step,
    check_finite,
    clip_grad_norm,
    mlp_backward,
    mlp_forward,
    mlp_init,
)
from .synthworld import N_CHANNELS, N_FRAMES, NULL_ID, PAD_ID, VOCAB, null_tokens

LOG_2PI = math.log(2.0 * math.pi)


# --- schedules --------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """beta/alpha/alpha_bar for t = 1..T (stored at index t-1)."""

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def ab(self, t):
        """alpha_bar at integer t, with alpha_bar(0) = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def alpha_bar_at(self, t):
        """alpha_bar at real-valued t; log alpha_bar is piecewise linear."""
        grid = np.arange(self.T + 1, dtype=np.float64)
        log_ab = np.concatenate([[0.0], np.log(self.alpha_bar)])
        return np.exp(np.interp(t, grid, log_ab))

    def log_snr_at(self, t):
        ab = self.alpha_bar_at(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def t_from_log_snr(self, lam):
        log_ab_target = -np.logaddexp(0.0, -2.0 * np.asarray(lam))
        grid = np.arange(self.T + 1, dtype=np.float64)
        log_ab = np.concatenate([[0.0], np.log(self.alpha_bar)])
        return np.interp(log_ab_target, log_ab[::-1], grid[::-1])

    def meta(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def make_schedule(T_diff: int, kind: str = "linear") -> NoiseSchedule:
    """Linear betas: 1e-4 * (1000/T) up to 0.01 * (1000/T), i.e. half the usual
    terminal slope, which leaves alpha_bar_T near 4e-3 instead of ~1e-5."""
    if T_diff < 2:
        raise ValueError("T_diff must be >= 2")
    if kind == "linear":
        scale = 1000.0 / T_diff
        lo = min(1e-4 * scale, 0.005)
        hi = min(0.01 * scale, 0.999)
        beta = np.linspace(lo, hi, T_diff)
    elif kind == "cosine":
        beta = np.clip(1.0 - cosine_alpha_bar(np.arange(1, T_diff + 1), T_diff)
                       / cosine_alpha_bar(np.arange(0, T_diff), T_diff), 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T_diff, kind, beta)


def cosine_alpha_bar(t, T, s=0.008):
    f = np.cos((np.asarray(t, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2
    return f / math.cos(s / (1 + s) * math.pi / 2) ** 2


@dataclass
class SamplingSchedule:
    """Descending timesteps of the active reverse chain and per-transition
    DDPM posterior coefficients.  Transition i goes from ``ts[i]`` to ``prev[i]``."""

    parent: NoiseSchedule
    ts: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=np.int64)
        if np.any(np.diff(ts) >= 0) or ts[-1] < 1 or ts[0] > self.parent.T:
            raise ValueError("timesteps must be strictly descending within 1..T")
        self.ts = ts
        self.prev = np.concatenate([ts[1:], [0]])
        ab_t = self.parent.ab(ts)
        ab_p = self.parent.ab(self.prev)
        self.ab_t, self.ab_prev = ab_t, ab_p
        self.alpha_step = ab_t / ab_p
        self.beta_step = 1.0 - self.alpha_step
        var = self.beta_step * (1.0 - ab_p) / (1.0 - ab_t)
        # the posterior variance vanishes on the step into t=0; fall back to beta
        var = np.where(self.prev == 0, self.beta_step, var)
        self.sigma = np.sqrt(var)
        self.coef_x = 1.0 / np.sqrt(self.alpha_step)
        self.coef_eps = self.beta_step / np.sqrt(1.0 - ab_t)

    def __len__(self) -> int:
        return len(self.ts)

    def meta(self) -> dict:
        return {**self.parent.meta(), "ts": self.ts.tolist()}


def subsample(schedule: NoiseSchedule, n_steps: int) -> SamplingSchedule:
    """n_steps timesteps spread evenly over 1..T, always containing 1 and T."""
    if not 1 <= n_steps <= schedule.T:
        raise ValueError("n_steps out of range")
    if n_steps == schedule.T:
        ts = np.arange(schedule.T, 0, -1)
    else:
        ts = np.unique(np.round(np.linspace(1, schedule.T, n_steps)).astype(np.int64))[::-1]
    return SamplingSchedule(schedule, ts)


# --- denoiser ---------------------------------------------------------------


@dataclass
class DenoiserConfig:
    width: int = 256
    n_blocks: int = 3
    emb_dim: int = 32
    t_dim: int = 32
    T_diff: int = 50

    @property
    def x_dim(self) -> int:
        return N_FRAMES * N_CHANNELS

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.emb_dim + self.t_dim


def timestep_embedding(t, dim: int, T_diff: int) -> np.ndarray:
    """Sinusoids whose fastest component turns 0.5 rad per step, so fractional
    timesteps (used by the ODE sampler) interpolate smoothly."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 0.5 * np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _pool_mask(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = (tokens != PAD_ID).astype(np.float64)
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return mask, count


LORA_TARGET_SETS = ("cond", "all")


class Denoiser:
    """Epsilon-prediction network with optional LoRA adapters.

    The stem sees [x_t, pooled prompt, time embedding]; a conditioning
    projection of [pooled prompt, time embedding] is also added inside every
    residual block, so prompt details survive the depth of the network.
    """

    def __init__(self, config: DenoiserConfig, params: ParamStore, adapters: LoraSet | None = None):
        self.config = config
        self.params = params
        self.adapters = adapters
        c = config
        self.stem = [Linear("net.in", c.in_dim, c.width)]
        self.cond = [Linear("net.cond", c.emb_dim + c.t_dim, c.width), SiLU()]
        self.blocks = [
            ([SiLU(), Linear(f"net.block{i}.fc1", c.width, c.width)],
             [Linear(f"net.block{i}.cond", c.width, c.width)],
             [SiLU(), Linear(f"net.block{i}.fc2", c.width, c.width)])
            for i in range(c.n_blocks)
        ]
        self.head = [SiLU(), Linear("net.out", c.width, c.x_dim)]

    def segments(self):
        yield self.stem
        yield self.cond
        for blk in self.blocks:
            yield from blk
        yield self.head

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0) -> "Denoiser":
        rng = np.random.default_rng(seed)
        params = ParamStore(rng_seed=seed)
        params.add("tok_emb", rng.normal(0.0, 1.0, size=(len(VOCAB), config.emb_dim)))
        model = cls(config, params)
        segs = list(model.segments())
        for seg in segs[:-1]:
            mlp_init(seg, params, rng)
        mlp_init(segs[-1], params, rng, zero_last=True)
        return model

    # LoRA ---------------------------------------------------------------
    def lora_target_names(self, targets: str = "cond") -> list[str]:
        """``cond``: the conditioning projections; ``all``: every 2-D weight but the head."""
        if targets not in LORA_TARGET_SETS:
            raise ValueError(f"unknown LoRA target set {targets!r}")
        names = [layer.weight for seg in list(self.segments())[:-1] for layer in seg if isinstance(layer, Linear)]
        if targets == "cond":
            names = [n for n in names if n.endswith(".cond.w")]
        return names

    def attach_lora(self, rank: int = 4, alpha: float = 16.0, seed: int = 0, targets: str = "cond") -> LoraSet:
        rng = np.random.default_rng(seed)
        self.adapters = LoraSet(
            (name, LoraAdapter.init(name, self.params[name].shape, rank, alpha, rng))
            for name in self.lora_target_names(targets)
        )
        return self.adapters

    def trainable(self):
        return self.adapters.tensors() if self.adapters else self.params

    def n_backbone(self) -> int:
        return self.params.n_scalars()

    def clone(self) -> "Denoiser":
        return Denoiser(self.config, self.params.copy(), self.adapters.copy() if self.adapters else None)

    # forward / backward -----------------------------------------------
    def _inputs(self, x_t, t, tokens):
        B = x_t.shape[0]
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[0] != B:
            raise ValueError("batch mismatch between x_t and tokens")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        mask, count = _pool_mask(tokens)
        pooled = (self.params["tok_emb"][tokens] * mask[..., None]).sum(axis=1) / count
        ctx = np.concatenate([pooled, timestep_embedding(t, self.config.t_dim, self.config.T_diff)], axis=1)
        return np.concatenate([x_t.reshape(B, -1), ctx], axis=1), ctx, (tokens, mask, count)

    def _forward(self, x_t, t, tokens, cache):
        z, ctx, tok_cache = self._inputs(x_t, t, tokens)
        P, A = self.params, self.adapters
        h, c_stem = mlp_forward(P, A, self.stem, z, cache)
        c, c_cond = mlp_forward(P, A, self.cond, ctx, cache)
        c_blocks = []
        for pre, proj, post in self.blocks:
            u, ca = mlp_forward(P, A, pre, h, cache)
            v, cp = mlp_forward(P, A, proj, c, cache)
            r, cb = mlp_forward(P, A, post, u + v, cache)
            h = h + r
            c_blocks.append((ca, cp, cb))
        y, c_head = mlp_forward(P, A, self.head, h, cache)
        return y.reshape(x_t.shape), (c_stem, c_cond, c_blocks, c_head, tok_cache, x_t.shape)

    def eps(self, x_t, t, tokens) -> np.ndarray:
        return self._forward(x_t, t, tokens, cache=False)[0]

    def eps_with_cache(self, x_t, t, tokens):
        return self._forward(x_t, t, tokens, cache=True)

    def backward(self, cache, g_eps) -> dict:
        c_stem, c_cond, c_blocks, c_head, (tokens, mask, count), shape = cache
        P, A = self.params, self.adapters
        grads = {}

        def run(layers, seg_cache, g):
            gs, gx = mlp_backward(P, A, layers, seg_cache, g)
            grads.update(gs)
            return gx

        gh = run(self.head, c_head, np.asarray(g_eps).reshape(shape[0], -1))
        gc = 0.0
        for (pre, proj, post), (ca, cp, cb) in zip(reversed(self.blocks), reversed(c_blocks)):
            guv = run(post, cb, gh)
            gc = gc + run(proj, cp, guv)
            gh = gh + run(pre, ca, guv)
        g_ctx = run(self.cond, c_cond, gc)
        gz = run(self.stem, c_stem, gh)
        if not A:
            e = self.config.emb_dim
            x_dim = self.config.x_dim
            g_pool = gz[:, x_dim:x_dim + e] + g_ctx[:, :e]
            w = mask / count  # (B, L)
            g_emb = np.zeros_like(P["tok_emb"])
            np.add.at(g_emb, tokens, w[..., None] * g_pool[:, None, :])
            grads["tok_emb"] = g_emb
        return grads


# --- guidance and reverse steps -------------------------------------------


def _null_like(tokens) -> np.ndarray:
    return np.tile(np.array(null_tokens().ids, dtype=np.int64), (np.asarray(tokens).shape[0], 1))


def cfg_predict(denoiser, x_t, t, tokens, scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond); both branches in one batch."""
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    tokens = np.asarray(tokens, dtype=np.int64)
    if scale == 1.0:
        return denoiser.eps(x_t, t, tokens)
    if scale == 0.0:
        return denoiser.eps(x_t, t, _null_like(tokens))
    B = x_t.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    e = denoiser.eps(np.concatenate([x_t, x_t]), np.concatenate([tt, tt]),
                     np.concatenate([tokens, _null_like(tokens)]))
    ec, eu = e[:B], e[B:]
    return eu + scale * (ec - eu)


def cfg_predict_with_cache(denoiser: Denoiser, x_t, t, tokens, scale: float):
    """Like cfg_predict but returns a closure mapping dL/d(eps_hat) to grads."""
    B = x_t.shape[0]
    tokens = np.asarray(tokens, dtype=np.int64)
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if scale == 1.0:
        e, cache = denoiser.eps_with_cache(x_t, tt, tokens)
        return e, lambda g: denoiser.backward(cache, g)
    e, cache = denoiser.eps_with_cache(np.concatenate([x_t, x_t]), np.concatenate([tt, tt]),
                                       np.concatenate([tokens, _null_like(tokens)]))
    ec, eu = e[:B], e[B:]
    eps_hat = eu if scale == 0.0 else eu + scale * (ec - eu)

    def back(g):
        return denoiser.backward(cache, np.concatenate([scale * g, (1.0 - scale) * g]))

    return eps_hat, back


@dataclass
class StepDistribution:
    mean: np.ndarray   # (B, T, D)
    sigma: np.ndarray  # (B,)


def _coef(arr, idx, ndim=3):
    return arr[idx].reshape((-1,) + (1,) * (ndim - 1))


def posterior_from_eps(x_t, eps_hat, idx, sched: SamplingSchedule) -> StepDistribution:
    mean = _coef(sched.coef_x, idx) * (x_t - _coef(sched.coef_eps, idx) * eps_hat)
    return StepDistribution(check_finite(mean, "posterior mean"), sched.sigma[idx])


def posterior_params(denoiser, x_t, idx, tokens, scale: float, sched: SamplingSchedule) -> StepDistribution:
    """Reverse-step Gaussian for transition index ``idx`` (scalar or per row)."""
    idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), (x_t.shape[0],))
    eps_hat = cfg_predict(denoiser, x_t, sched.ts[idx], tokens, scale)
    return posterior_from_eps(x_t, eps_hat, idx, sched)


def gaussian_logp(x, mean, sigma) -> np.ndarray:
    """Isotropic Gaussian log-density summed over all but the batch axis."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    n = x[0].size
    z = (x - mean) / sigma.reshape((-1,) + (1,) * (x.ndim - 1))
    return -0.5 * np.sum(z * z, axis=tuple(range(1, x.ndim))) - n * np.log(sigma) - 0.5 * n * LOG_2PI


def step_sample(dist: StepDistribution, rng: np.random.Generator):
    if np.any(dist.sigma <= 0):
        raise ValueError("sigma must be positive")
    noise = rng.standard_normal(dist.mean.shape)
    x_prev = dist.mean + dist.sigma.reshape((-1, 1, 1)) * noise
    return x_prev, gaussian_logp(x_prev, dist.mean, dist.sigma)


@dataclass
class StepRecord:
    t: int
    idx: int
    x_t: np.ndarray
    x_prev: np.ndarray
    logp_old: float


@dataclass
class DiffusionTrajectory:
    tokens: tuple
    steps: list
    x0: np.ndarray
    prompt_id: int = -1
    reward: float | None = None
    advantage: float | None = None


def sample_ancestral(denoiser, tokens, sched: SamplingSchedule, scale: float, rng, record: bool = False,
                     x_T=None, prompt_ids=None):
    """Ancestral sampling for a batch of prompts.

    Returns x0 of shape (B, T, D), or a list of DiffusionTrajectory when
    ``record`` is set.  The noise draws are identical either way.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B = tokens.shape[0]
    x = rng.standard_normal((B, N_FRAMES, N_CHANNELS)) if x_T is None else np.array(x_T, dtype=np.float64)
    steps = [[] for _ in range(B)]
    for i in range(len(sched)):
        dist = posterior_params(denoiser, x, i, tokens, scale, sched)
        x_prev, logp = step_sample(dist, rng)
        if not np.all(np.isfinite(x_prev)):
            raise NumericError(f"non-finite state at t={sched.ts[i]}")
        if record:
            for b in range(B):
                steps[b].append(StepRecord(int(sched.ts[i]), i, x[b], x_prev[b], float(logp[b])))
        x = x_prev
    if not record:
        return x
    ids = range(B) if prompt_ids is None else prompt_ids
    return [DiffusionTrajectory(tuple(int(v) for v in tokens[b]), steps[b], x[b], int(pid))
            for b, pid in zip(range(B), ids)]


def sample_fast(denoiser, tokens, schedule: NoiseSchedule, scale: float, steps: int = 10, rng=None, x_T=None,
                t_end: float = 1.0):
    """Deterministic DPM-Solver++(2M) in data-prediction form.

    Knots are uniform in log-SNR between t=T and ``t_end``; the first interval
    is first order, the final sample is the data prediction at the last knot.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    tokens = np.asarray(tokens, dtype=np.int64)
    B = tokens.shape[0]
    if x_T is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x_T = rng.standard_normal((B, N_FRAMES, N_CHANNELS))
    x = np.array(x_T, dtype=np.float64)
    lam = np.linspace(schedule.log_snr_at(float(schedule.T)), schedule.log_snr_at(t_end), steps + 1)
    knots = schedule.t_from_log_snr(lam)
    knots[0], knots[-1] = float(schedule.T), t_end

    def data_pred(x, t):
        ab = schedule.alpha_bar_at(t)
        e = cfg_predict(denoiser, x, np.full(B, t), tokens, scale)
        return (x - math.sqrt(1.0 - ab) * e) / math.sqrt(ab)

    alpha_ = np.sqrt(schedule.alpha_bar_at(knots))
    sigma_ = np.sqrt(1.0 - schedule.alpha_bar_at(knots))
    d_prev = None
    for i in range(1, steps + 1):
        d = data_pred(x, knots[i - 1])
        h = lam[i] - lam[i - 1]
        if d_prev is None:
            d_eff = d
        else:
            r = (lam[i - 1] - lam[i - 2]) / h
            d_eff = (1.0 + 0.5 / r) * d - (0.5 / r) * d_prev
        x = (sigma_[i] / sigma_[i - 1]) * x - alpha_[i] * np.expm1(-h) * d_eff
        check_finite(x, "fast sampler state")
        d_prev = d
    return check_finite(data_pred(x, knots[-1]), "fast sampler output")


# --- pretraining ------------------------------------------------------------


def forward_noise(x0, t, noise, schedule: NoiseSchedule):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError("t out of range")
    ab = schedule.ab(t).reshape((-1,) + (1,) * (np.ndim(x0) - 1)) if np.ndim(t) else schedule.ab(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def _drop_prompts(tokens, p_uncond, rng):
    tokens = tokens.copy()
    drop = rng.random(tokens.shape[0]) < p_uncond
    tokens[drop] = np.array(null_tokens().ids)
    return tokens


def denoise_loss(denoiser: Denoiser, x0, tokens, schedule, rng, p_uncond=0.0, with_grads=False):
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    noise = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, noise, schedule)
    tok = _drop_prompts(tokens, p_uncond, rng) if p_uncond > 0 else tokens
    if not with_grads:
        return float(np.mean((denoiser.eps(x_t, t, tok) - noise) ** 2))
    eps, cache = denoiser.eps_with_cache(x_t, t, tok)
    diff = eps - noise
    loss = float(np.mean(diff * diff))
    grads = denoiser.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


def pretrain(denoiser: Denoiser, frames, tokens, schedule: NoiseSchedule, iters: int, batch: int, lr: float,
             p_uncond: float = 0.1, seed: int = 0, log=None, grad_clip: float = 1.0):
    """Standard DDPM noise-regression with prompt dropout for guidance."""
    if denoiser.adapters:
        raise ValueError("pretraining expects a model without adapters")
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    n = frames.shape[0]
    for it in range(iters):
        sel = rng.integers(0, n, size=batch)
        # cosine decay to 10% of lr
        lr_it = lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * it / max(iters, 1))))
        loss, grads = denoise_loss(denoiser, frames[sel], tokens[sel], schedule, rng, p_uncond, with_grads=True)
        if not math.isfinite(loss):
            raise NumericError(f"pretraining diverged at iteration {it}")
        clip_grad_norm(grads, grad_clip)
        adam_step(denoiser.params, grads, state, lr_it)
        losses.append(loss)
        if log is not None:
            log(it, loss)
    return losses


def eval_mse(denoiser, frames, tokens, schedule, seed: int = 0, batch: int = 512) -> float:
    rng = np.random.default_rng(seed)
    vals = []
    for s in range(0, frames.shape[0], batch):
        vals.append(denoise_loss(denoiser, frames[s:s + batch], tokens[s:s + batch], schedule, rng) *
                    frames[s:s + batch].shape[0])
    return float(sum(vals) / frames.shape[0])
