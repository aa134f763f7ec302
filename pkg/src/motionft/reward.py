"""Text/motion dual encoder trained with symmetric InfoNCE.

Both towers end in L2 normalisation, so the reward (a dot product of the two
embeddings) is a cosine similarity in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nncore import (
    AdamState,
    Linear,
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
from .synthworld import ALL_SPECS, N_CHANNELS, N_FRAMES, PAD_ID, VOCAB


@dataclass
class EncoderConfig:
    width: int = 128
    embed: int = 32
    tok_dim: int = 32
    tau_init: float = 0.07


def _normalize(v):
    n = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    return v / n, n


def _normalize_backward(u, n, g):
    return (g - u * np.sum(u * g, axis=1, keepdims=True)) / n


class DualEncoder:
    def __init__(self, config: EncoderConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.frozen = False
        c = config
        x_dim = N_FRAMES * N_CHANNELS
        self.motion_layers = [
            Linear("motion.in", x_dim, c.width), SiLU(),
            Linear("motion.hidden", c.width, c.width), SiLU(),
            Linear("motion.out", c.width, c.embed),
        ]
        self.text_layers = [
            Linear("text.in", c.tok_dim, c.width), SiLU(),
            Linear("text.out", c.width, c.embed),
        ]

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0) -> "DualEncoder":
        rng = np.random.default_rng(seed)
        params = ParamStore(rng_seed=seed)
        params.add("text.tok_emb", rng.normal(0.0, 1.0, size=(len(VOCAB), config.tok_dim)))
        params.add("log_tau", np.array([math.log(config.tau_init)]))
        enc = cls(config, params)
        mlp_init(enc.motion_layers, params, rng)
        mlp_init(enc.text_layers, params, rng)
        return enc

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"][0]))

    def freeze(self) -> "DualEncoder":
        self.frozen = True
        for v in self.params.entries.values():
            v.flags.writeable = False
        return self

    def checksum(self) -> str:
        return self.params.checksum()

    # towers -----------------------------------------------------------
    def _motion(self, x0, cache=False):
        x = np.asarray(x0, dtype=np.float64).reshape(np.shape(x0)[0], -1)
        v, c = mlp_forward(self.params, None, self.motion_layers, x, cache_out=cache)
        u, n = _normalize(v)
        return check_finite(u, "motion embedding"), (c, u, n)

    def _text(self, tokens, cache=False):
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = (tokens != PAD_ID).astype(np.float64)
        count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = (self.params["text.tok_emb"][tokens] * mask[..., None]).sum(axis=1) / count
        v, c = mlp_forward(self.params, None, self.text_layers, pooled, cache_out=cache)
        u, n = _normalize(v)
        return check_finite(u, "text embedding"), (c, u, n, tokens, mask / count)

    def encode_motion(self, x0) -> np.ndarray:
        return self._motion(x0)[0]

    def encode_text(self, tokens) -> np.ndarray:
        return self._text(tokens)[0]

    # training -----------------------------------------------------------
    def info_nce(self, x0, tokens, with_grads=False):
        """Symmetric in-batch InfoNCE; returns loss (and grads)."""
        um, cm = self._motion(x0, cache=with_grads)
        ut, ct = self._text(tokens, cache=with_grads)
        tau = self.tau
        S = ut @ um.T / tau
        B = S.shape[0]
        lr_t = S - S.max(axis=1, keepdims=True)
        lr_m = S.T - S.T.max(axis=1, keepdims=True)
        ls_t = lr_t - np.log(np.exp(lr_t).sum(axis=1, keepdims=True))
        ls_m = lr_m - np.log(np.exp(lr_m).sum(axis=1, keepdims=True))
        loss = -0.5 * (np.trace(ls_t) + np.trace(ls_m)) / B
        if not with_grads:
            return float(loss)
        eye = np.eye(B)
        dS = 0.5 * ((np.exp(ls_t) - eye) + (np.exp(ls_m) - eye).T) / B
        g_ut = dS @ um / tau
        g_um = dS.T @ ut / tau
        grads = {"log_tau": np.array([-np.sum(dS * S)])}
        c, u, n = cm
        g, _ = mlp_backward(self.params, None, self.motion_layers, c, _normalize_backward(u, n, g_um))
        grads.update(g)
        c, u, n, tok, w = ct
        g, g_pool = mlp_backward(self.params, None, self.text_layers, c, _normalize_backward(u, n, g_ut))
        grads.update(g)
        g_emb = np.zeros_like(self.params["text.tok_emb"])
        np.add.at(g_emb, tok, w[..., None] * g_pool[:, None, :])
        grads["text.tok_emb"] = g_emb
        return float(loss), grads


def reward(enc: DualEncoder, x0, tokens) -> np.ndarray:
    """Cosine similarity between prompt and motion embeddings, per row."""
    r = np.sum(enc.encode_text(tokens) * enc.encode_motion(x0), axis=1)
    return np.clip(r, -1.0, 1.0)


def _spec_index(specs):
    index = {s: i for i, s in enumerate(ALL_SPECS)}
    by_spec = {}
    for j, s in enumerate(specs):
        by_spec.setdefault(index[s], []).append(j)
    return by_spec


def distinct_batch(by_spec, batch, rng):
    """One record from each of ``batch`` distinct prompt specs."""
    keys = sorted(by_spec)
    chosen = rng.choice(len(keys), size=min(batch, len(keys)), replace=False)
    return np.array([by_spec[keys[k]][rng.integers(len(by_spec[keys[k]]))] for k in chosen])


def train_contrastive(enc: DualEncoder, frames, tokens, specs, iters: int = 3000, batch: int = 64,
                      lr: float = 1e-3, seed: int = 0, log=None, grad_clip: float = 5.0,
                      noise_aug: float = 0.06):
    """Batches hold distinct prompt specs so in-batch negatives are true negatives.

    Each motion gets i.i.d. Gaussian jitter with a per-sample std drawn from
    U(0, noise_aug), matching the residual noise left by the final reverse step.
    """
    if enc.frozen:
        raise ValueError("encoder is frozen")
    rng = np.random.default_rng(seed)
    by_spec = _spec_index(specs)
    state = AdamState()
    losses = []
    for it in range(iters):
        sel = distinct_batch(by_spec, batch, rng)
        x = frames[sel]
        if noise_aug > 0:
            x = x + rng.uniform(0.0, noise_aug, size=(len(sel), 1, 1)) * rng.standard_normal(x.shape)
        loss, grads = enc.info_nce(x, tokens[sel], with_grads=True)
        if not math.isfinite(loss):
            raise NumericError(f"contrastive training diverged at iteration {it}")
        clip_grad_norm(grads, grad_clip)
        lr_it = lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * it / max(iters, 1))))
        adam_step(enc.params, grads, state, lr_it)
        enc.params["log_tau"][0] = max(enc.params["log_tau"][0], math.log(0.01))
        losses.append(loss)
        if log is not None:
            log(it, loss)
    return losses


def retrieval_r1(enc: DualEncoder, frames, tokens, specs, pool: int = 32, n_batches: int = 50, seed: int = 0):
    """Mean motion->text top-1 accuracy over batches of ``pool`` distinct specs."""
    rng = np.random.default_rng(seed)
    by_spec = _spec_index(specs)
    um = enc.encode_motion(frames)
    ut = enc.encode_text(tokens)
    hits = []
    for _ in range(n_batches):
        sel = distinct_batch(by_spec, pool, rng)
        S = um[sel] @ ut[sel].T
        hits.append(np.mean(np.argmax(S, axis=1) == np.arange(len(sel))))
    return float(np.mean(hits))


def reward_margin(enc: DualEncoder, frames, tokens, specs, n: int = 500, seed: int = 0) -> float:
    """mean r(matched) - mean r(shuffled prompt), shuffles restricted to other specs."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(frames), size=min(n, len(frames)), replace=False)
    perm = rng.permutation(idx)
    same = np.array([specs[a] == specs[b] for a, b in zip(idx, perm)])
    for k in np.flatnonzero(same):  # re-draw partners that share the spec
        while specs[perm[k]] == specs[idx[k]]:
            perm[k] = rng.choice(len(frames))
    matched = reward(enc, frames[idx], tokens[idx])
    mismatched = reward(enc, frames[idx], tokens[perm])
    return float(matched.mean() - mismatched.mean())


def config_dict(enc: DualEncoder) -> dict:
    return asdict(enc.config)
