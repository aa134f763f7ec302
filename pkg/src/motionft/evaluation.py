"""Metric suite in evaluator-encoder feature space and protocol drivers."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, SamplingSchedule, sample_ancestral, sample_fast
from .synthworld import ALL_SPECS, spec_tokens, stack_frames, stack_tokens

SHRINK = 1e-6


# --- metrics ----------------------------------------------------------------


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    The cross term uses Tr sqrt(S_a^1/2 S_b S_a^1/2), evaluated with symmetric
    eigendecompositions so the result stays real.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    w, V = np.linalg.eigh(cov_a)
    w = _clamp_eigs(w, "covariance")
    sa = (V * np.sqrt(w)) @ V.T
    m = sa @ cov_b @ sa
    ev = _clamp_eigs(np.linalg.eigvalsh(0.5 * (m + m.T)), "cross term")
    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(ev)))
    if fid < 0:
        if fid < -1e-8:
            warnings.warn(f"negative Frechet distance {fid:.3e} clamped to 0")
        fid = 0.0
    return fid


def _clamp_eigs(w, what):
    if np.min(w) < -1e-8 * max(1.0, float(np.max(np.abs(w)))):
        warnings.warn(f"negative eigenvalue {np.min(w):.3e} in {what} clamped to 0")
    return np.maximum(w, 0.0)


def frechet(feats_a, feats_b, shrink: float = SHRINK) -> float:
    feats_a, feats_b = np.asarray(feats_a), np.asarray(feats_b)
    if feats_a.ndim == 1:
        feats_a, feats_b = feats_a[:, None], feats_b[:, None]
    d = feats_a.shape[1]
    if min(len(feats_a), len(feats_b)) < 2:
        raise ValueError("need at least two samples per side")
    eye = shrink * np.eye(d)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False)) + eye
    return frechet_from_moments(feats_a.mean(axis=0), cov_a, feats_b.mean(axis=0), cov_b)


def r_precision(gen_feats, text_feats, pool: int = 32, k=(1, 2, 3), rng=None, distractors=None, labels=None,
                distractor_labels=None, n_shuffles: int = 1):
    """Top-k retrieval accuracy of each sample's own text among ``pool`` candidates.

    Distractors are drawn from ``distractors`` (default: the other rows of
    ``text_feats``), never sharing the sample's label.  Ranking is by
    Euclidean distance; a distractor only outranks the true text when it is
    strictly closer.
    """
    gen_feats, text_feats = np.asarray(gen_feats), np.asarray(text_feats)
    if pool < 2:
        raise ValueError("pool must be >= 2")
    n = len(gen_feats)
    if len(text_feats) != n:
        raise ValueError("gen_feats and text_feats differ in length")
    rng = np.random.default_rng(0) if rng is None else rng
    if distractors is None:
        distractors = text_feats
        labels = np.arange(n) if labels is None else np.asarray(labels)
        distractor_labels = labels
    else:
        distractors = np.asarray(distractors)
        labels = np.full(n, -1) if labels is None else np.asarray(labels)
        distractor_labels = np.arange(len(distractors)) if distractor_labels is None else np.asarray(distractor_labels)
    if pool > n and distractors is text_feats:
        raise ValueError("pool larger than sample count")
    ks = (k,) if np.isscalar(k) else tuple(k)

    true_d = np.linalg.norm(gen_feats - text_feats, axis=1)
    hits = np.zeros(len(ks))
    for _ in range(n_shuffles):
        for i in range(n):
            allowed = np.flatnonzero(distractor_labels != labels[i])
            if len(allowed) < pool - 1:
                raise ValueError("not enough distractors for the requested pool")
            pick = rng.choice(allowed, size=pool - 1, replace=False)
            d = np.linalg.norm(distractors[pick] - gen_feats[i], axis=1)
            rank = 1 + int(np.sum(d < true_d[i]))
            hits += np.array([rank <= kk for kk in ks])
    out = hits / (n * n_shuffles)
    return float(out[0]) if np.isscalar(k) else tuple(float(v) for v in out)


def mm_dist(gen_feats, text_feats) -> float:
    return float(np.mean(np.linalg.norm(np.asarray(gen_feats) - np.asarray(text_feats), axis=1)))


def diversity_pairs(n: int, n_pairs: int, rng):
    if n < 2:
        raise ValueError("need at least two samples")
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return i, j


def diversity(feats, n_pairs: int = 300, rng=None, pairs=None) -> float:
    """Mean distance over random index pairs (i != j)."""
    feats = np.asarray(feats)
    if pairs is None:
        rng = np.random.default_rng(0) if rng is None else rng
        pairs = diversity_pairs(len(feats), n_pairs, rng)
    i, j = pairs
    return float(np.mean(np.linalg.norm(feats[i] - feats[j], axis=1)))


def mmodality_from_feats(feats) -> float:
    """feats: (prompts, repeats, e); mean within-prompt pairwise distance."""
    feats = np.asarray(feats)
    r = feats.shape[1]
    iu, ju = np.triu_indices(r, k=1)
    d = np.linalg.norm(feats[:, iu] - feats[:, ju], axis=-1)
    return float(d.mean())


# --- generation ---------------------------------------------------------------


@dataclass
class EvalConfig:
    sampler: str = "ancestral"
    steps: int = 10
    cfg_scale: float = 2.5
    pool: int = 32
    n_shuffles: int = 1
    diversity_pairs: int = 300
    mm_prompts: int = 12
    mm_repeats: int = 10
    batch: int = 512


def generate(model, tokens, schedule: NoiseSchedule, cfg: EvalConfig, rng, sched: SamplingSchedule | None = None):
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for s in range(0, len(tokens), cfg.batch):
        tok = tokens[s:s + cfg.batch]
        if cfg.sampler == "ancestral":
            from .diffusion import subsample
            out.append(sample_ancestral(model, tok, sched or subsample(schedule, cfg.steps), cfg.cfg_scale, rng))
        elif cfg.sampler == "fast":
            out.append(sample_fast(model, tok, schedule, cfg.cfg_scale, cfg.steps, rng=rng))
        else:
            raise ValueError(f"unknown sampler {cfg.sampler!r}")
    return np.concatenate(out)


def multimodality(model, tokens, evaluator, schedule, cfg: EvalConfig, rng, repeats: int | None = None) -> float:
    repeats = cfg.mm_repeats if repeats is None else repeats
    tokens = np.asarray(tokens, dtype=np.int64)
    rep = np.repeat(tokens, repeats, axis=0)
    x = generate(model, rep, schedule, cfg, rng)
    feats = evaluator.encode_motion(x).reshape(len(tokens), repeats, -1)
    return mmodality_from_feats(feats)


# --- reports ------------------------------------------------------------------


@dataclass
class MetricsReport:
    r_at_1: float
    r_at_2: float
    r_at_3: float
    fid: float
    mm_dist: float
    diversity: float
    mmodality: float
    n_samples: int
    seed: int
    reward: float = 0.0
    gt_r_at_1: float = 0.0
    gt_diversity: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.r_at_1 <= self.r_at_2 <= self.r_at_3 <= 1.0:
            raise ValueError("R@k must be monotone within [0, 1]")
        if self.fid < 0:
            raise ValueError("fid must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def _text_universe(evaluator):
    tok = np.array([spec_tokens(s).ids for s in ALL_SPECS], dtype=np.int64)
    return evaluator.encode_text(tok)


def compute_report(model, records, evaluator, schedule: NoiseSchedule, cfg: EvalConfig, seed: int = 0,
                   motions=None) -> MetricsReport:
    """Full metric report on ``records`` (which must carry ground truth).

    ``motions`` substitutes pre-generated sequences for the model's samples.
    """
    rng = np.random.default_rng(seed)
    tokens = stack_tokens(records)
    gt = stack_frames(records)
    x = generate(model, tokens, schedule, cfg, rng) if motions is None else np.asarray(motions)
    spec_index = {s: i for i, s in enumerate(ALL_SPECS)}
    labels = np.array([spec_index[r.spec] for r in records])
    universe = _text_universe(evaluator)

    gen_f = evaluator.encode_motion(x)
    gt_f = evaluator.encode_motion(gt)
    txt_f = evaluator.encode_text(tokens)
    r1, r2, r3 = r_precision(gen_f, txt_f, cfg.pool, (1, 2, 3), np.random.default_rng(seed + 1), universe,
                             labels, np.arange(len(ALL_SPECS)), cfg.n_shuffles)
    gt_r1 = r_precision(gt_f, txt_f, cfg.pool, 1, np.random.default_rng(seed + 1), universe, labels,
                        np.arange(len(ALL_SPECS)), cfg.n_shuffles)
    pairs = diversity_pairs(len(records), cfg.diversity_pairs, np.random.default_rng(seed + 2))

    if motions is None and cfg.mm_prompts > 0:
        distinct = sorted(set(labels.tolist()))
        pick = np.random.default_rng(seed + 3).permutation(distinct)[:cfg.mm_prompts]
        mm_tok = np.array([spec_tokens(ALL_SPECS[i]).ids for i in sorted(pick)], dtype=np.int64)
        mmod = multimodality(model, mm_tok, evaluator, schedule, cfg, rng)
    else:
        mmod = 0.0
    return MetricsReport(
        r_at_1=r1, r_at_2=r2, r_at_3=r3,
        fid=frechet(gen_f, gt_f),
        mm_dist=mm_dist(gen_f, txt_f),
        diversity=diversity(gen_f, pairs=pairs),
        mmodality=mmod,
        n_samples=len(records),
        seed=seed,
        reward=float(np.mean(np.sum(gen_f * txt_f, axis=1))),
        gt_r_at_1=gt_r1,
        gt_diversity=diversity(gt_f, pairs=pairs),
    )


PROTOCOLS = ("cross-domain", "leave-one-out", "forgetting")


def run_protocol(name: str, pretrained, adapted, splits, evaluator, schedule: NoiseSchedule, cfg: EvalConfig,
                 seed: int = 0):
    """Evaluate both checkpoints on the protocol's eval records.

    ``splits`` is the (pretrain, adapt) pair.  Adaptation protocols score the
    adaptation split's eval records; ``forgetting`` scores the pretraining
    split's eval records.
    """
    if name not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}")
    if pretrained.config != adapted.config:
        raise ValueError("checkpoints were built with different architectures")
    pre_split, adapt_split = splits
    records = pre_split.eval if name == "forgetting" else adapt_split.eval
    if not records:
        raise ValueError("protocol split has no eval records")
    return (compute_report(pretrained, records, evaluator, schedule, cfg, seed),
            compute_report(adapted, records, evaluator, schedule, cfg, seed))
