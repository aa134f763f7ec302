"""Pipeline stages shared by the command line and the acceptance suite.

Each stage is a pure function of the run config and its upstream artifacts;
file handling lives in :mod:`motionft.cli`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .ddpo import finetune
from .diffusion import Denoiser, DenoiserConfig, eval_mse, make_schedule, pretrain, subsample
from .evaluation import run_protocol
from .reward import DualEncoder, EncoderConfig, retrieval_r1, reward_margin, train_contrastive
from .synthworld import (
    FAMILIES,
    DatasetSplit,
    make_records,
    make_split,
    read_jsonl,
    stack_frames,
    stack_tokens,
    write_jsonl,
)

REWARD_ID_OFFSET = 1_000_000
DATA_FILES = ("pretrain_train", "pretrain_eval", "adapt_train", "adapt_eval", "reward_train", "reward_holdout")


@dataclass
class DataBundle:
    pretrain: DatasetSplit
    adapt: DatasetSplit | None
    reward_train: list
    reward_holdout: list


def build_data(cfg: RunConfig) -> DataBundle:
    d = cfg.data
    pre, adapt = make_split(d.protocol, d.held_out, d.ratio, d.per_spec, seed=cfg.seed)
    # the reward models see their own draw of all families, never the
    # adaptation split's instances
    rng = np.random.default_rng([cfg.seed, 1])
    reward_train = make_records(FAMILIES, d.reward_per_spec, rng, start_id=REWARD_ID_OFFSET)
    holdout = make_records(FAMILIES, d.reward_holdout_per_spec, rng,
                           start_id=REWARD_ID_OFFSET + len(reward_train))
    return DataBundle(pre, adapt, reward_train, holdout)


def write_data(bundle: DataBundle, out_dir) -> dict:
    out_dir = Path(out_dir)
    parts = {
        "pretrain_train": bundle.pretrain.train,
        "pretrain_eval": bundle.pretrain.eval,
        "reward_train": bundle.reward_train,
        "reward_holdout": bundle.reward_holdout,
    }
    if bundle.adapt is not None:
        parts["adapt_train"] = bundle.adapt.train
        parts["adapt_eval"] = bundle.adapt.eval
    for name, recs in parts.items():
        write_jsonl(out_dir / f"{name}.jsonl", recs)
    return {name: len(recs) for name, recs in parts.items()}


def read_data(data_dir) -> DataBundle:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")

    def part(name, required=True):
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            if required:
                raise FileNotFoundError(f"missing dataset file {path}")
            return None
        return read_jsonl(path)

    pre = DatasetSplit("pretrain", part("pretrain_train"), part("pretrain_eval"), "with-motion")
    ad_train = part("adapt_train", required=False)
    adapt = None
    if ad_train is not None:
        adapt = DatasetSplit("adapt", ad_train, part("adapt_eval"), "prompts-only")
    return DataBundle(pre, adapt, part("reward_train"), part("reward_holdout"))


# --- stages --------------------------------------------------------------------------


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    s = cfg.diffusion
    return DenoiserConfig(width=s.width, n_blocks=s.n_blocks, emb_dim=s.emb_dim, t_dim=s.t_dim, T_diff=s.T_diff)


def run_pretrain(cfg: RunConfig, bundle: DataBundle, log=None):
    s = cfg.diffusion
    schedule = make_schedule(s.T_diff, s.schedule)
    model = Denoiser.create(denoiser_config(cfg), seed=cfg.seed)
    train = bundle.pretrain.train
    losses = pretrain(model, stack_frames(train), stack_tokens(train), schedule, s.iters, s.batch, s.lr,
                      p_uncond=s.p_uncond, seed=cfg.seed, log=log, grad_clip=s.grad_clip)
    ev = bundle.pretrain.eval
    mse = eval_mse(model, stack_frames(ev), stack_tokens(ev), schedule, seed=cfg.seed) if ev else float("nan")
    return model, schedule, {"eval_mse": mse, "final_loss": float(np.mean(losses[-100:])) if losses else None}


def _encoder(section, seed):
    return DualEncoder.create(
        EncoderConfig(width=section.width, embed=section.embed, tok_dim=section.tok_dim, tau_init=section.tau_init),
        seed=seed,
    )


def encoder_seed(cfg: RunConfig, section) -> int:
    return 1000 * section.seed_offset + cfg.seed


def train_encoder(cfg: RunConfig, section, bundle: DataBundle, log=None):
    seed = encoder_seed(cfg, section)
    enc = _encoder(section, seed)
    recs = bundle.reward_train
    train_contrastive(enc, stack_frames(recs), stack_tokens(recs), [r.spec for r in recs], iters=section.iters,
                      batch=section.batch, lr=section.lr, seed=seed, log=log, grad_clip=section.grad_clip,
                      noise_aug=section.noise_aug)
    ho = bundle.reward_holdout
    F, K, S = stack_frames(ho), stack_tokens(ho), [r.spec for r in ho]
    metrics = {"r_at_1": retrieval_r1(enc, F, K, S, pool=32, seed=seed),
               "margin": reward_margin(enc, F, K, S, n=500, seed=seed), "tau": enc.tau}
    return enc, metrics


def run_train_reward(cfg: RunConfig, bundle: DataBundle, log=None):
    def tagged(tag):
        return None if log is None else (lambda it, loss: log(tag, it, loss))

    reward_enc, m_r = train_encoder(cfg, cfg.reward.reward, bundle, tagged("reward"))
    evaluator, m_e = train_encoder(cfg, cfg.reward.evaluator, bundle, tagged("evaluator"))
    if reward_enc.checksum() == evaluator.checksum():
        raise ValueError("reward and evaluator encoders must differ")
    return reward_enc, evaluator, {"reward": m_r, "evaluator": m_e}


def run_finetune(cfg: RunConfig, pretrained: Denoiser, schedule, reward_enc: DualEncoder, bundle: DataBundle,
                 on_iteration=None, on_checkpoint=None):
    if bundle.adapt is None:
        raise ValueError("the configured protocol has no adaptation split")
    model = pretrained.clone()
    model.attach_lora(cfg.lora.rank, cfg.lora.alpha, seed=cfg.seed, targets=cfg.lora.targets)
    backbone = model.params.checksum()
    reward_sum = reward_enc.checksum()
    sched = subsample(schedule, cfg.diffusion.rl_steps)
    cb = None if on_checkpoint is None else (lambda it: on_checkpoint(it, model))
    history = finetune(model, reward_enc, bundle.adapt.train, cfg.ddpo, sched, seed=cfg.seed,
                       on_iteration=on_iteration, on_checkpoint=cb)
    if model.params.checksum() != backbone:
        raise RuntimeError("backbone parameters changed during fine-tuning")
    if reward_enc.checksum() != reward_sum:
        raise RuntimeError("reward encoder changed during fine-tuning")
    return model, history


def run_evaluate(cfg: RunConfig, protocol: str, pretrained, adapted, schedule, evaluator, bundle: DataBundle):
    return run_protocol(protocol, pretrained, adapted, (bundle.pretrain, bundle.adapt), evaluator, schedule,
                        cfg.eval, seed=cfg.seed)
