"""Command line: ``motionft <subcommand> [--config path] [--seed n] [--set key=value ...]``.

Every invocation creates a timestamped directory under ``$MOTIONFT_RUNS``
(default ``./runs``) holding the resolved config, a JSONL log and the
command's artifacts.  Re-running from the echoed config reproduces them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, from_dict, load
from .diffusion import sample_ancestral, sample_fast, subsample
from .evaluation import PROTOCOLS
from .nncore import NumericError
from .svgplot import curve_svg, trajectory_svg
from .synthworld import VocabularyError, stack_tokens, tokenize

RUNS_ENV = "MOTIONFT_RUNS"
log = logging.getLogger("motionft")


class JsonlLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def write(self, obj: dict) -> None:
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def make_run_dir(command: str, seed: int) -> Path:
    root = Path(os.environ.get(RUNS_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{command}-s{seed}"
    run_dir, k = base, 1
    while run_dir.exists():
        k += 1
        run_dir = Path(f"{base}-{k}")
    run_dir.mkdir(parents=True)
    return run_dir


def _require(cfg: RunConfig, key: str) -> Path:
    if key not in cfg.paths:
        raise ConfigError(f"paths.{key} is required for this command")
    path = Path(cfg.paths[key])
    if not path.exists():
        raise FileNotFoundError(f"paths.{key}: {path} does not exist")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# --- commands ------------------------------------------------------------------


def cmd_gen_data(cfg, args, run_dir, jlog):
    bundle = pipeline.build_data(cfg)
    counts = pipeline.write_data(bundle, run_dir)
    jlog.write({"event": "gen-data", "counts": counts})
    return {"data": str(run_dir)}


def cmd_pretrain(cfg, args, run_dir, jlog):
    bundle = pipeline.read_data(_require(cfg, "data"))
    every = max(1, cfg.diffusion.iters // 200)

    def on_loss(it, loss):
        if it % every == 0 or it == cfg.diffusion.iters - 1:
            jlog.write({"iter": it, "loss": loss})

    model, schedule, metrics = pipeline.run_pretrain(cfg, bundle, on_loss)
    ckpt = checkpoint.save_denoiser(run_dir / "denoiser.dmrl", model, schedule, cfg.to_dict())
    _write_json(run_dir / "metrics.json", metrics)
    if not metrics["eval_mse"] < cfg.diffusion.max_eval_mse:
        log.warning("eval MSE %.4f above configured bound %.4f", metrics["eval_mse"], cfg.diffusion.max_eval_mse)
    return {"denoiser": str(ckpt)}


def cmd_train_reward(cfg, args, run_dir, jlog):
    bundle = pipeline.read_data(_require(cfg, "data"))

    def on_loss(tag, it, loss):
        if it % 10 == 0:
            jlog.write({"encoder": tag, "iter": it, "loss": loss})

    reward_enc, evaluator, metrics = pipeline.run_train_reward(cfg, bundle, on_loss)
    r = checkpoint.save_encoder(run_dir / "reward.dmrl", reward_enc, "reward", cfg.to_dict())
    e = checkpoint.save_encoder(run_dir / "evaluator.dmrl", evaluator, "evaluator", cfg.to_dict())
    _write_json(run_dir / "metrics.json", metrics)
    return {"reward": str(r), "evaluator": str(e)}


def cmd_finetune(cfg, args, run_dir, jlog):
    bundle = pipeline.read_data(_require(cfg, "data"))
    model, schedule = checkpoint.load_denoiser(_require(cfg, "denoiser"))
    if model.adapters:
        raise CheckpointError("paths.denoiser must point at a pretrained (adapter-free) checkpoint")
    reward_enc = checkpoint.load_encoder(_require(cfg, "reward"), role="reward")

    def on_ckpt(it, m):
        checkpoint.save_denoiser(run_dir / f"adapted-{it:05d}.dmrl", m, schedule, cfg.to_dict())

    # wall-clock goes to its own file so log.jsonl stays reproducible
    timing = JsonlLog(run_dir / "timing.jsonl")

    def on_iter(entry):
        timing.write({"iter": entry["iter"], "wall_ms": entry["wall_ms"]})
        jlog.write({k: v for k, v in entry.items() if k != "wall_ms"})

    try:
        adapted, history = pipeline.run_finetune(cfg, model, schedule, reward_enc, bundle,
                                                 on_iteration=on_iter, on_checkpoint=on_ckpt)
    finally:
        timing.close()
    ckpt = checkpoint.save_denoiser(run_dir / "adapted.dmrl", adapted, schedule, cfg.to_dict())
    return {"adapted": str(ckpt), "curves": str(run_dir / "log.jsonl")}


def cmd_evaluate(cfg, args, run_dir, jlog):
    protocol = args.protocol
    if protocol != "forgetting" and protocol != cfg.data.protocol:
        raise ConfigError(f"data was built for {cfg.data.protocol!r}, not {protocol!r}")
    bundle = pipeline.read_data(_require(cfg, "data"))
    h_pre = checkpoint.read_header(_require(cfg, "denoiser"))
    h_post = checkpoint.read_header(_require(cfg, "adapted"))
    for key in ("denoiser", "schedule"):
        if h_pre.get("meta", {}).get(key) != h_post.get("meta", {}).get(key):
            raise CheckpointError(f"pretrained and adapted checkpoints disagree on {key} metadata")
    pretrained, schedule = checkpoint.load_denoiser(cfg.paths["denoiser"])
    adapted, _ = checkpoint.load_denoiser(cfg.paths["adapted"])
    evaluator = checkpoint.load_encoder(_require(cfg, "evaluator"), role="evaluator")
    if "reward" in cfg.paths:
        reward_sum = checkpoint.load_encoder(cfg.paths["reward"]).checksum()
        if reward_sum == evaluator.checksum():
            raise CheckpointError("the evaluator must not be the reward encoder")
    pre, post = pipeline.run_evaluate(cfg, protocol, pretrained, adapted, schedule, evaluator, bundle)
    (run_dir / "report_pre.json").write_text(pre.to_json() + "\n")
    (run_dir / "report_post.json").write_text(post.to_json() + "\n")
    jlog.write({"protocol": protocol, "pre": json.loads(pre.to_json()), "post": json.loads(post.to_json())})

    plots = run_dir / "plots"
    plots.mkdir()
    curves = cfg.paths.get("curves")
    if curves and Path(curves).exists():
        shutil.copyfile(curves, run_dir / "curves.jsonl")
        rows = [json.loads(line) for line in Path(curves).read_text().splitlines() if line.strip()]
        if rows:
            plots.joinpath("reward_curve.svg").write_text(curve_svg(
                [r["iter"] for r in rows], [r["mean_reward"] for r in rows], "mean reward during fine-tuning",
                "reward"))
    else:
        (run_dir / "curves.jsonl").write_text("")
    records = bundle.pretrain.eval if protocol == "forgetting" else bundle.adapt.eval
    seen, examples = set(), []
    for r in records:
        if r.spec not in seen:
            seen.add(r.spec)
            examples.append(r)
        if len(examples) == 4:
            break
    tokens = stack_tokens(examples)
    for tag, model in (("pre", pretrained), ("post", adapted)):
        x = _sample(model, tokens, schedule, cfg, cfg.eval.sampler, np.random.default_rng(cfg.seed))
        for i, r in enumerate(examples):
            plots.joinpath(f"{tag}_{i}.svg").write_text(trajectory_svg(x[i], f"{tag}: {r.text}"))
    return {}


def _sample(model, tokens, schedule, cfg, sampler, rng):
    if sampler == "ancestral":
        return sample_ancestral(model, tokens, subsample(schedule, cfg.eval.steps), cfg.eval.cfg_scale, rng)
    return sample_fast(model, tokens, schedule, cfg.eval.cfg_scale, cfg.eval.steps, rng=rng)


def cmd_generate(cfg, args, run_dir, jlog):
    tokens = tokenize(args.prompt)
    key = "adapted" if "adapted" in cfg.paths else "denoiser"
    path = Path(args.checkpoint) if args.checkpoint else _require(cfg, key)
    model, schedule = checkpoint.load_denoiser(path)
    x = _sample(model, np.array([tokens.ids]), schedule, cfg, args.sampler, np.random.default_rng(cfg.seed))[0]
    out = Path(args.out) if args.out else run_dir / "plot.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(trajectory_svg(x, tokens.text))
    _write_json(run_dir / "motion.json", {"prompt": tokens.text, "frames": x.tolist()})
    jlog.write({"prompt": tokens.text, "sampler": args.sampler, "checkpoint": str(path),
                "end_xy": x[-1, :2].tolist()})
    return {"plot": str(out)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-reward": cmd_train_reward,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. ddpo.lr=1e-4 (repeatable)")
        if name == "evaluate":
            p.add_argument("--protocol", required=True, choices=PROTOCOLS)
        if name == "generate":
            p.add_argument("--prompt", required=True)
            p.add_argument("--sampler", choices=("ancestral", "fast"), default="fast")
            p.add_argument("--out", help="SVG output path (default: <run dir>/plot.svg)")
            p.add_argument("--checkpoint", help="denoiser checkpoint (default: paths.adapted or paths.denoiser)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else from_dict({})
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            tokenize(args.prompt)  # fail fast, before creating a run directory
        run_dir = make_run_dir(args.command, cfg.seed)
        (run_dir / "config.json").write_text(cfg.to_json())
        jlog = JsonlLog(run_dir / "log.jsonl")
        try:
            outputs = COMMANDS[args.command](cfg, args, run_dir, jlog)
        finally:
            jlog.close()
        _write_json(run_dir / "outputs.json", outputs)
        print(run_dir)
        return 0
    except VocabularyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, FileNotFoundError, NumericError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
