"""The thirteen acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed at the end of the session)
before asserting.  Criteria 8 to 11 share one flagship run, which pretrains
a full-size model and adapts it with five seeds; it dominates the runtime.
"""

import io
import json
import math
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

import flagship
from conftest import TINY, PointDenoiser, record_criterion
from motionft import cli, pipeline
from motionft.config import RunConfig
from motionft.ddpo import DdpoConfig, collect, compute_advantages, ddpo_loss, policy_update
from motionft.diffusion import (
    Denoiser,
    cfg_predict,
    forward_noise,
    make_schedule,
    sample_ancestral,
    sample_fast,
    subsample,
)
from motionft.evaluation import diversity, frechet_from_moments, mm_dist, r_precision
from motionft.reward import DualEncoder, EncoderConfig
from motionft.synthworld import N_CHANNELS, N_FRAMES, NULL_ID, PAD_ID, make_records, stack_tokens
from test_cli import TINY_SETTINGS
from test_ddpo import surrogate_fd_errors

SHAPE = (N_FRAMES, N_CHANNELS)
FLAGSHIP_BUDGET_S = 60 * 60


def _tokens(n, family="line-east"):
    recs = make_records((family,), 4, np.random.default_rng(0))
    return np.resize(stack_tokens(recs), (n, stack_tokens(recs).shape[1]))


@pytest.fixture(scope="module")
def tiny_encoder():
    return DualEncoder.create(EncoderConfig(width=16, embed=8, tok_dim=8), seed=1).freeze()


def test_c01_surrogate_gradient(tiny_encoder):
    normwise, _ = surrogate_fd_errors(tiny_encoder, clip_eps=0.2, h=1e-5)
    ok = record_criterion(1, "DDPO surrogate gradient vs central differences", normwise < 1e-4,
                          f"(relative error {normwise:.2e} < 1e-4)")
    assert ok


def test_c02_forward_moments():
    schedule = make_schedule(50)
    n, worst_mean, worst_var, ok = 10_000, 0.0, 0.0, True
    for t in (1, 20, 50):
        rng = np.random.default_rng(t)
        x0 = rng.uniform(-2, 2, size=SHAPE)
        xt = forward_noise(np.broadcast_to(x0, (n,) + SHAPE), np.full(n, t), rng.standard_normal((n,) + SHAPE),
                           schedule)
        ab = schedule.alpha_bar[t - 1]
        z = np.abs(xt.mean(0) - math.sqrt(ab) * x0) / (math.sqrt(1 - ab) / math.sqrt(n))
        rel = np.abs(xt.var(axis=0).mean(axis=0) / (1 - ab) - 1)
        worst_mean, worst_var = max(worst_mean, z.max()), max(worst_var, rel.max())
        ok &= bool(np.all(z < 4) and np.all(rel < 0.05))
    assert record_criterion(2, "forward-process moments at t in {1, 20, 50}", ok,
                            f"(max mean dev {worst_mean:.2f} sigma, max channel var dev {100 * worst_var:.2f}%)")


def test_c03_on_policy_identity(tiny_encoder):
    model = Denoiser.create(TINY, seed=0)
    model.params["net.out.w"] = np.random.default_rng(100).normal(0, 0.05, size=model.params["net.out.w"].shape)
    model.attach_lora(4, 16.0, seed=0, targets="cond")
    cfg = DdpoConfig(n_prompts=6, replicas=4, update_epochs=2, minibatch=24, clip_eps=1e-4, lr=1e-3)
    prompts = [r.prompt_only() for r in make_records(("spin-right", "wave-limb-a"), 2, np.random.default_rng(0))]
    sched = subsample(make_schedule(50), 10)
    buf = compute_advantages(collect(model, tiny_encoder, prompts, cfg, sched, np.random.default_rng(3)))
    first = policy_update(model, buf, cfg, sched, np.random.default_rng(4))[0]["first_minibatch"]
    ok = first["max_abs_w_minus_1"] == 0.0 and first["loss"] == first["unclipped_loss"]
    assert record_criterion(3, "on-policy identity on the first minibatch", ok,
                            f"(max|w-1| = {first['max_abs_w_minus_1']}, loss == unclipped: "
                            f"{first['loss'] == first['unclipped_loss']})")


def test_c04_clip_arithmetic():
    on_policy = all(ddpo_loss(1.0, a, eps) == -a for eps in (1e-4, 0.2, 5.0) for a in (-2.0, 0.0, 0.7))
    ok = on_policy and ddpo_loss(1.5, 1.0, 0.2) == -1.2 and ddpo_loss(0.5, -1.0, 0.2) == 0.8
    assert record_criterion(4, "clipped-loss examples exact", ok)


def test_c05_lora_neutrality_and_budget():
    cfg = pipeline.denoiser_config(RunConfig())
    model = Denoiser.create(cfg, seed=0)
    rng = np.random.default_rng(0)
    model.params["net.out.w"] = rng.normal(0, 0.05, size=model.params["net.out.w"].shape)
    x, t, tok = rng.normal(size=(4,) + SHAPE), np.array([1, 10, 30, 50]), _tokens(4)
    base = model.eps(x, t, tok)
    ratios, neutral = {}, True
    for targets in ("cond", "all"):
        adapted = model.clone()
        adapted.attach_lora(4, 16.0, seed=1, targets=targets)
        neutral &= bool(np.array_equal(adapted.eps(x, t, tok), base))
        ratios[targets] = adapted.adapters.n_trainable() / model.n_backbone()
    ok = neutral and all(r < 0.05 for r in ratios.values())
    assert record_criterion(5, "LoRA neutrality and trainable budget", ok,
                            f"(bit-identical: {neutral}, budget cond {100 * ratios['cond']:.2f}% "
                            f"all {100 * ratios['all']:.2f}%)")


def test_c06_point_dataset_samplers():
    schedule = make_schedule(50)
    datum = np.random.default_rng(8).normal(size=SHAPE)
    model = PointDenoiser(schedule, datum)
    fast = sample_fast(model, _tokens(64), schedule, 2.5, steps=10, rng=np.random.default_rng(0))
    anc = sample_ancestral(model, _tokens(64), subsample(schedule, 10), 2.5, np.random.default_rng(0))
    rmse_fast = np.sqrt(np.mean((fast - datum) ** 2, axis=(1, 2))).max()
    rmse_anc = np.sqrt(np.mean((anc - datum) ** 2, axis=(1, 2))).max()
    ok = rmse_fast < 1e-2 and rmse_anc < 0.1
    assert record_criterion(6, "10-step samplers on a single-point dataset", ok,
                            f"(fast RMSE {rmse_fast:.1e} < 1e-2, ancestral RMSE {rmse_anc:.3f} < 0.1)")


def test_c07_cfg_identities():
    model = Denoiser.create(TINY, seed=1)
    model.params["net.out.w"] = np.random.default_rng(0).normal(0, 0.1, size=model.params["net.out.w"].shape)
    rng = np.random.default_rng(3)
    x, tok, t = rng.normal(size=(4,) + SHAPE), _tokens(4), np.array([3, 10, 25, 50])
    null = np.tile([NULL_ID] + [PAD_ID] * (tok.shape[1] - 1), (4, 1))
    cond, uncond = model.eps(x, t, tok), model.eps(x, t, null)
    ok = (np.array_equal(cfg_predict(model, x, t, tok, 1.0), cond)
          and np.array_equal(cfg_predict(model, x, t, tok, 0.0), uncond) and not np.allclose(cond, uncond))
    assert record_criterion(7, "guidance scale 1 is conditional, 0 is unconditional", ok)


# --- flagship ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def flagship_run():
    return flagship.run(RunConfig(), progress=print)


@pytest.mark.slow
def test_c08_reward_model_quality(flagship_run):
    cfg = RunConfig().reward
    m = flagship_run["encoders"]
    ok = all(m[k]["r_at_1"] > cfg.min_r_at_1 and m[k]["margin"] >= cfg.min_margin for k in ("reward", "evaluator"))
    detail = ", ".join(f"{k} R@1 {m[k]['r_at_1']:.3f} margin {m[k]['margin']:.3f}" for k in ("reward", "evaluator"))
    assert record_criterion(8, "reward-model retrieval and margin", ok,
                            f"({detail}; need R@1 > {cfg.min_r_at_1}, margin >= {cfg.min_margin})")


def _pairs(run, protocol, key):
    return [(s[protocol][0][key], s[protocol][1][key]) for s in run["seeds"]]


@pytest.mark.slow
def test_c09_flagship_adaptation(flagship_run):
    reward = _pairs(flagship_run, "loo", "reward")
    r1 = _pairs(flagship_run, "loo", "r_at_1")
    fid = _pairs(flagship_run, "loo", "fid")
    both = sum(rp > rb and ap > ab for (rb, rp), (ab, ap) in zip(reward, r1))
    fid_down = sum(post < pre for pre, post in fid)
    runtime = flagship_run["runtime_s"]
    ok = both >= 4 and fid_down >= 3 and runtime <= FLAGSHIP_BUDGET_S
    assert record_criterion(9, "held-out adaptation improves reward, R@1 and FID", ok,
                            f"(reward and R@1 up in {both}/5, FID down in {fid_down}/5, "
                            f"runtime {runtime / 60:.1f} min)")


@pytest.mark.slow
def test_c10_forgetting(flagship_run):
    r1 = _pairs(flagship_run, "forgetting", "r_at_1")
    drop = float(np.mean([pre - post for pre, post in r1]))
    assert record_criterion(10, "pretraining-split R@1 degrades < 2 points", drop < 0.02,
                            f"(mean drop {100 * drop:+.2f} points)")


@pytest.mark.slow
def test_c11_mmodality_direction(flagship_run):
    mm = _pairs(flagship_run, "loo", "mmodality")
    down = sum(post <= pre for pre, post in mm)
    assert record_criterion(11, "adapted MModality not above pretrained", down >= 3, f"({down}/5 seeds)")


# --- metrics and determinism ------------------------------------------------------------


def test_c12_metric_oracles():
    checks = {"fid 1-D": frechet_from_moments(0.0, 1.0, 1.0, 1.0) == 1.0}
    rng = np.random.default_rng(0)
    worst = 0.0
    for d in (1, 3, 8):
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        va, vb = rng.uniform(0.05, 3, d), rng.uniform(0.05, 3, d)
        oracle = sum((a - b) ** 2 + (math.sqrt(p) - math.sqrt(q)) ** 2 for a, b, p, q in zip(mu_a, mu_b, va, vb))
        worst = max(worst, abs(frechet_from_moments(mu_a, np.diag(va), mu_b, np.diag(vb)) - oracle))
    checks["fid diagonal"] = worst < 1e-8
    n = 10_000
    r1 = r_precision(rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), pool=32, k=1, rng=rng)
    checks["R@1 chance"] = abs(r1 - 1 / 32) < 3 * math.sqrt((1 / 32) * (31 / 32) / n)
    g, t = rng.normal(size=(40, 6)), rng.normal(size=(40, 6))
    checks["mm_dist"] = abs(mm_dist(g, t) - sum(math.dist(a, b) for a, b in zip(g, t)) / 40) < 1e-10
    i, j = np.triu_indices(40, k=1)
    naive = sum(math.dist(g[a], g[b]) for a, b in zip(i, j)) / len(i)
    checks["diversity"] = abs(diversity(g, pairs=(i, j)) - naive) < 1e-10
    failed = [k for k, v in checks.items() if not v]
    assert record_criterion(12, "metric oracles", not failed,
                            f"(R@1 on random features {r1:.4f}; failed: {failed or 'none'})")


def _cli(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(list(argv))
    assert code == 0
    return Path(buf.getvalue().strip())


def _rerun_matches(run_dir: Path, command: str, *extra) -> list[str]:
    """Re-run from the echoed config; return the artifacts that differ."""
    again = _cli(command, "--config", str(run_dir / "config.json"), *extra)
    skip = {"outputs.json", "timing.jsonl"}  # run-directory paths and wall-clock
    names = sorted(p.relative_to(run_dir) for p in run_dir.rglob("*") if p.is_file() and p.name not in skip)
    return [str(n) for n in names if (run_dir / n).read_bytes() != (again / n).read_bytes()]


def test_c13_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    base = cli.apply_overrides(cli.from_dict({}), TINY_SETTINGS)
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(base.to_json())

    def with_paths(**paths):
        doc = json.loads(cfg_path.read_text())
        doc["paths"].update({k: str(v) for k, v in paths.items()})
        cfg_path.write_text(json.dumps(doc))
        return str(cfg_path)

    runs = {"gen-data": _cli("gen-data", "--config", str(cfg_path))}
    runs["pretrain"] = _cli("pretrain", "--config", with_paths(data=runs["gen-data"]))
    runs["train-reward"] = _cli("train-reward", "--config", str(cfg_path))
    runs["finetune"] = _cli("finetune", "--config", with_paths(
        denoiser=runs["pretrain"] / "denoiser.dmrl", reward=runs["train-reward"] / "reward.dmrl",
        evaluator=runs["train-reward"] / "evaluator.dmrl"))
    runs["evaluate"] = _cli("evaluate", "--config", with_paths(
        adapted=runs["finetune"] / "adapted.dmrl", curves=runs["finetune"] / "log.jsonl"),
        "--protocol", "leave-one-out")
    runs["generate"] = _cli("generate", "--config", str(cfg_path), "--prompt", "a person walks east")

    extras = {"evaluate": ("--protocol", "leave-one-out"), "generate": ("--prompt", "a person walks east")}
    differing = {cmd: _rerun_matches(d, cmd, *extras.get(cmd, ())) for cmd, d in runs.items()}
    differing = {k: v for k, v in differing.items() if v}
    assert record_criterion(13, "every command re-runs byte-identically from its echoed config", not differing,
                            f"({len(runs)} commands compared; differing: {differing or 'none'})")
