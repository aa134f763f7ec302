"""Flagship adaptation experiment shared by the acceptance suite.

One pretraining run (two families held out) and one pair of reward models
are shared by all seeds; each seed draws its own LoRA init, DDPO rollouts
and evaluation noise.  ``python3 tests/flagship.py`` runs it standalone.
"""

from __future__ import annotations

import json
import sys
import time

from motionft import pipeline
from motionft.config import RunConfig, apply_overrides

SEEDS = (0, 1, 2, 3, 4)


def run(cfg: RunConfig | None = None, seeds=SEEDS, progress=None):
    say = progress or (lambda msg: None)
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    bundle = pipeline.build_data(cfg)
    model, schedule, pre_metrics = pipeline.run_pretrain(cfg, bundle)
    say(f"pretrain done {time.perf_counter() - t0:.0f}s {pre_metrics}")
    reward_enc, evaluator, enc_metrics = pipeline.run_train_reward(cfg, bundle)
    say(f"reward models done {time.perf_counter() - t0:.0f}s {enc_metrics}")
    per_seed = []
    for seed in seeds:
        scfg = apply_overrides(cfg, [f"seed={seed}"])
        adapted, history = pipeline.run_finetune(scfg, model, schedule, reward_enc, bundle)
        loo = pipeline.run_evaluate(scfg, "leave-one-out", model, adapted, schedule, evaluator, bundle)
        fgt = pipeline.run_evaluate(scfg, "forgetting", model, adapted, schedule, evaluator, bundle)
        row = {"seed": seed,
               "loo": [json.loads(r.to_json()) for r in loo],
               "forgetting": [json.loads(r.to_json()) for r in fgt],
               "final_reward": history[-1]["mean_reward"] if history else None}
        per_seed.append(row)
        say(f"seed {seed} done {time.perf_counter() - t0:.0f}s "
            f"loo r1 {loo[0].r_at_1:.3f}->{loo[1].r_at_1:.3f} reward {loo[0].reward:.3f}->{loo[1].reward:.3f} "
            f"fid {loo[0].fid:.3f}->{loo[1].fid:.3f} mmod {loo[0].mmodality:.3f}->{loo[1].mmodality:.3f} "
            f"fgt r1 {fgt[0].r_at_1:.3f}->{fgt[1].r_at_1:.3f}")
    return {"pretrain": pre_metrics, "encoders": enc_metrics, "seeds": per_seed,
            "runtime_s": time.perf_counter() - t0}


if __name__ == "__main__":
    out = run(progress=lambda m: print(m, flush=True))
    json.dump(out, open(sys.argv[1] if len(sys.argv) > 1 else "flagship.json", "w"), indent=2)
    print("runtime", out["runtime_s"])
