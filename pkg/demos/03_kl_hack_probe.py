"""Push PPO and SALSA at a small KL coefficient for longer and watch for collapse.

A KL penalty that shrinks to zero on an empty response invites the policy to
stop talking. This script trains both strategies at beta 0.01 for more steps
than the pipeline does and prints response length, KL and oracle reward along
the way, plus the length-collapse monitor verdict.
"""
import sys
from pathlib import Path

from souplab import taskgen as tg
from souplab.checkpoint import load_checkpoint
from souplab.pipeline import ExperimentManifest, run_pipeline
from souplab.rlhf import ReferenceStrategy, kl_hack_monitor, run_rlhf

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
m = ExperimentManifest().reseeded(0)
out = Path("runs/demo") / "seed-0"
run_pipeline(m, out)
sfts = [load_checkpoint(out / "sft" / f"sft-{k}.ckpt") for k in range(2)]
rm = load_checkpoint(out / "rm" / "rm.ckpt")
prompts = tg.read_prompts(out / "gen-data" / "prompts-rlhf-train.jsonl")
mon = m["monitor"]

for name, ref in (("ppo", ReferenceStrategy.single(sfts[0])), ("salsa", ReferenceStrategy.soup(sfts))):
    cfg = m.rlhf_config(0.01, 0)
    cfg.steps = steps

    def show(state, name=name):
        if state.step % 50 == 0:
            s = state.log.steps[-1]
            print(f"  {name:5s} step {state.step:4d}  len {s.mean_resp_len:5.2f}  kl {s.mean_kl:7.3f}  "
                  f"rm {s.mean_reward:6.3f}  oracle {s.mean_oracle:6.3f}")

    _, log = run_rlhf(sfts[0], ref, rm, cfg, prompts, m.task,
                      monitor=(mon["collapse_fraction"], mon["window"]), callback=show)
    print(f"{name}: monitor {kl_hack_monitor(log, mon['collapse_fraction'], mon['window'])}\n")
