"""``souplab`` command line.

Every subcommand is a thin wrapper over the library. Stage settings come from
the manifest given by ``--config`` (defaults otherwise). Exit codes: 0 success,
1 usage error, 2 stage failure, 3 corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import analysis as an
from . import taskgen as tg
from .checkpoint import (
    CheckpointVersionError,
    CorruptCheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    ExperimentManifest,
    ManifestError,
    StageError,
    policy_pairs,
    run_experiments,
    run_pipeline,
)
from .rlhf import PPO_BETA, SALSA_BETA, ReferenceStrategy, kl_hack_monitor, run_rlhf
from .soup import LineageError, SoupSpec, soup_checkpoint
from .training import (
    LossLog,
    pairwise_accuracy,
    pretrain_base,
    train_reward_model,
    train_sft,
)

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_CORRUPT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Ctx:
    def __init__(self, args):
        self.args = args
        m = ExperimentManifest.load(args.config) if args.config else ExperimentManifest()
        self.manifest = m.reseeded(args.seed) if args.seed is not None else m
        self.out = Path(args.out) if args.out else Path(".")
        self.out.mkdir(parents=True, exist_ok=True)
        self.task = self.manifest.task
        self.arch = self.manifest.arch

    def say(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg)

    def seed_or(self, key: str) -> int:
        return self.manifest["seeds"][key] if key != "sft" else self.manifest["seeds"]["sft"][0]


def _load(path):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return load_checkpoint(path)


def _need(path) -> Path:
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return Path(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(ctx: _Ctx):
    a, data, s = ctx.args, ctx.manifest["data"], ctx.seed_or("data")
    corpus = tg.gen_corpus(ctx.task, data["corpus_size"], s)
    tg.write_sequences(ctx.out / "corpus.jsonl", corpus)
    sft_prompts = tg.gen_prompts(ctx.task, data["n_sft_prompts"], s, "sft-train")
    demos = tg.gen_demos(sft_prompts * data["demo_repeats"], data["demo_noise"], s, ctx.task)
    tg.write_demos(ctx.out / "demos.jsonl", demos)
    for split, n in (("rm-train", data["n_rm_prompts"]), ("rlhf-train", data["n_rlhf_prompts"]),
                     ("eval", data["n_eval_prompts"])):
        tg.write_prompts(ctx.out / f"prompts-{split}.jsonl", tg.gen_prompts(ctx.task, n, s, split))
    if a.script_pairs:
        prompts = tg.gen_prompts(ctx.task, data["n_rm_prompts"], s, "rm-train")
        pairs = tg.gen_preference_pairs(prompts, tg.script_sampler(0.0, ctx.task),
                                        tg.uniform_sampler(ctx.task, ctx.arch.max_response_len),
                                        data["rm_min_margin"], s, ctx.task)
        tg.write_pairs(ctx.out / "script-pairs.jsonl", pairs)
    ctx.say(f"wrote {len(corpus)} corpus sequences and {len(demos)} demos to {ctx.out}")


def cmd_pretrain(ctx: _Ctx):
    log = LossLog()
    ck = pretrain_base(ctx.arch, tg.read_sequences(_need(ctx.args.corpus)),
                       ctx.manifest.train_config("pretrain"), ctx.seed_or("base"), log)
    save_checkpoint(ctx.out / "base.ckpt", ck)
    log.write_csv(ctx.out / "pretrain-loss.csv")
    ctx.say(f"base {ck.hash[:12]} -> {ctx.out / 'base.ckpt'}")


def cmd_sft(ctx: _Ctx):
    s = ctx.args.sft_seed if ctx.args.sft_seed is not None else ctx.seed_or("sft")
    log = LossLog()
    ck = train_sft(_load(ctx.args.base), tg.read_demos(_need(ctx.args.demos)),
                   ctx.manifest.train_config("sft", shuffle_seed=s), s, log)
    name = ctx.args.name or f"sft-{s}"
    save_checkpoint(ctx.out / f"{name}.ckpt", ck)
    log.write_csv(ctx.out / f"{name}-loss.csv")
    ctx.say(f"sft {ck.hash[:12]} -> {ctx.out / (name + '.ckpt')}")


def cmd_reward(ctx: _Ctx):
    a = ctx.args
    sft = _load(a.sft)
    if a.pairs:
        pairs = tg.read_pairs(_need(a.pairs))
    else:
        if not a.prompts:
            raise UsageError("reward needs --pairs or --prompts")
        other = _load(a.other) if a.other else sft
        prompts = tg.read_prompts(_need(a.prompts)) * ctx.manifest["data"]["rm_prompt_repeats"]
        pairs = policy_pairs(sft, other, prompts, ctx.manifest["data"]["rm_min_margin"],
                             ctx.seed_or("rm"), ctx.task)
        tg.write_pairs(ctx.out / "rm-pairs.jsonl", pairs)
    log = LossLog()
    ck = train_reward_model(sft, pairs, ctx.manifest.train_config("rm"), ctx.seed_or("rm"), log)
    save_checkpoint(ctx.out / "rm.ckpt", ck)
    log.write_csv(ctx.out / "rm-loss.csv")
    msg = f"rm {ck.hash[:12]} trained on {len(pairs)} pairs"
    if a.heldout:
        msg += f"; held-out accuracy {pairwise_accuracy(ck, tg.read_pairs(_need(a.heldout))):.3f}"
    ctx.say(msg)


def cmd_soup(ctx: _Ctx):
    a = ctx.args
    members = [_load(p) for p in a.members]
    spec = SoupSpec.uniform(members) if a.weights is None else SoupSpec(tuple(members), tuple(a.weights))
    ck = soup_checkpoint(spec, allow_mixed_bases=a.allow_mixed_bases)
    save_checkpoint(ctx.out / f"{a.name}.ckpt", ck)
    ctx.say(f"soup {ck.hash[:12]} of {len(members)} members -> {ctx.out / (a.name + '.ckpt')}")


def cmd_rlhf(ctx: _Ctx):
    a = ctx.args
    sft, rm = _load(a.sft), _load(a.rm)
    refs = [_load(p) for p in a.ref] if a.ref else [sft]
    if a.strategy == "ppo":
        reference = ReferenceStrategy.single(refs[0])
    elif a.strategy == "salsa":
        if len(refs) < 2:
            raise UsageError("salsa needs at least two --ref checkpoints")
        reference = ReferenceStrategy.soup(refs)
    else:
        if len(refs) != 2:
            raise UsageError("mkl needs exactly two --ref checkpoints")
        reference = ReferenceStrategy.mkl(*refs)
    beta = a.beta if a.beta is not None else (PPO_BETA if a.strategy == "ppo" else SALSA_BETA)
    cfg = ctx.manifest.rlhf_config(beta, ctx.seed_or("rlhf"))
    if a.steps is not None:
        cfg.steps = a.steps
    mon = ctx.manifest["monitor"]
    ck, log = run_rlhf(sft, reference, rm, cfg, tg.read_prompts(_need(a.prompts)), ctx.task,
                       monitor=(mon["collapse_fraction"], mon["window"]))
    name = a.name or f"{a.strategy}-b{beta:g}"
    save_checkpoint(ctx.out / f"{name}.ckpt", ck)
    log.write_csv(ctx.out / f"{name}-stats.csv")
    verdict = (kl_hack_monitor(log, mon["collapse_fraction"], mon["window"])
               if len(log) >= 2 * mon["window"] else "ok")
    if len(log):
        last = log.steps[-1]
        ctx.say(f"{name}: reward {last.mean_reward:.3f} kl {last.mean_kl:.3f} "
                f"len {last.mean_resp_len:.2f} monitor {verdict}")


def _scorer(ctx: _Ctx):
    a = ctx.args
    if a.scorer == "rm" and not a.rm:
        raise UsageError("--scorer rm requires --rm")
    return a.scorer, (_load(a.rm) if a.rm else None)


def cmd_scan_line(ctx: _Ctx):
    a = ctx.args
    scorer, rm = _scorer(ctx)
    pts = an.scan_line(_load(a.ref), _load(a.other), a.alphas, tg.read_prompts(_need(a.prompts)),
                       scorer, rm, a.samples, ctx.seed_or("scan"), task=ctx.task)
    an.write_line_csv(ctx.out / "line.csv", pts)
    an.plot_line_svg(ctx.out / "line.svg", pts, f"interpolation ({scorer})")
    for p in pts:
        ctx.say(f"alpha {p.coords[0]:+.2f}  mean {p.mean_reward:.4f}  std {p.std_reward:.4f}")


def cmd_scan_plane(ctx: _Ctx):
    a = ctx.args
    scorer, rm = _scorer(ctx)
    m1, m2, m3 = (_load(p) for p in a.models)
    pts = an.scan_plane(m1, m2, m3, a.extent, a.density, tg.read_prompts(_need(a.prompts)),
                        scorer, rm, a.samples, ctx.seed_or("scan"), task=ctx.task)
    an.write_plane_csv(ctx.out / "plane.csv", pts)
    an.plot_plane_svg(ctx.out / "plane.svg", pts, f"barycentric scan ({scorer})")
    best = max(pts, key=lambda p: p.mean_reward)
    ctx.say(f"{len(pts)} points; best {tuple(round(w, 3) for w in best.coords)} "
            f"mean {best.mean_reward:.4f}")


def cmd_dist(ctx: _Ctx):
    a = ctx.args
    scorer, rm = _scorer(ctx)
    d = an.reward_distribution(_load(a.policy), tg.read_prompts(_need(a.prompts)), scorer, rm,
                               a.samples, ctx.seed_or("eval"), greedy=a.greedy, task=ctx.task)
    an.write_distribution_csv(ctx.out / "dist.csv", d)
    an.plot_distributions_svg(ctx.out / "dist.svg", {Path(a.policy).stem: d})
    ctx.say(f"mean {d.mean:.4f} std {d.std:.4f} over {d.rewards.size} generations")


def cmd_eval(ctx: _Ctx):
    a = ctx.args
    rm = _load(a.rm) if a.rm else None
    if a.judge == "rm" and rm is None:
        raise UsageError("--judge rm requires --rm")
    tag = a.tag or f"{Path(a.a).stem} vs {Path(a.b).stem}"
    r = an.evaluate_winrate(_load(a.a), _load(a.b), tg.read_prompts(_need(a.prompts)), a.judge,
                            a.tau, rm, ctx.seed_or("eval"), samples_per_prompt=a.samples,
                            task=ctx.task, tag=tag)
    an.write_reports_csv(ctx.out / "winrate.csv", [r])
    ctx.say(f"{tag}: W {r.wins} L {r.losses} T {r.ties}  "
            f"win {r.win_rate:.2f}%  adjusted {r.adjusted_win_rate:.2f}%")


def cmd_report(ctx: _Ctx):
    root = _need(ctx.args.run)
    summaries = sorted(root.glob("**/report/summary.json"))
    if not summaries:
        raise UsageError(f"no pipeline summaries under {root}")
    for p in summaries:
        s = json.loads(p.read_text())
        ctx.say(f"== {p.parent.parent}  (rm held-out accuracy {s['rm']['heldout_accuracy']:.3f})")
        for tag, w in s["winrates"].items():
            ctx.say(f"  {tag:32s} W {w['W']:5d} L {w['L']:5d} T {w['T']:5d}  "
                    f"adj {w['adj_win_rate']:.2f}")
        for c, info in s["cells"].items():
            ctx.say(f"  {c:16s} kl {info['final_mean_kl']:8.3f} len {info['final_mean_resp_len']:.2f} "
                    f"monitor {info['monitor']}")


def cmd_pipeline(ctx: _Ctx):
    m = ctx.manifest
    out = Path(ctx.args.out) if ctx.args.out else m.out_dir
    log = None if ctx.args.quiet else print
    if ctx.args.seeds:
        base = ExperimentManifest.load(ctx.args.config) if ctx.args.config else ExperimentManifest()
        run_experiments(base, ctx.args.seeds, out, log)
        ctx.say(f"aggregate -> {out / 'aggregate.csv'}")
        return
    r = run_pipeline(m, out, log)
    ctx.say(f"{len(r.computed)} stages computed, {len(r.cached)} cached; "
            f"summary -> {out / 'report' / 'summary.csv'}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = _Parser(add_help=False)
        g.add_argument("--seed", type=int, default=default(None),
                       help="derive all seeds from this one")
        g.add_argument("--config", default=default(None), help="YAML experiment manifest")
        g.add_argument("--out", default=default(None), help="output directory")
        g.add_argument("--quiet", action="store_true", default=default(False))
        return g

    # global flags are accepted before or after the subcommand; the copy on
    # each subcommand suppresses its defaults so it never masks the top level
    p = _Parser(prog="souplab", description="Desk-scale RLHF with model-soup references.",
                parents=[globals_(lambda v: v)])
    common = globals_(lambda v: argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write corpus, demos and prompt splits")
    sp.add_argument("--script-pairs", action="store_true",
                    help="also write scripted-vs-uniform preference pairs")
    sp = add("pretrain", cmd_pretrain, "train the shared base model")
    sp.add_argument("--corpus", required=True)
    sp = add("sft", cmd_sft, "supervised fine-tuning from a base checkpoint")
    sp.add_argument("--base", required=True)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--sft-seed", type=int)
    sp.add_argument("--name")
    sp = add("reward", cmd_reward, "train a Bradley-Terry reward model")
    sp.add_argument("--sft", required=True)
    sp.add_argument("--other", help="second policy for sampling pairs")
    sp.add_argument("--prompts")
    sp.add_argument("--pairs")
    sp.add_argument("--heldout", help="pairs file for held-out accuracy")
    sp = add("soup", cmd_soup, "average checkpoints")
    sp.add_argument("--members", nargs="+", required=True)
    sp.add_argument("--weights", nargs="+", type=float)
    sp.add_argument("--name", default="soup")
    sp.add_argument("--allow-mixed-bases", action="store_true")
    sp = add("rlhf", cmd_rlhf, "KL-penalized policy optimization")
    sp.add_argument("--sft", required=True)
    sp.add_argument("--rm", required=True)
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--strategy", choices=("ppo", "salsa", "mkl"), default="ppo")
    sp.add_argument("--ref", nargs="+", help="reference checkpoint(s); defaults to --sft")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--name")
    for name, fn, help_ in (("scan-line", cmd_scan_line, "reward along the line between two models"),
                            ("scan-plane", cmd_scan_plane, "reward over the plane of three models"),
                            ("dist", cmd_dist, "reward histogram of one policy")):
        sp = add(name, fn, help_)
        sp.add_argument("--prompts", required=True)
        sp.add_argument("--scorer", choices=("oracle", "rm"), default="oracle")
        sp.add_argument("--rm")
        sp.add_argument("--samples", type=int, default=4, help="samples per prompt")
        if name == "scan-line":
            sp.add_argument("--ref", required=True)
            sp.add_argument("--other", required=True)
            sp.add_argument("--alphas", nargs="+", type=float, default=[0, 0.25, 0.5, 0.75, 1])
        elif name == "scan-plane":
            sp.add_argument("--models", nargs=3, required=True)
            sp.add_argument("--extent", type=float, default=1.5)
            sp.add_argument("--density", type=int, default=6)
        else:
            sp.add_argument("--policy", required=True)
            sp.add_argument("--greedy", action="store_true")
    sp = add("eval", cmd_eval, "pairwise win rate of A over B")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--judge", choices=("oracle", "rm"), default="oracle")
    sp.add_argument("--rm")
    sp.add_argument("--tau", type=float, default=0.25)
    sp.add_argument("--samples", type=int, default=1, help="generations per prompt")
    sp.add_argument("--tag")
    sp = add("report", cmd_report, "print the summaries of a pipeline output tree")
    sp.add_argument("--run", required=True)
    sp = add("pipeline", cmd_pipeline, "run every stage from the manifest")
    sp.add_argument("--seeds", nargs="+", type=int, help="one experiment per seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            ctx = _Ctx(args)
            args.fn(ctx)
    except (UsageError, ManifestError) as e:
        print(f"souplab: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptCheckpointError, CheckpointVersionError) as e:
        print(f"souplab: corrupt artifact: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except StageError as e:
        print(f"souplab: {e}", file=sys.stderr)
        if isinstance(e.cause, (CorruptCheckpointError, CheckpointVersionError)):
            return EXIT_CORRUPT
        return EXIT_STAGE
    except (LineageError, ArithmeticError, ValueError) as e:
        print(f"souplab: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
