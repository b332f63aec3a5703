"""End-to-end experiment runner driven by a YAML manifest.

Stages run in order::

    gen-data -> pretrain -> sft -> rm -> soups -> rlhf/<cell>... -> scans -> eval -> report

Each stage writes into its own directory under ``out_dir`` together with a
``.stage.json`` stamp holding a content hash of everything the stage
depends on (its config slice, the stamps of upstream stages and
``CODE_FORMAT_VERSION``). A rerun whose hash matches the stamp skips the
stage; any change upstream invalidates everything downstream.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis as an
from . import taskgen as tg
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ArchDescriptor
from .rlhf import ReferenceStrategy, RlhfConfig, kl_hack_monitor, run_rlhf
from .soup import SoupSpec, soup_checkpoint
from .training import (
    LossLog,
    TrainConfig,
    pairwise_accuracy,
    pretrain_base,
    train_reward_model,
    train_sft,
)

CODE_FORMAT_VERSION = 1
STRATEGY_KINDS = ("ppo", "salsa", "salsa-n", "mkl")


class ManifestError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

DEFAULTS: dict = {
    "name": "acceptance",
    "out_dir": "runs/acceptance",
    "task": tg.TaskConfig().to_dict(),
    "arch": ArchDescriptor().to_dict(),
    "seeds": {"data": 0, "base": 0, "sft": [1, 2, 3], "rm": 0, "rlhf": 0, "scan": 0, "eval": 0},
    "data": {
        "corpus_size": 2000,
        "n_sft_prompts": 728,
        "demo_repeats": 3,
        "demo_noise": 0.2,
        "n_rm_prompts": 364,
        "rm_prompt_repeats": 60,
        "rm_min_margin": 1.0,
        "n_rlhf_prompts": 364,
        "n_eval_prompts": 364,
        "heldout_repeats": 4,
    },
    "pretrain": {"learning_rate": 0.1, "batch_size": 16, "epochs": 3, "optimizer": "momentum"},
    "sft": {"learning_rate": 0.1, "batch_size": 16, "epochs": 15, "optimizer": "momentum",
            "lr_schedule": "constant", "init_jitter_scale": 0.01},
    "rm": {"learning_rate": 3e-3, "batch_size": 32, "epochs": 10, "optimizer": "adam",
           "weight_decay": 0.01},
    "rlhf": {"learning_rate": 3e-3, "batch_size": 16, "rollouts_per_prompt": 4,
             "clip_epsilon": 0.2, "inner_epochs": 2, "steps": 100, "temperature": 1.0,
             "baseline": "batch-mean", "optimizer": "adam", "init_from": "ref"},
    "monitor": {"collapse_fraction": 0.5, "window": 10},
    "strategies": [
        {"name": "ppo", "kind": "ppo", "betas": [0.2, 0.01]},
        {"name": "salsa", "kind": "salsa", "alpha": 0.5, "members": [0, 1], "betas": [0.01]},
        {"name": "salsa-1", "kind": "salsa-n", "n": 1, "betas": [0.01]},
        {"name": "salsa-3", "kind": "salsa-n", "n": 3, "betas": [0.01]},
        {"name": "mkl", "kind": "mkl", "members": [0, 1], "betas": [0.01]},
    ],
    "scans": {
        "alphas": [0.0, 0.25, 0.5, 0.75, 1.0],
        "scorers": ["rm", "oracle"],
        "samples_per_prompt": 16,
        "plane": {"extent": 1.5, "density": 6, "scorer": "oracle", "samples_per_prompt": 2},
    },
    "eval": {
        "judge": "oracle",
        "tau": 0.25,
        "samples_per_prompt": 4,
        "distribution_samples_per_prompt": 4,
        "comparisons": [
            ["salsa-b0.01", "ppo-b0.2"],
            ["salsa-3-b0.01", "ppo-b0.2"],
            ["mkl-b0.01", "ppo-b0.2"],
            ["salsa-1-b0.01", "ppo-b0.01"],
            ["salsa-b0.01", "ppo-b0.01"],
            ["salsa-3-b0.01", "ppo-b0.01"],
            ["mkl-b0.01", "ppo-b0.01"],
        ],
    },
}


# sections passed straight to a config constructor, which checks the keys itself
_FLAT = ("task", "arch", "pretrain", "sft", "rm", "rlhf")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        flat = not path and k in _FLAT
        if k not in base and not flat:
            raise ManifestError(f"unknown manifest key {path + k!r}")
        if flat and isinstance(v, dict):
            out[k] = {**base[k], **v}
        elif isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def cell_name(name: str, beta: float) -> str:
    return f"{name}-b{beta:g}"


@dataclass
class ExperimentManifest:
    """Every knob of one experiment; unspecified values take :data:`DEFAULTS`."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentManifest":
        return cls(_merge(DEFAULTS, d or {}))

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        with open(path) as f:
            d = yaml.safe_load(f)
        if d is not None and not isinstance(d, dict):
            raise ManifestError("manifest must be a mapping")
        return cls.from_dict(d)

    def dump(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.raw, f, sort_keys=True)

    def updated(self, **over) -> "ExperimentManifest":
        return ExperimentManifest(_merge(self.raw, over))

    def reseeded(self, seed: int) -> "ExperimentManifest":
        """Derive every seed from one experiment seed (SFT seeds become 100*seed + k)."""
        seeds = {k: seed for k in self.raw["seeds"] if k != "sft"}
        seeds["sft"] = [100 * seed + k + 1 for k in range(len(self.raw["seeds"]["sft"]))]
        return self.updated(seeds=seeds)

    # typed views -----------------------------------------------------------
    def __getitem__(self, key):
        return self.raw[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    @property
    def task(self) -> tg.TaskConfig:
        return tg.TaskConfig(**self.raw["task"])

    @property
    def arch(self) -> ArchDescriptor:
        return ArchDescriptor.from_dict(self.raw["arch"])

    def train_config(self, stage: str, **over) -> TrainConfig:
        return TrainConfig(**{**self.raw[stage], **over})

    def rlhf_config(self, beta: float, seed: int) -> RlhfConfig:
        return RlhfConfig(beta=beta, seed=seed, **self.raw["rlhf"])

    def cells(self) -> list:
        """(cell name, strategy entry, beta) for the strategy x beta grid."""
        return [(cell_name(s["name"], b), s, float(b))
                for s in self.raw["strategies"] for b in s["betas"]]

    def validate(self) -> None:
        r = self.raw
        try:
            task, arch = self.task, self.arch
            for stage in ("pretrain", "sft", "rm"):
                self.train_config(stage)
            RlhfConfig(**r["rlhf"])
        except (TypeError, ValueError) as e:
            raise ManifestError(str(e)) from e
        if task.vocab_size != arch.vocab_size:
            raise ManifestError("task.vocab_size and arch.vocab_size differ")
        n_sft = len(r["seeds"]["sft"])
        if n_sft < 1:
            raise ManifestError("need at least one SFT seed")
        names = set()
        for s in r["strategies"]:
            kind = s.get("kind")
            if kind not in STRATEGY_KINDS:
                raise ManifestError(f"strategy {s.get('name')!r}: kind must be one of {STRATEGY_KINDS}")
            if not s.get("betas"):
                raise ManifestError(f"strategy {s['name']!r} has no betas")
            if any(b < 0 for b in s["betas"]):
                raise ManifestError(f"strategy {s['name']!r}: betas must be non-negative")
            members = s.get("members", [0, 1])
            if kind in ("salsa", "mkl") and (len(members) != 2 or max(members) >= n_sft):
                raise ManifestError(f"strategy {s['name']!r}: members must be two SFT indices < {n_sft}")
            if kind == "salsa-n" and not 1 <= s.get("n", 0) <= n_sft:
                raise ManifestError(f"strategy {s['name']!r}: n must be in [1, {n_sft}]")
            names.add(s["name"])
        if len(names) != len(r["strategies"]):
            raise ManifestError("strategy names must be unique")
        cells = {c for c, _, _ in self.cells()}
        for a, b in r["eval"]["comparisons"]:
            if a not in cells or b not in cells:
                raise ManifestError(f"comparison {a} vs {b} names an unknown cell")
        if "rm" in r["scans"]["scorers"] and n_sft < 2:
            raise ManifestError("line scans need two SFT seeds")


# ---------------------------------------------------------------------------
# stage bookkeeping
# ---------------------------------------------------------------------------

def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PipelineResult:
    out_dir: Path
    computed: list = field(default_factory=list)
    cached: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


class _Runner:
    def __init__(self, manifest: ExperimentManifest, out_dir: Path, log=None):
        self.m = manifest
        self.out = out_dir
        self.keys: dict = {}
        self.result = PipelineResult(out_dir)
        self.log = log or (lambda msg: None)

    def stage(self, name: str, deps: list, config, fn) -> Path:
        key = _digest({"stage": name, "version": CODE_FORMAT_VERSION, "config": config,
                       "deps": [self.keys[d] for d in deps]})
        self.keys[name] = key
        d = self.out / name
        stamp = d / ".stage.json"
        if stamp.exists():
            info = json.loads(stamp.read_text())
            if info.get("key") == key and all((d / f).exists() for f in info.get("files", [])):
                self.result.cached.append(name)
                self.log(f"[cached]   {name}")
                return d
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            fn(d)
        except Exception as e:
            raise StageError(name, e) from e
        files = sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file())
        stamp.write_text(json.dumps({"key": key, "files": files}, indent=1))
        self.result.computed.append(name)
        self.log(f"[computed] {name} ({time.perf_counter() - t0:.1f}s)")
        return d


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def policy_pairs(a, b, prompts, min_margin: float, seed: int,
                 task: tg.TaskConfig = tg.TaskConfig()) -> list:
    """One sample from each policy per prompt, labelled by the oracle (batched sampling)."""
    rep, ya = an.sample_responses(a, prompts, 1, 2 * seed + 1)
    _, yb = an.sample_responses(b, prompts, 1, 2 * seed + 2)
    return tg.label_pairs(rep, ya, yb, min_margin, task)


def reference_for(entry: dict, sfts: list) -> ReferenceStrategy:
    """KL anchor for a strategy entry; the policy itself always starts from ``sfts[0]``."""
    kind = entry["kind"]
    if kind == "ppo":
        return ReferenceStrategy.single(sfts[0])
    if kind == "mkl":
        i, j = entry.get("members", [0, 1])
        return ReferenceStrategy.mkl(sfts[i], sfts[j])
    return _soup_reference(entry, sfts)


def _soup_reference(entry: dict, sfts: list) -> ReferenceStrategy:
    if entry["kind"] == "salsa":
        i, j = entry.get("members", [0, 1])
        alpha = float(entry.get("alpha", 0.5))
        if alpha == 0.5:
            return ReferenceStrategy.soup([sfts[i], sfts[j]])
        return ReferenceStrategy.soup([sfts[i], sfts[j]], [1.0 - alpha, alpha])
    return ReferenceStrategy.soup(sfts[:int(entry["n"])])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_pipeline(manifest: ExperimentManifest, out_dir=None, log=None) -> PipelineResult:
    """Run (or resume) every stage; returns which stages ran and the summary."""
    m = manifest
    out = Path(out_dir) if out_dir is not None else m.out_dir
    out.mkdir(parents=True, exist_ok=True)
    m.dump(out / "manifest.yaml")
    run = _Runner(m, out, log)
    task, arch, seeds, data = m.task, m.arch, m["seeds"], m["data"]
    task_cfg = task.to_dict()

    # -- gen-data -----------------------------------------------------------
    def gen_data(d):
        s = seeds["data"]
        tg.write_sequences(d / "corpus.jsonl", tg.gen_corpus(task, data["corpus_size"], s))
        sft_prompts = tg.gen_prompts(task, data["n_sft_prompts"], s, "sft-train")
        tg.write_demos(d / "demos.jsonl",
                       tg.gen_demos(sft_prompts * data["demo_repeats"], data["demo_noise"], s, task))
        for split, n in (("rm-train", data["n_rm_prompts"]), ("rlhf-train", data["n_rlhf_prompts"]),
                         ("eval", data["n_eval_prompts"])):
            tg.write_prompts(d / f"prompts-{split}.jsonl", tg.gen_prompts(task, n, s, split))

    dd = run.stage("gen-data", [], {"task": task_cfg, "data": data, "seed": seeds["data"]}, gen_data)
    eval_prompts = tg.read_prompts(dd / "prompts-eval.jsonl")

    # -- pretrain -------------------------------------------------------------
    def pretrain(d):
        log = LossLog()
        ck = pretrain_base(arch, tg.read_sequences(dd / "corpus.jsonl"),
                           m.train_config("pretrain"), seeds["base"], log)
        save_checkpoint(d / "base.ckpt", ck)
        log.write_csv(d / "loss.csv")

    pd = run.stage("pretrain", ["gen-data"],
                   {"arch": m["arch"], "train": m["pretrain"], "seed": seeds["base"]}, pretrain)

    # -- sft --------------------------------------------------------------------
    def sft(d):
        base = load_checkpoint(pd / "base.ckpt")
        demos = tg.read_demos(dd / "demos.jsonl")
        for i, s in enumerate(seeds["sft"]):
            log = LossLog()
            ck = train_sft(base, demos, m.train_config("sft", shuffle_seed=s), s, log)
            save_checkpoint(d / f"sft-{i}.ckpt", ck)
            log.write_csv(d / f"loss-{i}.csv")

    sd = run.stage("sft", ["pretrain"], {"train": m["sft"], "seeds": seeds["sft"]}, sft)
    sfts = [load_checkpoint(sd / f"sft-{i}.ckpt") for i in range(len(seeds["sft"]))]

    # -- rm ---------------------------------------------------------------------
    def rm_stage(d):
        rm_prompts = tg.read_prompts(dd / "prompts-rm-train.jsonl") * data["rm_prompt_repeats"]
        other = sfts[1] if len(sfts) > 1 else sfts[0]
        pairs = policy_pairs(sfts[0], other, rm_prompts, data["rm_min_margin"], seeds["rm"], task)
        heldout = policy_pairs(sfts[0], other, eval_prompts * data["heldout_repeats"],
                               data["rm_min_margin"], seeds["rm"] + 7919, task)
        tg.write_pairs(d / "pairs.jsonl", pairs)
        tg.write_pairs(d / "heldout-pairs.jsonl", heldout)
        log = LossLog()
        ck = train_reward_model(sfts[0], pairs, m.train_config("rm"), seeds["rm"], log)
        save_checkpoint(d / "rm.ckpt", ck)
        log.write_csv(d / "loss.csv")
        _write_json(d / "rm.json", {"n_pairs": len(pairs), "n_heldout": len(heldout),
                                    "train_accuracy": pairwise_accuracy(ck, pairs),
                                    "heldout_accuracy": pairwise_accuracy(ck, heldout)})

    rd = run.stage("rm", ["sft", "gen-data"],
                   {"train": m["rm"], "seed": seeds["rm"], "data": data}, rm_stage)
    rm = load_checkpoint(rd / "rm.ckpt")

    # -- soups (materialized references, kept for inspection and the cli) -------
    soup_entries = [s for s in m["strategies"] if s["kind"] in ("salsa", "salsa-n")]

    def soups(d):
        for s in soup_entries:
            ref = _soup_reference(s, sfts)
            ck = soup_checkpoint(SoupSpec(tuple(ref.members), ref.weights))
            save_checkpoint(d / f"{s['name']}.ckpt", ck)

    run.stage("soups", ["sft"], {"strategies": soup_entries}, soups)

    # -- rlhf cells ---------------------------------------------------------------
    rlhf_prompts = tg.read_prompts(dd / "prompts-rlhf-train.jsonl")
    cells = {}
    for cell, entry, beta in m.cells():
        cfg = m.rlhf_config(beta, seeds["rlhf"])

        def rlhf_cell(d, entry=entry, cfg=cfg):
            ref = reference_for(entry, sfts)
            ck, log = run_rlhf(sfts[0], ref, rm, cfg, rlhf_prompts, task,
                               monitor=(m["monitor"]["collapse_fraction"], m["monitor"]["window"]))
            save_checkpoint(d / "policy.ckpt", ck)
            log.write_csv(d / "stats.csv")
            cols = {c: log.column(c) for c in ("mean_reward", "mean_kl", "mean_resp_len",
                                               "mean_oracle", "alarm_flag")}
            w = m["monitor"]["window"]
            tail = slice(-w, None) if len(log) else slice(0, 0)
            verdict = (kl_hack_monitor(log, m["monitor"]["collapse_fraction"], w)
                       if len(log) >= 2 * w else "ok")
            _write_json(d / "run.json", {
                "strategy": entry, "beta": cfg.beta, "steps": len(log),
                "final_mean_reward": _mean(cols["mean_reward"][tail]),
                "final_mean_kl": _mean(cols["mean_kl"][tail]),
                "final_mean_resp_len": _mean(cols["mean_resp_len"][tail]),
                "final_mean_oracle": _mean(cols["mean_oracle"][tail]),
                "alarm_steps": int(cols["alarm_flag"].sum()),
                "monitor": verdict,
            })

        name = f"rlhf/{cell}"
        cd = run.stage(name, ["sft", "rm", "gen-data"],
                       {"strategy": entry, "rlhf": cfg.to_dict(), "monitor": m["monitor"]},
                       rlhf_cell)
        cells[cell] = cd
    policies = {c: load_checkpoint(cd / "policy.ckpt") for c, cd in cells.items()}

    # -- scans ----------------------------------------------------------------------
    sc = m["scans"]

    def scans(d):
        out = {}
        if len(sfts) >= 2:
            for scorer in sc["scorers"]:
                pts = an.scan_line(sfts[0], sfts[1], sc["alphas"], eval_prompts, scorer, rm,
                                   sc["samples_per_prompt"], seeds["scan"], task=task)
                an.write_line_csv(d / f"line-{scorer}.csv", pts)
                an.plot_line_svg(d / f"line-{scorer}.svg", pts, f"SFT interpolation ({scorer})")
                out[f"line_{scorer}"] = [[p.coords[0], p.mean_reward] for p in pts]
        pl = sc.get("plane")
        if pl and len(sfts) >= 3:
            pts = an.scan_plane(sfts[0], sfts[1], sfts[2], pl["extent"], pl["density"],
                                eval_prompts, pl["scorer"], rm, pl["samples_per_prompt"],
                                seeds["scan"], task=task)
            an.write_plane_csv(d / "plane.csv", pts)
            an.plot_plane_svg(d / "plane.svg", pts, f"barycentric scan ({pl['scorer']})")
        _write_json(d / "scans.json", out)

    scd = run.stage("scans", ["sft", "rm", "gen-data"], {"scans": sc, "seed": seeds["scan"]}, scans)

    # -- eval -------------------------------------------------------------------------
    ev = m["eval"]

    def evaluate(d):
        dists = {"sft-0": an.reward_distribution(sfts[0], eval_prompts, "oracle", None,
                                                 ev["distribution_samples_per_prompt"],
                                                 seeds["eval"], task=task)}
        for c, ck in policies.items():
            dists[c] = an.reward_distribution(ck, eval_prompts, "oracle", None,
                                              ev["distribution_samples_per_prompt"],
                                              seeds["eval"], task=task)
        for c, dist in dists.items():
            an.write_distribution_csv(d / f"dist-{c}.csv", dist)
        an.plot_distributions_svg(d / "distributions.svg", dists, "oracle reward on eval prompts")
        reports = [an.evaluate_winrate(policies[a], policies[b], eval_prompts, ev["judge"],
                                       ev["tau"], rm, seeds["eval"],
                                       samples_per_prompt=ev["samples_per_prompt"], task=task,
                                       tag=f"{a} vs {b}")
                   for a, b in ev["comparisons"]]
        an.write_reports_csv(d / "winrates.csv", reports)
        if reports:
            an.plot_reports_svg(d / "winrates.svg", reports, f"judge: {ev['judge']}")
        _write_json(d / "eval.json", {
            "mean_oracle": {c: dist.mean for c, dist in dists.items()},
            "winrates": {r.tag: {"W": r.wins, "L": r.losses, "T": r.ties,
                                 "win_rate": r.win_rate, "adj_win_rate": r.adjusted_win_rate}
                         for r in reports},
        })

    evd = run.stage("eval", ["rm", "scans"] + [f"rlhf/{c}" for c in cells],
                    {"eval": ev, "seed": seeds["eval"]}, evaluate)

    # -- report -------------------------------------------------------------------------
    def report(d):
        summary = {
            "name": m["name"],
            "rm": _read_json(rd / "rm.json"),
            "scans": _read_json(scd / "scans.json"),
            "cells": {c: _read_json(cd / "run.json") for c, cd in cells.items()},
            **_read_json(evd / "eval.json"),
        }
        _write_json(d / "summary.json", summary)
        rows = []
        for c, info in summary["cells"].items():
            rows.append([c, info["strategy"]["kind"], info["beta"], info["steps"],
                         _fmt(info["final_mean_reward"]), _fmt(info["final_mean_kl"]),
                         _fmt(info["final_mean_resp_len"]), info["monitor"],
                         _fmt(summary["mean_oracle"][c])])
        with open(d / "summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["cell", "kind", "beta", "steps", "final_rm_reward", "final_kl",
                        "final_resp_len", "kl_hack_monitor", "eval_oracle_mean"])
            w.writerows(rows)
        reports = [an.WinRateReport(v["W"], v["L"], v["T"], ev["judge"], ev["tau"], tag)
                   for tag, v in summary["winrates"].items()]
        if reports:
            an.plot_reports_svg(d / "summary.svg", reports, m["name"])

    rpd = run.stage("report", ["eval"], {"name": m["name"]}, report)
    run.result.summary = _read_json(rpd / "summary.json")
    return run.result


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else float("nan")


def _fmt(x) -> str:
    return f"{x:.6g}"


def run_experiments(manifest: ExperimentManifest, seeds, out_dir=None, log=None) -> list:
    """Run the manifest once per experiment seed under ``out_dir/seed-<s>``."""
    out = Path(out_dir) if out_dir is not None else manifest.out_dir
    results = []
    for s in seeds:
        if log:
            log(f"== experiment seed {s}")
        results.append(run_pipeline(manifest.reseeded(s), out / f"seed-{s}", log))
    _write_aggregate(out, seeds, results, [f"{a} vs {b}" for a, b in manifest["eval"]["comparisons"]])
    return results


def _write_aggregate(out: Path, seeds, results, tags) -> None:
    with open(out / "aggregate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "rm_heldout_accuracy"] + tags)
        for s, r in zip(seeds, results):
            w.writerow([s, _fmt(r.summary["rm"]["heldout_accuracy"])]
                       + [f"{r.summary['winrates'][t]['adj_win_rate']:.2f}" for t in tags])
