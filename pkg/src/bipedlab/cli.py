"""Command-line entry point: gait generation, training, evaluation, reports.

Exit codes: 0 success, 1 runtime failure, 2 configuration or I/O error.
Every output file embeds the schema version, config hash, and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation as ev
from . import nets
from .config import (ConfigError, config_hash, load_run_config,
                     make_episode_config, make_ppo_config, make_reward_config,
                     resolve_model_path)
from .env import EnvError, WalkerEnv
from .gaitlib import (GaitLibraryError, build_library, load_library,
                      save_library)
from .model import ModelError, build_model
from .ppo import TrainingDiverged, train
from .rewards import RewardConfigError

CONFIG_ERRORS = (ConfigError, ModelError, EnvError, RewardConfigError,
                 GaitLibraryError, FileNotFoundError)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_gen_gaits(args) -> int:
    model = build_model(resolve_model_path(args.model))
    grid = ([float(v) for v in args.grid.split(",")] if args.grid
            else [round(0.1 * k, 1) for k in range(11)])

    def progress(r):
        if r["ok"]:
            print(f"v*={r['v_star']:.1f}  ok  T_gait={r['t_gait']:.3f} s", flush=True)
        else:
            print(f"v*={r['v_star']:.1f}  INFEASIBLE: {r['error'][:120]}", flush=True)

    lib, results = build_library(model, grid=grid, seed=args.seed,
                                 budget=args.budget, popsize=args.popsize,
                                 workers=args.workers, progress=progress)
    save_library(lib, args.out)
    gaps = [r["v_star"] for r in results if not r["ok"]]
    print(f"saved {len(lib.gaits)}/{len(grid)} gaits to {args.out} "
          f"(seed={args.seed}, budget={args.budget})")
    if gaps:
        print(f"missing grid points: {gaps}")
        return 1
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    model_spec = args.model or doc.get("model")
    library_path = args.library or doc.get("gait_library")
    preset_name = args.preset or doc.get("preset", "gait2")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out_dir = args.out or doc.get("out_dir", "runs/train")

    model = build_model(resolve_model_path(model_spec))
    reward_cfg = make_reward_config(preset_name, doc.get("reward_overrides"))
    episode_cfg = make_episode_config(doc.get("episode"))
    ppo_cfg = make_ppo_config(doc.get("ppo"))
    if args.agents:
        ppo_cfg.agents = args.agents
    iterations = args.iterations or int(doc.get("iterations", 1500))

    library = None
    if library_path:
        library = load_library(library_path, expected_model_hash=model.model_hash)
    # preset/library consistency is validated before any compute
    env = WalkerEnv(model, reward_cfg, episode_cfg, library=library,
                    num_envs=ppo_cfg.agents, seed=seed)
    chash = config_hash({"model": model.model_hash, "preset": preset_name,
                         "reward": doc.get("reward_overrides"),
                         "episode": doc.get("episode"),
                         "ppo": asdict(ppo_cfg), "seed": seed})
    meta = {"model_hash": model.model_hash, "preset": preset_name,
            "config_hash": chash, "seed": seed,
            "library": str(library_path) if library_path else None,
            "model_path": str(resolve_model_path(model_spec))}
    print(f"training preset={preset_name} agents={ppo_cfg.agents} "
          f"iterations={iterations} seed={seed} out={out_dir}")
    res = train(env, ppo_cfg, iterations, seed=seed, out_dir=out_dir, meta=meta)
    print(f"done: {res.iterations_run} iterations, checkpoint at "
          f"{res.checkpoint_path}, log at {res.log_path}")
    return 0


def _load_eval_setup(ckpt_path, model_arg, library_arg):
    params, meta = nets.load_checkpoint(ckpt_path)
    model_spec = model_arg or meta.get("model_path")
    model = build_model(resolve_model_path(model_spec))
    warn = None
    if meta.get("model_hash") and meta["model_hash"] != model.model_hash:
        warn = (f"checkpoint was trained on model {meta['model_hash']}, "
                f"evaluating on {model.model_hash}")
        print(f"warning: {warn}", file=sys.stderr)
    library = None
    lib_path = library_arg or meta.get("library")
    if lib_path:
        library = load_library(lib_path)
        if library.model_hash != model.model_hash:
            warn = (warn or "") + " | gait library model hash differs"
    preset_name = meta.get("preset", "gait3")
    reward_cfg = make_reward_config(preset_name)
    return params, meta, model, library, reward_cfg, preset_name, warn


def _run_suites(params, model, library, reward_cfg, suites, seed, samples):
    out = {}
    if "velocity" in suites:
        env = ev.make_eval_env(model, reward_cfg, library, 1, seed=seed)
        out["velocity"] = ev.velocity_step_test(params, env)
        out["velocity"]["tracking_at_half"] = ev.tracking_error(
            params, ev.make_eval_env(model, reward_cfg, library, 1, seed=seed), 0.5)
    if "push" in suites:
        rates = {}
        for regime in ev.PUSH_REGIMES:
            env = ev.make_eval_env(model, reward_cfg, library, samples, seed=seed)
            r = ev.push_recovery(params, env, regime, samples=samples, seed=seed)
            rates[regime] = {k: r[k] for k in
                             ("recovery_rate", "samples", "seed", "grid")}
        out["push"] = rates
    if "cot" in suites:
        env = ev.make_eval_env(model, reward_cfg, library, 1, seed=seed)
        try:
            out["cot"] = ev.cost_of_transport(params, env)
        except ev.CotFailure as e:
            out["cot"] = {"failed": str(e), **e.partial,
                          "human_cet": ev.HUMAN_CET, "human_cmt": ev.HUMAN_CMT}
    if "transfer" in suites:
        grid = [
            {},  # nominal
            {"mass_scale": 1.1},
            {"mass_scale": 0.9},
            {"friction": 0.4},
            {"friction": 0.1},
            {"gain_scale": 0.85},
            {"noise_vel_std": 0.01, "noise_pos_std": 0.005},
        ]
        out["transfer"] = ev.transfer_check(params, model, reward_cfg, library,
                                            grid, seed=seed,
                                            push_samples=min(samples, 60))
    return out


def cmd_eval(args) -> int:
    suites = (["velocity", "push", "cot", "transfer"] if args.suite == "all"
              else [args.suite])
    os.makedirs(args.out, exist_ok=True)
    if args.compare:
        ckpts = [args.checkpoint] + args.compare
        comparison = {"recovery": {}, "velocity": {}, "cot": {}}
        reports = {}
        for ck in ckpts:
            setup = _load_eval_setup(ck, args.model, args.library)
            params, meta, model, library, reward_cfg, preset_name, warn = setup
            res = _run_suites(params, model, library, reward_cfg,
                              ["velocity", "push", "cot"], args.seed, args.samples)
            reports[preset_name] = res
            comparison["recovery"][preset_name] = {
                reg: res["push"][reg]["recovery_rate"] for reg in ev.PUSH_REGIMES}
            comparison["velocity"][preset_name] = {
                "steady_mean": res["velocity"]["steady_mean"],
                "tracking_failure": res["velocity"]["tracking_failure"]}
            comparison["cot"][preset_name] = {
                "cet": res["cot"].get("cet"), "cmt": res["cot"].get("cmt")}
        comparison["findings"] = _directional_findings(comparison)
        report = ev.build_report(seed=args.seed, suites={"push": {
            p: {reg: {"recovery_rate": comparison["recovery"][p][reg],
                      "samples": args.samples}
                for reg in ev.PUSH_REGIMES} for p in comparison["recovery"]}},
            preset="comparison")
        report["comparison"] = comparison
        report["per_preset"] = reports
        path = os.path.join(args.out, "comparison_report.json")
        ev.write_report(report, path)
        ev.render_plots_data(report, args.out)
        print(f"comparison report written to {path}")
        for f in comparison["findings"]:
            print(" -", f)
        return 0

    setup = _load_eval_setup(args.checkpoint, args.model, args.library)
    params, meta, model, library, reward_cfg, preset_name, warn = setup
    res = _run_suites(params, model, library, reward_cfg, suites,
                      args.seed, args.samples)
    suites_out = {"push": {preset_name: res["push"]}} if "push" in res else {}
    suites_out.update({k: v for k, v in res.items() if k != "push"})
    report = ev.build_report(
        seed=args.seed, checkpoint_hash=_file_hash(args.checkpoint),
        config_hash=meta.get("config_hash", ""), suites=suites_out,
        preset=preset_name,
        notes=[warn] if warn else None)
    path = os.path.join(args.out, "report.json")
    ev.write_report(report, path)
    ev.render_plots_data(report, args.out)
    print(f"report written to {path}")
    return 0


def _directional_findings(comparison: dict) -> list[str]:
    findings = []
    combined = {p: r.get("combined", 0.0)
                for p, r in comparison["recovery"].items()}
    if combined:
        best = max(combined, key=combined.get)
        findings.append(
            f"highest combined push-recovery rate: {best} "
            f"({combined[best]:.2f}); full table {combined}")
    vel = {p: (v["steady_mean"] if v["steady_mean"] is not None else -1.0)
           for p, v in comparison["velocity"].items()}
    if vel:
        worst = min(vel, key=vel.get)
        findings.append(
            f"weakest velocity tracking: {worst} "
            f"(steady-state mean {vel[worst]:.2f} m/s at 1.0 m/s command)")
    cots = {p: c["cet"] for p, c in comparison["cot"].items()
            if c.get("cet") is not None}
    if cots:
        best = min(cots, key=cots.get)
        findings.append(f"lowest energetic cost of transport: {best} "
                        f"({cots[best]:.2f} J/(kg*m); human reference "
                        f"{ev.HUMAN_CET})")
    return findings


def cmd_report(args) -> int:
    report = ev.read_report(args.report)
    written = ev.render_plots_data(report, args.out)
    if args.training_log and os.path.exists(args.training_log):
        import csv as _csv
        with open(args.training_log) as fh:
            rows = list(_csv.DictReader(fh))
        for r in rows:
            for k in r:
                try:
                    r[k] = float(r[k])
                except ValueError:
                    pass
        report["training_log"] = rows
        written += ev.render_plots_data({"suites": {},
                                         "training_log": rows}, args.out)
    print("wrote: " + ", ".join(written) if written else "nothing to render")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="biped-lab",
        description="Planar biped locomotion lab: gait library generation, "
                    "PPO training, and gait benchmarking.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-gaits", help="optimize the reference gait library")
    g.add_argument("--model", default="default")
    g.add_argument("--out", required=True)
    g.add_argument("--budget", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--popsize", type=int, default=16)
    g.add_argument("--grid", default=None,
                   help="comma-separated command velocities (default 0.0..1.0)")
    g.add_argument("--workers", type=int, default=None,
                   help="parallel grid points (default $BIPEDLAB_WORKERS or 1)")
    g.set_defaults(fn=cmd_gen_gaits)

    t = sub.add_parser("train", help="train a control policy with PPO")
    t.add_argument("--config", default=None, help="run-config YAML")
    t.add_argument("--model", default=None)
    t.add_argument("--library", default=None)
    t.add_argument("--preset", default=None, choices=["gait1", "gait2", "gait3"])
    t.add_argument("--agents", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run benchmark suites on a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", default="all",
                   choices=["velocity", "push", "cot", "transfer", "all"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--samples", type=int, default=300)
    e.add_argument("--model", default=None)
    e.add_argument("--library", default=None)
    e.add_argument("--compare", nargs="*", default=None,
                   help="additional checkpoints for a side-by-side table")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="emit figure CSVs from a report file")
    r.add_argument("--report", required=True)
    r.add_argument("--out", default="runs/figures")
    r.add_argument("--training-log", default=None)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ev.EvalError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; partial outputs flushed", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
