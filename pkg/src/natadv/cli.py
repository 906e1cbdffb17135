"""Command-line workflow: train the human-robot pair, attack, scan, build and export frontiers.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import frontier as fr
from .adversary import AdversaryConfig
from .config import ExperimentConfig
from .env import ConfigError, rollout
from .naturalness import CanonicalDataset, Discriminator, probe_discriminator
from .nn import ContractError, OptimizerError, dump_checkpoint, load_models, model_from_state, parse_checkpoint
from .rigid import (
    AttackJob,
    ScanConfig,
    ScanState,
    attack_run_config,
    calibrate_normalization,
    canonical_fingerprint,
    cooperative_return,
    execute_attack,
    fingerprint,
    rigid_scan,
    scan_complete,
)
from .rl import TAG_EVAL, TrainingError, cooptimize, derive_seed, evaluate, train_personalized
from .robustgt import PopulationSpec, robust_finetune, select_failure_cases
from .runstore import RunRecord, RunStore, RunStoreError, metrics_csv

log = logging.getLogger("natadv")

EVAL_EPISODES = 100


class UsageError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


# ----------------------------------------------------------------------
# Input resolution
# ----------------------------------------------------------------------


def _store(args) -> RunStore:
    return RunStore(args.out)


def _resolve_artifact(spec: str, store: RunStore, name: str) -> Path:
    """A file path, or a run id whose artifact ``name`` is used."""
    p = Path(spec)
    if p.is_file():
        return p.resolve()
    if store.status(spec) == "done":
        rec = store.load(spec, verify=False)
        if name in rec.artifacts:
            store.read_artifact(rec, name)
            return store.artifact_path(spec, name).resolve()
        raise UsageError(f"run {spec} has no {name}")
    raise UsageError(f"{spec!r} is neither a file nor a finished run in {store.root}")


def _load_pair(spec: str, store: RunStore) -> tuple[dict, Path]:
    path = _resolve_artifact(spec, store, "checkpoints/models.npz")
    try:
        models = load_models(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    if "human" not in models:
        raise UsageError(f"checkpoint {path} has no human policy")
    return models, path


def _load_canonical(spec: str, store: RunStore) -> tuple[CanonicalDataset, Path]:
    path = _resolve_artifact(spec, store, "canonical.ndjson")
    try:
        return CanonicalDataset.load(path), path
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read canonical dataset {path}: {exc}") from exc


def _parse_seeds(text: str) -> list[int]:
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError as exc:
        raise UsageError(f"--seeds takes a count or a comma-separated list, got {text!r}") from exc
    if n < 1:
        raise UsageError("--seeds count must be positive")
    return list(range(n))


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------


def cmd_cooptimize(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    run_cfg = {"env": cfg.env.to_dict(), "rl": cfg.coop_ppo.to_dict(), "coop": cfg.section("coop"),
               "canonical": cfg.section("canonical")}
    rec = RunRecord.new("cooptimize", run_cfg, args.seed)
    if store.status(rec.run_id) == "done":
        _emit({"run_id": rec.run_id, "reused": True, **store.load(rec.run_id).summary})
        return 0
    store.begin(rec)
    pair = cooptimize(cfg.env, args.seed, cfg.raw["coop"]["iterations"], cfg.coop_ppo,
                      callback=lambda it, r: log.info("coop iter %d return %.1f success %.2f", it, r["return"],
                                                      r["success"]))
    n = int(cfg.raw["canonical"]["episodes"])
    canonical = CanonicalDataset(rollout(cfg.env, pair.human_policy, pair.robot_policy, n,
                                         derive_seed(args.seed, TAG_EVAL, 1)))
    ev = evaluate(cfg.env, pair.human_policy, pair.robot_policy, EVAL_EPISODES, args.seed)
    rec.status = "done"
    rec.summary = {"success": ev["success"], "return": ev["return"], "canonical_episodes": n}
    store.persist(rec, {
        "checkpoints/models.npz": dump_checkpoint({"human": pair.human_policy.state(),
                                                   "coop_robot": pair.robot_policy.state()}),
        "canonical.ndjson": canonical.dumps().encode(),
        "metrics.csv": metrics_csv(pair.history),
    })
    _emit({"run_id": rec.run_id, **rec.summary})
    return 0


def cmd_train_robot(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    models, path = _load_pair(args.coop, store)
    human = models["human"]
    expert = models.get("coop_robot") if cfg.raw["robot"]["use_expert"] else None
    run_cfg = {"env": cfg.env.to_dict(), "rl": cfg.robot_ppo.to_dict(), "robot": cfg.section("robot"),
               "human": fingerprint(human.state()),
               "expert": None if expert is None else fingerprint(expert.state())}
    rec = RunRecord.new("train_robot", run_cfg, args.seed)
    if store.status(rec.run_id) == "done":
        _emit({"run_id": rec.run_id, "reused": True, **store.load(rec.run_id).summary})
        return 0
    store.begin(rec)
    robot, hist = train_personalized(human, cfg.env, cfg.robot_ppo, expert, seed=args.seed,
                                     iterations=cfg.raw["robot"]["iterations"],
                                     callback=lambda it, r: log.info("robot iter %d return %.1f success %.2f", it,
                                                                     r["return"], r["success"]))
    ev = evaluate(cfg.env, human, robot, EVAL_EPISODES, args.seed)
    n = int(cfg.raw["canonical"]["episodes"])
    canonical = CanonicalDataset(rollout(cfg.env, human, robot, n, derive_seed(args.seed, TAG_EVAL, 1)))
    rec.status = "done"
    rec.summary = {"success": ev["success"], "return": ev["return"], "canonical_episodes": n}
    states = {"human": human.state(), "robot": robot.state()}
    if "coop_robot" in models:
        states["coop_robot"] = models["coop_robot"].state()
    store.persist(rec, {"checkpoints/models.npz": dump_checkpoint(states), "metrics.csv": metrics_csv(hist),
                        "canonical.ndjson": canonical.dumps().encode()})
    _emit({"run_id": rec.run_id, **rec.summary})
    return 0


def _robot_and_human(args, store) -> tuple:
    models, path = _load_pair(args.robot, store)
    if "robot" not in models:
        raise UsageError(f"checkpoint {path} has no robot policy")
    return models["robot"], models["human"], path


def _normalization(cfg, robot, human, canonical, tmpl, seed, store) -> tuple[tuple[float, float], dict]:
    if cfg.normalization is not None:
        return cfg.normalization, {"source": "config"}
    return calibrate_normalization(robot, human, canonical, cfg.env, tmpl, seed, store)


def cmd_attack(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    robot, human, _ = _robot_and_human(args, store)
    canonical, _ = _load_canonical(args.canonical, store)
    tmpl = cfg.adversary_template(metric=args.metric)
    cfg_adv = AdversaryConfig.from_dict({**tmpl.to_dict(), "lam": args.lam, "seed": args.seed})
    norm, cal = _normalization(cfg, robot, human, canonical, tmpl, args.seed, store)
    rec = RunRecord.new("attack", attack_run_config(robot, human, canonical, cfg.env, cfg_adv), cfg_adv.seed)
    if store.status(rec.run_id) in ("done", "failed"):
        summary = store.load(rec.run_id).summary
    else:
        summary, artifacts = execute_attack(AttackJob(robot.state(), human.state(), canonical, cfg.env.to_dict(),
                                                      cfg_adv.to_dict(), norm, rec.run_id))
        rec.status, rec.summary = summary["status"], summary
        store.persist(rec, artifacts or {})
    if summary["status"] != "done":
        print(f"attack failed: {summary['error']}", file=sys.stderr)
        return 1
    out = {"run_id": rec.run_id, "lambda": args.lam, "metric": cfg_adv.metric_kind, **summary,
           "adversarialness": fr.normalize_adversarialness(summary["robot_return"], *norm),
           "normalization": list(norm)}
    _emit(out)
    return 0


def _scan_inputs(args, cfg, store) -> dict:
    scan = dict(cfg.raw["scan"])
    for flag, key in (("lambda_min", "lambda_min"), ("lambda_max", "lambda_max"), ("rounds", "rounds"),
                      ("samples", "samples_per_round"), ("window", "window")):
        v = getattr(args, flag)
        if v is not None:
            scan[key] = v
    if args.seeds is not None:
        scan["seeds"] = _parse_seeds(args.seeds)
    if not args.robot or not args.canonical:
        raise UsageError("scan needs --robot and --canonical (or --resume)")
    robot_path = _resolve_artifact(args.robot, store, "checkpoints/models.npz")
    can_path = _resolve_artifact(args.canonical, store, "canonical.ndjson")
    return {"scan": ScanConfig.from_dict(scan).to_dict(), "metric": args.metric or cfg.raw["adversary"]["metric"],
            "robot_path": str(robot_path), "canonical_path": str(can_path), "config": cfg.raw}


def cmd_scan(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    if args.resume:
        if store.status(args.resume) is None:
            raise UsageError(f"no scan {args.resume!r} in {store.root}")
        old = store.load(args.resume, verify=False)
        if old.kind != "scan":
            raise UsageError(f"run {args.resume} is a {old.kind} run, not a scan")
        inputs = old.config
        cfg = ExperimentConfig.from_dict(inputs["config"])
    else:
        inputs = _scan_inputs(args, cfg, store)
    scan_cfg = ScanConfig.from_dict(inputs["scan"])
    models, _ = _load_pair(inputs["robot_path"], store)
    if "robot" not in models:
        raise UsageError("robot checkpoint has no robot policy")
    robot, human = models["robot"], models["human"]
    canonical, _ = _load_canonical(inputs["canonical_path"], store)
    tmpl = cfg.adversary_template(metric=inputs["metric"])
    rec = RunRecord.new("scan", inputs, scan_cfg.seeds[0])
    status = store.status(rec.run_id)
    if status == "done":
        print(f"scan {rec.run_id} already complete", file=sys.stderr)
        _emit({"run_id": rec.run_id, "reused": True, **store.load(rec.run_id).summary})
        return 0
    if status is None:
        store.begin(rec)
    norm, cal = _normalization(cfg, robot, human, canonical, tmpl, scan_cfg.seeds[0], store)

    def progress(run):
        _emit({"lambda": run.lam, "seed": run.seed, "round": run.round, "status": run.status,
               "naturalness": run.naturalness, "adversarialness": run.adversarialness})
        sys.stdout.flush()

    state = rigid_scan(robot, human, canonical, cfg.env, scan_cfg, tmpl, norm, store=store, jobs=args.jobs,
                       progress=progress, max_new_runs=args.max_runs, calibration=cal)
    if not scan_complete(state):
        print(f"scan {rec.run_id} stopped early; continue with --resume {rec.run_id}", file=sys.stderr)
        return 0
    if not state.points():
        rec.status, rec.summary = "failed", {"error": "every attack run failed"}
        store.persist(rec, {})
        print("scan failed: every attack run failed", file=sys.stderr)
        return 1
    front = state.frontier()
    rec.status = "done"
    rec.summary = {"auc": front.auc, "runs": len(state.runs), "failed_runs": sum(not r.ok for r in state.runs),
                   "normalization": list(norm)}
    store.persist(rec, {"scan_state.json": state.to_json().encode(), "frontier.csv": fr.frontier_csv(front).encode(),
                        "frontier.json": fr.frontier_json(front).encode(),
                        "frontier.svg": fr.frontier_svg(front).encode()})
    _emit({"run_id": rec.run_id, **rec.summary})
    return 0


def _load_scan_state(spec: str, store: RunStore) -> ScanState:
    path = _resolve_artifact(spec, store, "scan_state.json")
    return ScanState.from_json(path.read_text())


def _load_frontier(spec: str, store: RunStore) -> fr.Frontier:
    """A scan id, a frontier.json file or a frontier.csv file."""
    p = Path(spec)
    if p.is_file():
        text = p.read_text()
        if p.suffix == ".csv":
            pts = [pt for pt, _ in fr.read_frontier_csv(text)]
            if not pts:
                raise UsageError(f"{p} lists no runs")
            return fr.build_frontier(pts, (0.0, 1.0))
        try:
            return fr.frontier_from_json(text)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{p} is not a frontier file: {exc}") from exc
    return _load_scan_state(spec, store).frontier()


def cmd_frontier(args, cfg: ExperimentConfig) -> int:
    front = _load_frontier(args.scan, _store(args))
    dest = Path(args.dest) if args.dest else Path(args.out) / "frontier"
    files = fr.write_frontier(front, dest)
    _emit({"auc": front.auc, "pareto_points": len(front.pareto_points), **{k: str(v) for k, v in files.items()}})
    return 0


def cmd_auc(args, cfg: ExperimentConfig) -> int:
    print(repr(_load_frontier(args.scan, _store(args)).auc))
    return 0


def cmd_export(args, cfg: ExperimentConfig) -> int:
    front = _load_frontier(args.scan, _store(args))
    dest = Path(args.dest) if args.dest else Path(args.out) / "export"
    dest.mkdir(parents=True, exist_ok=True)
    writers = {"csv": fr.frontier_csv, "json": fr.frontier_json, "svg": fr.frontier_svg}
    formats = list(writers) if args.format == "all" else [args.format]
    for f in formats:
        (dest / f"frontier.{f}").write_text(writers[f](front))
        print(dest / f"frontier.{f}")
    return 0


def cmd_robust_ft(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    models, _ = _load_pair(args.robot, store)
    if "robot" not in models:
        raise UsageError("robot checkpoint has no robot policy")
    robot, human = models["robot"], models["human"]
    front = _load_frontier(args.frontier, store)
    rob = cfg.section("robust")
    rate = rob["rate"] if args.rate is None else args.rate
    n = rob["n"] if args.n is None else args.n
    ids = select_failure_cases(front, tuple(rob["nat_range"]), n)
    advs = []
    for rid in ids:
        try:
            blob = store.read_artifact(rid, "checkpoints/adversary.npz")
        except RunStoreError as exc:
            raise UsageError(f"adversary run {rid} not readable in {store.root}: {exc}") from exc
        advs.append(model_from_state(parse_checkpoint(blob)["adversary"]))
    if not advs and rate > 0:
        raise UsageError("no failure cases in the naturalness range; nothing to fine-tune against")
    expert = models.get("coop_robot") if rob["use_expert"] else None
    run_cfg = {"env": cfg.env.to_dict(), "rl": cfg.robot_ppo.to_dict(), "robust": {**rob, "rate": rate, "n": n},
               "robot": fingerprint(robot.state()), "human": fingerprint(human.state()), "adversaries": ids}
    rec = RunRecord.new("robust_ft", run_cfg, args.seed)
    if store.status(rec.run_id) == "done":
        _emit({"run_id": rec.run_id, "reused": True, **store.load(rec.run_id).summary})
        return 0
    store.begin(rec)
    new_robot, hist = robust_finetune(robot, PopulationSpec(human, advs, rate), cfg.env, cfg.robot_ppo,
                                      seed=args.seed, iterations=rob["iterations"], expert=expert)
    ev = evaluate(cfg.env, human, new_robot, EVAL_EPISODES, args.seed)
    rec.status, rec.summary = "done", {"base_success": ev["success"], "base_return": ev["return"],
                                       "adversaries": ids}
    states = {"human": human.state(), "robot": new_robot.state()}
    if "coop_robot" in models:
        states["coop_robot"] = models["coop_robot"].state()
    store.persist(rec, {"checkpoints/models.npz": dump_checkpoint(states), "metrics.csv": metrics_csv(hist)})
    _emit({"run_id": rec.run_id, **rec.summary})
    return 0


def cmd_probe_disc(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    path = _resolve_artifact(args.run, store, "checkpoints/adversary.npz")
    entries = parse_checkpoint(path.read_bytes())
    if "metric" not in entries or entries["metric"].get("kind") != "discriminator":
        raise UsageError(f"run {args.run} has no trained discriminator")
    disc = Discriminator.from_state(entries["metric"])
    canonical, _ = _load_canonical(args.canonical, store)
    try:
        levels = [float(x) for x in args.noise.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--noise takes comma-separated numbers, got {args.noise!r}") from exc
    curve = probe_discriminator(disc, canonical, levels, seed=args.seed)
    for lvl, acc in zip(levels, curve):
        print(f"{lvl!r},{acc!r}")
    return 0


def cmd_sanity(args, cfg: ExperimentConfig) -> int:
    store = _store(args)
    robot, human, _ = _robot_and_human(args, store)
    canonical, _ = _load_canonical(args.canonical, store)
    tmpl = cfg.adversary_template(metric=args.metric)
    scan = cfg.scan
    norm, cal = calibrate_normalization(robot, human, canonical, cfg.env, tmpl, args.seed, store)
    coop = cooperative_return(cfg.env, human, robot, tmpl.eval_episodes, tmpl.eval_seed)
    report = {"normalization": list(norm)}
    for name, lam in (("lambda_min", scan.lambda_min), ("lambda_max", scan.lambda_max)):
        c = AdversaryConfig.from_dict({**tmpl.to_dict(), "lam": lam, "seed": args.seed})
        rid = RunRecord.new("attack", attack_run_config(robot, human, canonical, cfg.env, c), c.seed).run_id
        summary, _ = execute_attack(AttackJob(robot.state(), human.state(), canonical, cfg.env.to_dict(),
                                              c.to_dict(), norm, rid))
        if summary["status"] != "done":
            print(f"{name} attack failed: {summary['error']}", file=sys.stderr)
            return 1
        report[name] = {"lambda": lam, "naturalness": summary["naturalness"],
                        "adversarialness": fr.normalize_adversarialness(summary["robot_return"], *norm),
                        "robot_return": summary["robot_return"]}
    lo, hi = report["lambda_min"], report["lambda_max"]
    report["checks"] = {
        "adversarial_at_lambda_min": lo["adversarialness"] >= 0.9,
        "natural_at_lambda_max": hi["naturalness"] >= 0.8,
        "return_kept_at_lambda_max": abs(hi["robot_return"] - coop) <= 0.2 * abs(coop),
    }
    report["cooperative_return"] = coop
    for k, ok in report["checks"].items():
        print(f"{k}: {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    _emit(report)
    return 1 if args.strict and not all(report["checks"].values()) else 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="YAML config file")
    p.add_argument("--preset", choices=["desk", "paper"], default=d("desk"), help="defaults the config builds on")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--jobs", type=int, default=d(1), help="worker processes for scans")
    p.add_argument("--out", default=d("natadv-out"), help="run store root")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natadv", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _common(p, suppress=True)
        p.set_defaults(func=func)
        return p

    add("cooptimize", cmd_cooptimize, "train the synthetic human with a robot and record a reference dataset")
    p = add("train-robot", cmd_train_robot, "train a personalised robot for the frozen human")
    p.add_argument("--coop", required=True, help="cooptimize run id or models checkpoint")
    p = add("attack", cmd_attack, "train one adversarial human")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--metric", choices=["ls_gan", "kl_logistic", "mmd"], default=None)
    p.add_argument("--robot", required=True, help="train-robot run id or models checkpoint")
    p.add_argument("--canonical", required=True, help="train-robot or cooptimize run id, or a canonical .ndjson")
    p = add("scan", cmd_scan, "scan lambda and record every adversary")
    p.add_argument("--robot")
    p.add_argument("--canonical")
    p.add_argument("--lambda-min", type=float)
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--seeds", help="count (0..n-1) or comma-separated list")
    p.add_argument("--metric", choices=["ls_gan", "kl_logistic", "mmd"], default=None)
    p.add_argument("--resume", help="scan id to continue")
    p.add_argument("--max-runs", type=int, default=None, help="stop after this many newly trained runs")
    for name, func, help_ in (("frontier", cmd_frontier, "write frontier.csv/json/svg"),
                              ("auc", cmd_auc, "print the frontier AUC")):
        p = add(name, func, help_)
        p.add_argument("scan", help="scan id, frontier.json or frontier.csv")
        if name == "frontier":
            p.add_argument("--dest")
    p = add("export", cmd_export, "export a frontier in one format")
    p.add_argument("scan")
    p.add_argument("--format", choices=["csv", "json", "svg", "all"], default="all")
    p.add_argument("--dest")
    p = add("robust-ft", cmd_robust_ft, "fine-tune a robot on frontier failure cases")
    p.add_argument("--robot", required=True)
    p.add_argument("--frontier", required=True, help="scan id or frontier.json")
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p = add("probe-disc", cmd_probe_disc, "discriminator accuracy on noised canonical data")
    p.add_argument("--run", required=True, help="attack run id or adversary checkpoint")
    p.add_argument("--canonical", required=True)
    p.add_argument("--noise", default="0,0.5,1,2,4,8")
    p = add("sanity", cmd_sanity, "endpoint attacks at the lambda bounds")
    p.add_argument("--robot", required=True)
    p.add_argument("--canonical", required=True)
    p.add_argument("--metric", choices=["ls_gan", "kl_logistic", "mmd"], default=None)
    p.add_argument("--strict", action="store_true", help="exit 1 when a check fails")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = (ExperimentConfig.load(args.config, args.preset) if args.config
               else ExperimentConfig.from_dict({}, args.preset))
        with warnings.catch_warnings(), threadpool_limits(1), np.errstate(over="raise", invalid="raise"):
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OptimizerError, ContractError, RunStoreError, FloatingPointError, OSError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
