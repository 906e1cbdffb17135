"""Iterative log-space lambda scan with largest-jump refinement.

Each seed keeps its own history: every round samples ``samples_per_round``
lambdas evenly in log space between the seed's current bounds, trains one
adversary per lambda and then narrows the bounds to the pair of lambdas
that straddles the largest (window-smoothed) jump in naturalness.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .adversary import AdversaryConfig, train_adversary
from .env import ConfigError, CursorAssistConfig, mean_return, rollout
from .frontier import Frontier, FrontierPoint, build_frontier, normalize_adversarialness
from .naturalness import CanonicalDataset
from .nn import ContractError, GaussianPolicy, OptimizerError, dump_checkpoint
from .rl import TAG_EVAL, TrainingError, derive_seed
from .runstore import RunRecord, RunStore, metrics_csv, sha256, trajectories_ndjson

log = logging.getLogger(__name__)


@dataclass
class ScanConfig:
    lambda_min: float = 1e-5
    lambda_max: float = 10.0
    rounds: int = 3
    samples_per_round: int = 6
    seeds: tuple[int, ...] = (0, 1, 2)
    window: int = 3

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)

    def validate(self) -> "ScanConfig":
        if not (0.0 < self.lambda_min < self.lambda_max and math.isfinite(self.lambda_max)):
            raise ConfigError("need 0 < lambda_min < lambda_max")
        if self.rounds < 1 or self.samples_per_round < 1 or self.window < 1:
            raise ConfigError("rounds, samples_per_round and window must be >= 1")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a nonempty list of distinct integers")
        return self

    @property
    def total_runs(self) -> int:
        return self.rounds * self.samples_per_round * len(self.seeds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "ScanConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scan keys: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad scan config: {exc}") from exc


def log_space_grid(lo: float, hi: float, k: int) -> np.ndarray:
    """``k`` values with evenly spaced logarithms from ``lo`` to ``hi`` (both included when k >= 2)."""
    if lo <= 0 or hi <= 0:
        raise ContractError("log-space grid needs positive bounds")
    if hi < lo:
        raise ContractError("grid bounds must satisfy lo <= hi")
    if k < 1:
        raise ContractError("k must be >= 1")
    if k == 1 or lo == hi:
        return np.full(k, float(lo))
    out = np.clip(np.exp(np.linspace(math.log(lo), math.log(hi), k)), lo, hi)
    out[0], out[-1] = lo, hi
    return out


def jump_gaps(nat_scores: Sequence[float], window: int) -> np.ndarray:
    """Envelope gap at every boundary of an already lambda-sorted sequence.

    Boundary ``i`` sits between entries ``i`` and ``i + 1``.  Its low anchor is
    the minimum of the ``window`` entries ending at ``i``, its high anchor the
    maximum of the ``window`` entries starting at ``i + 1``; a single noisy dip
    therefore cannot fake a jump.
    """
    s = np.asarray(nat_scores, dtype=np.float64)
    n = len(s)
    gaps = np.empty(n - 1)
    for i in range(n - 1):
        low = s[max(0, i - window + 1) : i + 1].min()
        high = s[i + 1 : i + 1 + window].max()
        gaps[i] = high - low
    return gaps


def largest_jump(nat_scores: Sequence[float], lambdas: Sequence[float], window: int = 3) -> tuple[float, float]:
    """The adjacent lambda pair (after sorting by lambda) around the largest naturalness jump.

    Ties go to the smallest boundary index, so a flat sequence yields the
    first pair.
    """
    if len(nat_scores) != len(lambdas):
        raise ContractError("naturalness scores and lambdas must pair up")
    if len(lambdas) < 2:
        raise ContractError("largest_jump needs at least two points")
    if window < 1:
        raise ContractError("window must be >= 1")
    order = sorted(range(len(lambdas)), key=lambda i: lambdas[i])
    lam = [float(lambdas[i]) for i in order]
    nat = [float(nat_scores[i]) for i in order]
    i = int(np.argmax(jump_gaps(nat, window)))
    return lam[i], lam[i + 1]


# ----------------------------------------------------------------------
# Scan state
# ----------------------------------------------------------------------


@dataclass
class ScanRun:
    seed: int
    round: int
    index: int
    lam: float
    run_id: str
    status: str = "pending"
    naturalness: float | None = None
    adversarialness: float | None = None
    robot_return: float | None = None
    robot_success: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "done"


@dataclass
class ScanState:
    config: ScanConfig
    normalization: tuple[float, float]
    runs: list[ScanRun] = field(default_factory=list)
    bounds: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)

    def seed_runs(self, seed: int, ok_only: bool = True) -> list[ScanRun]:
        return [r for r in self.runs if r.seed == seed and (r.ok or not ok_only)]

    def current_bounds(self, seed: int) -> tuple[float, float]:
        return self.bounds[seed][-1]

    @property
    def lambdas_all(self) -> list[float]:
        return [r.lam for r in self.runs if r.ok]

    @property
    def nat_scores(self) -> list[float]:
        return [r.naturalness for r in self.runs if r.ok]

    @property
    def adv_scores(self) -> list[float]:
        return [r.adversarialness for r in self.runs if r.ok]

    @property
    def run_ids(self) -> list[str]:
        return [r.run_id for r in self.runs]

    def points(self) -> list[FrontierPoint]:
        return [FrontierPoint(lam=r.lam, naturalness=r.naturalness, adversarialness=r.adversarialness,
                              run_id=r.run_id, seed=r.seed) for r in self.runs if r.ok]

    def frontier(self) -> Frontier:
        return build_frontier(self.points(), self.normalization, meta={"scan": self.config.to_dict()})

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "normalization": list(self.normalization),
            "runs": [asdict(r) for r in self.runs],
            "bounds": {str(k): [list(b) for b in v] for k, v in sorted(self.bounds.items())},
            "calibration": self.calibration,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScanState":
        doc = json.loads(text)
        return cls(
            config=ScanConfig.from_dict(doc["config"]),
            normalization=tuple(doc["normalization"]),
            runs=[ScanRun(**r) for r in doc["runs"]],
            bounds={int(k): [tuple(b) for b in v] for k, v in doc["bounds"].items()},
            calibration=doc.get("calibration", {}),
        )


# ----------------------------------------------------------------------
# Attack jobs
# ----------------------------------------------------------------------


@dataclass
class AttackJob:
    """Everything one adversary run needs; picklable so it can cross process boundaries."""

    robot_state: dict
    human_state: dict
    canonical: CanonicalDataset
    env: dict
    adversary: dict
    normalization: tuple[float, float]
    run_id: str


def fingerprint(*states: dict) -> str:
    return sha256(dump_checkpoint({str(i): s for i, s in enumerate(states)}))[:16]


def canonical_fingerprint(canonical: CanonicalDataset) -> str:
    return sha256(trajectories_ndjson(canonical.trajectories))[:16]


def attack_run_config(robot: GaussianPolicy, human: GaussianPolicy, canonical: CanonicalDataset,
                      env_config: CursorAssistConfig, adv_config: AdversaryConfig) -> dict:
    """Config snapshot of an attack run; its hash is the run id."""
    return {
        "robot": fingerprint(robot.state()),
        "human": fingerprint(human.state()),
        "canonical": canonical_fingerprint(canonical),
        "env": env_config.to_dict(),
        "adversary": adv_config.to_dict(),
    }


def execute_attack(job: AttackJob) -> tuple[dict, dict[str, bytes] | None]:
    """Run one adversary; failures become a summary with an error instead of an exception."""
    from .nn import model_from_state

    with threadpool_limits(1):
        try:
            cfg = AdversaryConfig.from_dict(job.adversary)
            res = train_adversary(model_from_state(job.robot_state), model_from_state(job.human_state),
                                  job.canonical, CursorAssistConfig.from_dict(job.env), cfg,
                                  normalization=job.normalization)
        except (TrainingError, OptimizerError, FloatingPointError, ContractError) as exc:
            return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}, None
    summary = {"status": "done", **res.summary()}
    entries = {"adversary": res.policy.state()}
    if hasattr(res.metric, "state"):
        entries["metric"] = res.metric.state()
    artifacts = {
        "checkpoints/adversary.npz": dump_checkpoint(entries),
        "trajectories.ndjson": trajectories_ndjson(res.eval_trajectories),
        "metrics.csv": metrics_csv(res.curves),
    }
    return summary, artifacts


def _run_jobs(jobs: list[AttackJob], n_workers: int, on_result: Callable[[AttackJob, dict, dict | None], None]) -> None:
    if n_workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            on_result(job, *execute_attack(job))
        return
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
        futures = {pool.submit(execute_attack, job): job for job in jobs}
        for fut in as_completed(futures):
            on_result(futures[fut], *fut.result())


# ----------------------------------------------------------------------
# Calibration and the scan itself
# ----------------------------------------------------------------------


def cooperative_return(env_config: CursorAssistConfig, human: GaussianPolicy, robot: GaussianPolicy,
                       n_episodes: int, eval_seed: int) -> float:
    """Mean return of the unmodified pair on the adversary evaluation episodes."""
    return mean_return(rollout(env_config, human, robot, n_episodes, derive_seed(eval_seed, TAG_EVAL, 7)))


def calibrate_normalization(robot, human, canonical, env_config, adv_template: AdversaryConfig, seed: int,
                            store: RunStore | None = None) -> tuple[tuple[float, float], dict]:
    """(lo, hi) = (-cooperative return, -return against a lambda = 0 adversary)."""
    coop = cooperative_return(env_config, human, robot, adv_template.eval_episodes, adv_template.eval_seed)
    cfg = AdversaryConfig.from_dict({**adv_template.to_dict(), "lam": 0.0, "seed": int(seed)})
    run_cfg = attack_run_config(robot, human, canonical, env_config, cfg)
    record = RunRecord.new("attack", run_cfg, cfg.seed)
    summary = _stored_summary(store, record.run_id)
    if summary is None:
        job = AttackJob(robot.state(), human.state(), canonical, env_config.to_dict(), cfg.to_dict(),
                        (-coop, -coop + 1.0), record.run_id)
        summary, artifacts = execute_attack(job)
        if summary["status"] != "done":
            raise TrainingError(f"calibration attack failed: {summary['error']}")
        if store is not None:
            record.status, record.summary = "done", summary
            store.persist(record, artifacts)
    lo, hi = -coop, -summary["robot_return"]
    if not hi > lo:
        log.warning("lambda=0 adversary did not lower the robot's return; using a unit normalisation range")
        hi = lo + 1.0
    return (lo, hi), {"cooperative_return": coop, "adversary_return": summary["robot_return"],
                      "run_id": record.run_id, "seed": int(seed)}


def _stored_summary(store: RunStore | None, run_id: str) -> dict | None:
    if store is None or store.status(run_id) not in ("done", "failed"):
        return None
    return store.load(run_id, verify=False).summary


def rigid_scan(
    robot: GaussianPolicy,
    human: GaussianPolicy,
    canonical: CanonicalDataset,
    env_config: CursorAssistConfig,
    scan_config: ScanConfig,
    adv_template: AdversaryConfig,
    normalization: tuple[float, float],
    *,
    store: RunStore | None = None,
    jobs: int = 1,
    progress: Callable[[ScanRun], None] | None = None,
    max_new_runs: int | None = None,
    calibration: dict | None = None,
) -> ScanState:
    """Run the full scan; finished runs already in ``store`` are reused rather than retrained.

    ``max_new_runs`` stops the scan early (simulating an interruption) after
    that many freshly trained runs; the returned state is then incomplete.
    """
    scan_config.validate()
    state = ScanState(scan_config, (float(normalization[0]), float(normalization[1])),
                      calibration=dict(calibration or {}))
    for seed in scan_config.seeds:
        state.bounds[seed] = [(scan_config.lambda_min, scan_config.lambda_max)]
    base = {"robot": robot.state(), "human": human.state()}
    new_runs = 0

    for rnd in range(scan_config.rounds):
        pending: list[tuple[ScanRun, AttackJob]] = []
        round_runs: list[ScanRun] = []
        for seed in scan_config.seeds:
            lo, hi = state.current_bounds(seed)
            for j, lam in enumerate(log_space_grid(lo, hi, scan_config.samples_per_round)):
                cfg = AdversaryConfig.from_dict({**adv_template.to_dict(), "lam": float(lam),
                                                 "seed": derive_seed(seed, rnd, j) % (2**31)})
                run_cfg = attack_run_config(robot, human, canonical, env_config, cfg)
                record = RunRecord.new("attack", run_cfg, cfg.seed)
                run = ScanRun(seed=seed, round=rnd, index=j, lam=float(lam), run_id=record.run_id)
                round_runs.append(run)
                summary = _stored_summary(store, record.run_id)
                if summary is not None:
                    _apply_summary(run, summary, state.normalization)
                    if progress:
                        progress(run)
                    continue
                pending.append((run, AttackJob(base["robot"], base["human"], canonical, env_config.to_dict(),
                                               cfg.to_dict(), state.normalization, record.run_id)))
        if max_new_runs is not None:
            budget = max(0, max_new_runs - new_runs)
            if budget < len(pending):
                pending = pending[:budget]
                interrupted = True
            else:
                interrupted = False
        else:
            interrupted = False

        by_id = {run.run_id: run for run, _ in pending}
        records = {job.run_id: job for _, job in pending}

        def on_result(job: AttackJob, summary: dict, artifacts: dict | None) -> None:
            run = by_id[job.run_id]
            _apply_summary(run, summary, state.normalization)
            if store is not None:
                rec = RunRecord.new("attack", attack_run_config(robot, human, canonical, env_config,
                                                               AdversaryConfig.from_dict(job.adversary)),
                                    job.adversary["seed"])
                rec.status, rec.summary = summary["status"], summary
                if store.status(rec.run_id) not in ("done", "failed"):
                    store.persist(rec, artifacts or {})
            if progress:
                progress(run)

        _run_jobs([records[r.run_id] for r, _ in pending], jobs, on_result)
        new_runs += len(pending)
        state.runs.extend(sorted(round_runs, key=lambda r: (r.seed, r.round, r.index)))
        if interrupted:
            state.runs = [r for r in state.runs if r.status != "pending"]
            return state

        for seed in scan_config.seeds:
            lo, hi = state.current_bounds(seed)
            inside = [r for r in state.seed_runs(seed) if lo <= r.lam <= hi]
            if len(inside) >= 2:
                new = largest_jump([r.naturalness for r in inside], [r.lam for r in inside], scan_config.window)
            else:
                new = (lo, hi)
            state.bounds[seed].append(new)
    return state


def _apply_summary(run: ScanRun, summary: dict, normalization: tuple[float, float]) -> None:
    if summary.get("status") != "done":
        run.status, run.error = "failed", summary.get("error", "unknown failure")
        return
    run.status = "done"
    run.naturalness = float(summary["naturalness"])
    run.robot_return = float(summary["robot_return"])
    run.robot_success = float(summary["robot_success"])
    run.adversarialness = normalize_adversarialness(run.robot_return, *normalization)


def scan_complete(state: ScanState) -> bool:
    cfg = state.config
    return (len(state.runs) == cfg.total_runs
            and all(len(state.bounds[s]) == cfg.rounds + 1 for s in cfg.seeds))
