"""End-to-end acceptance suite; each test prints one PASS/FAIL line.

The desk-scale workflow (co-optimisation, personalised robot, scans) is
trained once per session and its run store is shared, so runs computed for
one criterion are reused by the next.
"""

import contextlib
import io
import json
import math
import re
import time

import numpy as np
import pytest

from natadv.cli import main
from natadv.frontier import FrontierPoint, auc, build_frontier
from natadv.naturalness import mmd2
from natadv.nn import model_from_state, parse_checkpoint
from natadv.rigid import ScanConfig, ScanState, calibrate_normalization, largest_jump, rigid_scan
from natadv.rl import evaluate
from natadv.robustgt import PopulationSpec, robust_finetune, select_failure_cases
from natadv.runstore import RunStore

from oracles import (
    HAND_TRACED,
    brute_pareto,
    discrete_pair,
    fd_grad,
    fit_discrete_discriminator,
    naive_mmd2,
    random_case,
    rel_err,
)

pytestmark = pytest.mark.acceptance


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def spearman(x, y):
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=float)
        for val in np.unique(v):
            tie = v == val
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


def per_seed_aucs(state, normalization):
    return [build_frontier([p for p in state.points() if p.seed == s], normalization).auc
            for s in state.config.seeds]


# ----------------------------------------------------------------------
# 1-3, 7, 8: oracle checks
# ----------------------------------------------------------------------


def test_c1_divergence_oracles(verdict):
    t0 = time.perf_counter()
    worst = {"ls_gan": 0.0, "kl_logistic": 0.0}
    for n in range(4, 9):
        p_adv, p_can = discrete_pair(n, seed=100 + n)
        for kind in worst:
            scores = fit_discrete_discriminator(p_adv, p_can, kind)
            ref = (p_adv - p_can) / (p_adv + p_can) if kind == "ls_gan" else np.log(p_adv / p_can)
            worst[kind] = max(worst[kind], float(np.max(np.abs(scores - ref))))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 0.05 and secs < 60
    verdict(1, ok, f"max error ls_gan {worst['ls_gan']:.2e}, kl {worst['kl_logistic']:.2e}; {secs:.1f}s")


def test_c2_mmd(verdict):
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(9, 4)), rng.normal(size=(6, 4)) + 0.3
    symmetric = mmd2(A, B, 1.1) == mmd2(B, A, 1.1)
    self_zero = abs(mmd2(A, A.copy(), 1.1))
    sigma = 0.8
    single = abs(mmd2(np.zeros((1, 2)), np.array([[sigma * math.sqrt(2), 0.0]]), sigma) - (2 - 2 * math.exp(-1)))
    fast = max(abs(mmd2(a, b, bw) - naive_mmd2(a, b, bw))
               for seed in range(5)
               for a, b, bw in [(np.random.default_rng(seed).normal(size=(7, 3)),
                                 np.random.default_rng(seed + 50).normal(size=(5, 3)) + 0.5, 0.5 + 0.3 * seed)])
    ok = symmetric and self_zero <= 1e-12 and single <= 1e-9 and fast <= 1e-10
    verdict(2, ok, f"symmetric={symmetric} self={self_zero:.1e} singleton={single:.1e} naive={fast:.1e}")


def test_c3_gradient_checks(verdict):
    worst = 0.0
    for seed in range(100):
        m, loss = random_case(seed)
        for p in m.parameters():
            p.grad = None
        loss().backward()
        for p in m.parameters():
            worst = max(worst, float(rel_err(p.grad, fd_grad(lambda: loss().item(), p.data))))
    verdict(3, worst <= 1e-4, f"100 cases, max relative error {worst:.2e}")


def test_c7_auc_fixtures(verdict):
    tri = auc([(0.0, 1.0), (1.0, 0.0)])
    three = auc([(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)])
    rng = np.random.default_rng(7)
    monotone = True
    for _ in range(500):
        xy = [tuple(p) for p in rng.random((int(rng.integers(1, 10)), 2))]
        base = build_frontier([FrontierPoint(1.0, x, y) for x, y in xy], (0, 1))
        target = base.pareto_points[int(rng.integers(len(base.pareto_points)))]
        new = (min(1.0, target.naturalness + rng.random() * 0.2), min(1.0, target.adversarialness + rng.random() * 0.2))
        grown = build_frontier([FrontierPoint(1.0, x, y) for x, y in [*xy, new]], (0, 1))
        monotone &= grown.auc >= base.auc - 1e-12
    ok = tri == 0.5 and three == 0.5 and monotone
    verdict(7, ok, f"triangle {tri!r}, three-point {three!r}, dominating points never lower AUC: {monotone}")


def test_c8_largest_jump(verdict):
    wrong = [(nat, lams, L) for nat, lams, L, want in HAND_TRACED if largest_jump(nat, lams, L) != want]
    verdict(8, not wrong and len(HAND_TRACED) >= 10, f"{len(HAND_TRACED) - len(wrong)}/{len(HAND_TRACED)} sequences")


# ----------------------------------------------------------------------
# 4-6, 9: desk-scale workflow
# ----------------------------------------------------------------------


def test_c4_cooperative_competence(workflow, verdict):
    coop, robot = workflow.coop["success"], workflow.trained["success"]
    ok = coop >= 0.95 and robot >= 0.95 and workflow.elapsed <= 30 * 60
    verdict(4, ok, f"co-optimised success {coop:.2f}, personalised robot {robot:.2f} over 100 episodes; "
                   f"{workflow.elapsed / 60:.1f} min")


def test_c5_endpoint_behaviour(workflow, verdict):
    t0 = time.perf_counter()
    code, so, se = cli("--out", workflow.out, "sanity", "--robot", workflow.models_path,
                       "--canonical", workflow.canonical_path)
    per_run = (time.perf_counter() - t0) / 3
    assert code == 0, se
    r = last_json(so)
    lo, hi, coop = r["lambda_min"], r["lambda_max"], r["cooperative_return"]
    ok = all(r["checks"].values()) and per_run <= 600
    verdict(5, ok, f"adv@{lo['lambda']:g}={lo['adversarialness']:.3f}, nat@{hi['lambda']:g}={hi['naturalness']:.3f}, "
                   f"return {hi['robot_return']:.1f} vs cooperative {coop:.1f}; {per_run:.0f}s per run")


@pytest.fixture(scope="session")
def desk_scan(workflow):
    code, so, se = cli("--out", workflow.out, "scan", "--robot", workflow.models_path,
                       "--canonical", workflow.canonical_path)
    assert code == 0, se
    rid = last_json(so)["run_id"]
    state = ScanState.from_json(workflow.store.read_artifact(rid, "scan_state.json").decode())
    return rid, state


def test_c6_scan_accounting(workflow, desk_scan, verdict):
    rid, state = desk_scan
    cfg = workflow.cfg.scan
    expected = cfg.rounds * cfg.samples_per_round * len(cfg.seeds)
    nested = True
    for seed in cfg.seeds:
        bounds = state.bounds[seed]
        nested &= len(bounds) == cfg.rounds + 1
        for (lo0, hi0), (lo1, hi1) in zip(bounds, bounds[1:]):
            nested &= lo0 <= lo1 < hi1 <= hi0
        for run in state.runs:
            if run.seed == seed:
                lo, hi = bounds[run.round]
                nested &= lo <= run.lam <= hi
    front = state.frontier()
    pareto = sorted(p.xy for p in front.pareto_points)
    oracle = brute_pareto([p.xy for p in front.all_points])
    ok = len(state.runs) == expected == 16 and nested and pareto == oracle
    verdict(6, ok, f"{len(state.runs)} runs (expected {expected}), nested bounds {nested}, "
                   f"Pareto {len(pareto)} points equal to brute force: {pareto == oracle}")


def test_scan_naturalness_tracks_lambda(desk_scan):
    _, state = desk_scan
    ok = [r for r in state.runs if r.ok]
    rho = spearman([r.lam for r in ok], [r.naturalness for r in ok])
    print(f"spearman(lambda, naturalness) = {rho:.3f} over {len(ok)} runs")
    assert rho >= 0.6


def test_c9_robust_gt_direction(workflow, desk_scan, verdict):
    t0 = time.perf_counter()
    cfg = workflow.cfg
    env, store, human = cfg.env, workflow.store, workflow.human
    tmpl = cfg.adversary_template()
    scan_cfg = ScanConfig.from_dict({**cfg.raw["scan"], "seeds": [0, 1, 2]})
    norm, _ = calibrate_normalization(workflow.robot, human, workflow.canonical, env, tmpl, scan_cfg.seeds[0], store)

    vanilla = rigid_scan(workflow.robot, human, workflow.canonical, env, scan_cfg, tmpl, norm, store=store)
    rob = cfg.section("robust")
    ids = select_failure_cases(vanilla.frontier(), tuple(rob["nat_range"]), rob["n"])
    assert ids, "no failure cases to fine-tune against"
    advs = [model_from_state(parse_checkpoint(store.read_artifact(i, "checkpoints/adversary.npz"))["adversary"])
            for i in ids]
    population = PopulationSpec(human, advs, rob["rate"])
    robust, _ = robust_finetune(workflow.robot, population, env, cfg.robot_ppo, seed=0, iterations=rob["iterations"])
    success = evaluate(env, human, robust, 100, 1)["success"]
    hardened = rigid_scan(robust, human, workflow.canonical, env, scan_cfg, tmpl, norm, store=store)

    before, after = per_seed_aucs(vanilla, norm), per_seed_aucs(hardened, norm)
    m0, m1 = float(np.median(before)), float(np.median(after))
    hours = (time.perf_counter() - t0) / 3600
    ok = m1 < m0 and success >= 0.9 and hours <= 2
    verdict(9, ok, f"median AUC {m0:.3f} -> {m1:.3f} (per seed {np.round(before, 3).tolist()} -> "
                   f"{np.round(after, 3).tolist()}), base success {success:.2f}, {len(ids)} adversaries; "
                   f"{hours * 60:.0f} min")


# ----------------------------------------------------------------------
# 10: determinism and replay through the command line
# ----------------------------------------------------------------------

REDUCED = """\
adversary: {iterations: 4, eval_episodes: 10, rl: {steps_per_iter: 500}}
scan: {rounds: 2, samples_per_round: 3, seeds: [0, 1]}
"""


def test_c10_determinism_and_replay(workflow, tmp_path, verdict):
    cfg = tmp_path / "reduced.yaml"
    cfg.write_text(REDUCED)
    inputs = ("--robot", workflow.models_path, "--canonical", workflow.canonical_path)

    def scan(out, *extra):
        return cli("--config", cfg, "--out", tmp_path / out, *extra, "scan", *inputs)

    def frontier_csv(out, rid):
        return RunStore(tmp_path / out).read_artifact(rid, "frontier.csv")

    code, so, se = scan("serial", "--jobs", 1)
    assert code == 0, se
    rid = last_json(so)["run_id"]
    code, so, se = scan("parallel", "--jobs", 4)
    assert code == 0, se
    assert last_json(so)["run_id"] == rid
    parallel_same = frontier_csv("serial", rid) == frontier_csv("parallel", rid)

    code, so, se = cli("--config", cfg, "--out", tmp_path / "resumed", "scan", *inputs, "--max-runs", 5)
    assert code == 0, se
    stopped = re.search(r"--resume (\w+)", se)
    assert stopped and stopped.group(1) == rid
    code, so, se = cli("--out", tmp_path / "resumed", "scan", "--resume", rid)
    assert code == 0, se
    resumed_same = frontier_csv("serial", rid) == frontier_csv("resumed", rid)
    state_same = (RunStore(tmp_path / "serial").read_artifact(rid, "scan_state.json")
                  == RunStore(tmp_path / "resumed").read_artifact(rid, "scan_state.json"))
    ok = parallel_same and resumed_same and state_same
    verdict(10, ok, f"--jobs 4 vs 1 frontier.csv identical: {parallel_same}; "
                    f"interrupted+resumed identical: {resumed_same and state_same}")
