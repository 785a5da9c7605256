"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy criteria (8, 9, 11) take minutes; run ``pytest tests/test_acceptance.py -v`` to
see the per-criterion lines and the summary block at the end of the session.
"""

import json
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import stats

from tabletop_lifelong import harness, lifelong, metrics, taskgen, world
from tabletop_lifelong.lifelong import ER, EWC, FREE, PackNet, ReplayBuffer, SeqL, TaskData, empirical_fisher
from tabletop_lifelong.nn import forward
from tabletop_lifelong.task_dsl import GoalFormula, ParseError, Predicate, parse_problem, serialize_problem, validate

from test_metrics import build, k2_example, max_oracle_gap
from test_nn import max_gradient_error, nll_analytic_value

LISTING = (Path(__file__).parent / "data" / "kitchen_open_drawer.bddl").read_text()
REGIMES = ("seql", "er", "ewc", "packnet")


def fast_task_data(n_tasks):
    """Fast-mode context and demo sets for the first ``n_tasks`` interference tasks."""
    cfg = harness.ExperimentConfig()
    suite = harness.resolve_suite(cfg.suite)
    ctx = harness.build_context(cfg, suite)
    data = [
        TaskData(harness.collect_task_demos(ctx, t, cfg.demos_per_task, cfg.demo_noise), ctx.embedding(t), ctx.hyper.window)
        for t in range(n_tasks)
    ]
    return cfg, ctx, data


def fresh_params(ctx, seed=100):
    return harness._init_params(ctx, seed, None)


# -- 1 ------------------------------------------------------------------------


def mutated_inputs(n, seed=0):
    """Byte-level mutations of the listing mixed with raw random bytes."""
    rng = np.random.default_rng(seed)
    base = LISTING.encode()
    alphabet = b"()-:;. \n\t0123456789eE+abcxyzAnd\xff\x00"
    for i in range(n):
        kind = i % 5
        if kind == 0:
            yield rng.integers(0, 256, int(rng.integers(0, 300)), dtype=np.uint8).tobytes()
        elif kind == 1:
            yield base[: int(rng.integers(0, len(base)))]
        else:
            b = bytearray(base)
            for _ in range(int(rng.integers(1, 8))):
                pos = int(rng.integers(0, len(b)))
                op = int(rng.integers(3))
                ch = alphabet[int(rng.integers(len(alphabet)))]
                if op == 0:
                    b[pos] = ch
                elif op == 1:
                    b.insert(pos, ch)
                elif len(b) > 1:
                    del b[pos]
            yield bytes(b)


def test_criterion_01_dsl_golden(criterion, clock):
    spec = parse_problem(LISTING)
    cab = next(r for r in spec.regions if r.name == "wooden_cabinet_init_region")
    golden = (
        cab.target == "kitchen_table"
        and cab.ranges == ((-0.01, -0.31, 0.01, -0.29),)
        and cab.yaw_rotation == ((3.141592653589793, 3.141592653589793),)
        and len(spec.fixtures) == 2
        and len(spec.objects) == 2
        and spec.goal == GoalFormula((
            Predicate("Open", ("wooden_cabinet_1_top_region",)),
            Predicate("In", ("akita_black_bowl_1", "wooden_cabinet_1_top_region")),
        ))
        and validate(spec) == []
    )
    text = serialize_problem(spec)
    round_trip = parse_problem(text) == spec and serialize_problem(parse_problem(text)) == text
    crashes, parsed = [], 0
    for data in mutated_inputs(10_000):
        try:
            parse_problem(data)
            parsed += 1
        except ParseError:
            pass
        except Exception as exc:  # noqa: BLE001 - any other exception is a crash
            crashes.append(repr(exc))
    criterion(1, "DSL golden, round trip, 10^4 fuzzed inputs", {
        "listing parses to the golden structure": golden,
        "serialize/parse round trip is byte-stable": round_trip,
        f"fuzz: {len(crashes)} crashes ({parsed} inputs parsed cleanly)": not crashes,
    }, clock(), 5)


# -- 2 ------------------------------------------------------------------------


def test_criterion_02_metric_oracle(criterion, clock):
    gap = max_oracle_gap(200)
    epochs = tuple(range(0, 51, 5))
    perfect = metrics.compute_metrics(build(2, epochs, [[1.0] * 11] * 2, [[1.0] * 2] * 2))
    zero = metrics.compute_metrics(build(3, epochs, [[0.0] * 11] * 3, [[0.0] * 3] * 3))
    k2 = metrics.compute_metrics(k2_example())
    criterion(2, "metric oracle and tagged examples", {
        f"max |oracle gap| {gap:.1e} <= 1e-12 over 200 matrices": gap <= 1e-12,
        "perfect learner (1, 0, 1)": (perfect.FWT, perfect.NBT, perfect.AUC) == (1.0, 0.0, 1.0),
        "zero learner (0, 0, 0)": (zero.FWT, zero.NBT, zero.AUC) == (0.0, 0.0, 0.0),
        f"K=2 case FWT={k2.FWT!r} NBT={k2.NBT!r} AUC={k2.AUC!r}":
            abs(k2.FWT - 1 / 3) <= 1e-15 and abs(k2.NBT - 0.05) <= 1e-15 and abs(k2.AUC - 0.35) <= 1e-15,
    }, clock(), 5)


# -- 3 ------------------------------------------------------------------------


def test_criterion_03_gradients(criterion, clock):
    err = max_gradient_error(100)
    nll_gap = abs(nll_analytic_value() - 1.5 * math.log(2 * math.pi))
    criterion(3, "gradient check and GMM NLL closed form", {
        f"max relative gradient error {err:.1e} <= 1e-4 over 100 configs": err <= 1e-4,
        f"NLL gap {nll_gap:.1e} <= 1e-9": nll_gap <= 1e-9,
    }, clock(), 30)


# -- 4 ------------------------------------------------------------------------


def test_criterion_04_degeneracies(criterion, clock):
    cfg, ctx, (data,) = fast_task_data(1)
    sched = cfg.schedule()

    def trajectory(regime):
        run = regime.train_task(0, fresh_params(ctx), data, sched, 100)
        return [c.flat for c in run.checkpoints]

    ref = trajectory(SeqL())
    same = lambda xs: len(xs) == len(ref) and all(np.array_equal(a, b) for a, b in zip(ref, xs))
    er = ER()
    checks = {
        "ER with empty buffer matches SeqL bit for bit": not er.buffer.items and same(trajectory(er)),
        "EWC with lambda=0 matches SeqL bit for bit": same(trajectory(EWC(lam=0.0))),
        "EWC with default lambda before any anchor matches SeqL": same(trajectory(EWC())),
        "PackNet before any freeze matches SeqL bit for bit": same(trajectory(PackNet(ctx.hyper))),
        f"{len(ref)} checkpoints compared per regime": len(ref) == 11,
    }
    criterion(4, "regime degeneracies on a 1-task run", checks, clock(), 120)


# -- 5 ------------------------------------------------------------------------


def test_criterion_05_packnet_retention(criterion, clock):
    cfg, ctx, datasets = fast_task_data(3)
    sched = cfg.schedule()
    regime = PackNet(ctx.hyper)
    probe = np.random.default_rng(5).normal(0, 1, (100, ctx.hyper.input_dim))
    params = fresh_params(ctx)
    snaps, frees = [], []
    for k, d in enumerate(datasets):
        run = regime.train_task(k, params, d, sched, 100)
        params = regime.finish_task(k, params.with_flat(run.checkpoints[-1].flat), d, sched, 100)
        out = forward(regime.eval_params(params, 0), probe)
        snaps.append(b"".join(a.tobytes() for a in (out.log_weights, out.means, out.log_stds)))
        frees.append(int(regime.state.free.sum()))
    owner = regime.state.owner
    masks = [owner == k for k in range(3)]
    disjoint = all(not np.any(masks[i] & masks[j]) for i in range(3) for j in range(i + 1, 3))
    total = regime.state.prunable_count
    n_groups = sum(1 for s in params.layout.slots if not s.name.endswith(".b"))
    fractions = [f / total for f in frees]
    capacity_ok = all(abs(f - 0.75**k * total) <= n_groups * k for k, f in enumerate(frees, start=1))
    criterion(5, "PackNet retention, disjoint masks, 0.75^k free capacity", {
        "task-1 subnetwork outputs identical after tasks 2 and 3": snaps[0] == snaps[1] == snaps[2],
        "task masks pairwise disjoint": disjoint,
        f"free fractions {[round(f, 4) for f in fractions]} vs 0.75^k (<= 1 weight per layer per prune)": capacity_ok,
        "pruned weights are exactly zero": bool(np.all(params.flat[owner == FREE] == 0.0)),
    }, clock(), 300)


# -- 6 ------------------------------------------------------------------------


def test_criterion_06_ewc_state(criterion, clock):
    cfg, ctx, datasets = fast_task_data(3)
    sched = cfg.schedule()
    regime = EWC()
    params = fresh_params(ctx)
    fishers = []
    for k, d in enumerate(datasets):
        run = regime.train_task(k, params, d, sched, 100)
        params = params.with_flat(run.checkpoints[-1].flat)
        fishers.append(empirical_fisher(params, d))
        params = regime.finish_task(k, params, d, sched, 100)
    g = regime.state.gamma
    unrolled = g * g * (1 - g) * fishers[0] + g * (1 - g) * fishers[1] + (1 - g) * fishers[2]
    ema_gap = float(np.max(np.abs(regime.state.fisher - unrolled)))
    loss, grad = regime.state.penalty(regime.state.anchor.copy())
    moved_loss, _ = regime.state.penalty(regime.state.anchor + 1e-3)
    criterion(6, "EWC penalty at anchor and Fisher EMA", {
        "penalty is exactly 0 at the anchor": loss == 0.0,
        "penalty gradient is exactly 0 at the anchor": bool(np.all(grad == 0.0)),
        "penalty is positive away from the anchor": moved_loss > 0.0,
        f"EMA vs unrolled recurrence gap {ema_gap:.1e} <= 1e-12": ema_gap <= 1e-12,
    }, clock(), 120)


# -- 7 ------------------------------------------------------------------------


def test_criterion_07_replay_buffer(criterion, clock):
    buf = ReplayBuffer(1000)
    rng = np.random.default_rng(0)
    peak = 0
    for task in range(30):
        buf.insert(task, range(50), rng)
        peak = max(peak, len(buf))
    q = buf.quotas()
    draws = buf.draw(np.random.default_rng(3), 10_000)
    index = {item: i for i, item in enumerate(buf.items)}
    counts = np.bincount([index[d] for d in draws], minlength=len(buf))
    p = stats.chisquare(counts).pvalue
    criterion(7, "replay buffer capacity and uniform draws", {
        f"size never exceeds 1000 (peak {peak}) over 30 x 50 inserts": peak <= 1000,
        f"per-task quotas balanced (min {min(q.values())}, max {max(q.values())})": max(q.values()) - min(q.values()) <= 1,
        f"chi-square p={p:.3f} > 0.01 over 10^4 draws": p > 0.01,
    }, clock(), 60)


# -- 8 ------------------------------------------------------------------------


DEFAULT_SUITES = [("SPATIAL", 10), ("OBJECT", 10), ("GOAL", 10), ("LONG", 10), ("NINETY", 90)]


def test_criterion_08_expert_validity(criterion, clock):
    suites = {f"{kind}({n})": taskgen.build_suite(taskgen.SuiteRecipe(kind, n, 0)) for kind, n in DEFAULT_SUITES}
    suites["INTERFERENCE(3)"] = taskgen.interference_suite(0)
    checks = {}
    for name, specs in suites.items():
        worst = 100
        for i, spec in enumerate(specs):
            rng = np.random.default_rng([8, i])
            ok = sum(world.run_expert_episode(spec, world.sample_initial_state(spec, rng), 0.0, None).success
                     for _ in range(100))
            worst = min(worst, ok)
        checks[f"{name}: worst task {worst}/100 >= 95"] = worst >= 95
    criterion(8, "scripted expert >= 95% on every task of every default suite", checks, clock(), 300)


# -- 9 ------------------------------------------------------------------------


def test_criterion_09_directional_trends(criterion, clock, tmp_path):
    agg = {}
    for regime in REGIMES:
        result = harness.run_lifelong(harness.ExperimentConfig(regime=regime), tmp_path)
        agg[regime] = {m: float(np.mean([getattr(r.report, m) for r in result.records])) for m in ("FWT", "NBT", "AUC")}
    with criterion.capsys.disabled():
        for regime, v in agg.items():
            print(f"    {regime:8s} FWT={v['FWT']:.3f} NBT={v['NBT']:.3f} AUC={v['AUC']:.3f}")
    fwt, nbt, auc = ({r: agg[r][m] for r in REGIMES} for m in ("FWT", "NBT", "AUC"))
    criterion(9, "directional trends, interference suite, fast mode, 3 seeds", {
        f"(a) SeqL FWT {fwt['seql']:.3f} >= max(ER, EWC, PackNet) - 0.02 = {max(fwt[r] for r in REGIMES[1:]) - 0.02:.3f}":
            all(fwt["seql"] >= fwt[r] - 0.02 for r in REGIMES[1:]),
        f"(b) PackNet NBT {nbt['packnet']:.3f} <= 0.05": nbt["packnet"] <= 0.05,
        f"(b) SeqL NBT {nbt['seql']:.3f} >= PackNet NBT + 0.15": nbt["seql"] >= nbt["packnet"] + 0.15,
        f"(c) ER AUC {auc['er']:.3f} >= SeqL AUC {auc['seql']:.3f}": auc["er"] >= auc["seql"],
    }, clock(), 900)


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_protocol_audit(criterion, clock, tmp_path):
    record = harness.run_seed(harness.ExperimentConfig(paper_protocol=True), 100, tmp_path)
    reloaded = harness.RunRecord.load(record.directory)
    start = clock()
    problems = harness.audit_protocol(reloaded)
    audit_s = clock() - start
    diag_epochs = [sorted(e for (a, b, e) in reloaded.evalmatrix.entries if a == b == i) for i in range(3)]
    broken = harness.RunRecord.load(record.directory)
    broken.evaluations[0][3] = 19
    del broken.evalmatrix.entries[next(k for k in broken.evalmatrix.entries if k[:2] == (2, 0))]
    caught = harness.audit_protocol(broken)
    criterion(10, "protocol audit of a paper-protocol record", {
        f"audit finds no problems ({problems or 'clean'})": problems == [],
        "11 diagonal checkpoints per task at epochs 0, 5, ..., 50": diag_epochs == [list(range(0, 51, 5))] * 3,
        "every evaluation used 20 rollouts": all(ev[3] == 20 for ev in reloaded.evaluations),
        "all prior tasks evaluated after each task": {k[:2] for k in reloaded.evalmatrix.entries if k[0] != k[1]}
            == {(1, 0), (2, 0), (2, 1)},
        f"a tampered record is flagged ({len(caught)} problems)": len(caught) >= 2,
    }, audit_s, 1)


# -- 11 -----------------------------------------------------------------------


def test_criterion_11_determinism(criterion, clock, tmp_path):
    blobs = []
    for name in ("first", "second"):
        cmd = [sys.executable, "-m", "tabletop_lifelong.cli", "run", "--regime", "er", "--seeds", "100",
               "--out", str(tmp_path / name)]
        subprocess.run(cmd, check=True, capture_output=True)
        (run_dir,) = [p.parent for p in (tmp_path / name).glob("*/metrics.json")]
        blobs.append({f: (run_dir / f).read_bytes() for f in ("evalmatrix.json", "metrics.json")})
    report = json.loads(blobs[0]["metrics.json"])
    criterion(11, "two separate processes give byte-identical outputs", {
        "evalmatrix.json identical": blobs[0]["evalmatrix.json"] == blobs[1]["evalmatrix.json"],
        f"metrics.json identical (AUC={report.get('AUC')})": blobs[0]["metrics.json"] == blobs[1]["metrics.json"],
    }, clock(), 900)
