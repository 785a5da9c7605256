import csv
import io
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tabletop_lifelong import harness, metrics, taskgen
from tabletop_lifelong.harness import ConfigError, ExperimentConfig, RunRecord

TINY = dict(
    demos_per_task=3,
    rollouts=2,
    epochs=2,
    checkpoint_every=1,
    nn={"hidden": [16, 16], "mixtures": 2},
)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, "seeds": [100], **kw})


def test_config_round_trip_and_validation(tmp_path):
    cfg = tiny(regime="ewc")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = ExperimentConfig.load(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert tiny(regime="er").digest() != cfg.digest()
    for bad in ({"regime": "sgd"}, {"seeds": []}, {"ordering": {"mode": "sampled"}}, {"epochs": 7, "checkpoint_every": 5}):
        with pytest.raises((ConfigError, ValueError)):
            tiny(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "colour": "red"})


def test_paper_protocol_flag_sets_protocol():
    cfg = ExperimentConfig(paper_protocol=True, demos_per_task=3, rollouts=2)
    assert (cfg.demos_per_task, cfg.rollouts, cfg.epochs, cfg.checkpoint_every) == (50, 20, 50, 5)
    assert cfg.optim["lr_max"] == 1e-4 and cfg.optim["lr_min"] == 1e-5
    assert ExperimentConfig().seeds == [100, 200, 300]


def test_orderings():
    assert harness.orderings(tiny(), 3) == [[0, 1, 2]]
    assert harness.orderings(tiny().with_ordering([2, 0, 1]), 3) == [[2, 0, 1]]
    with pytest.raises(ConfigError):
        harness.orderings(tiny().with_ordering([0, 0, 1]), 3)
    sampled = harness.orderings(tiny(ordering={"mode": "sampled", "count": 4, "seed": 1}), 5)
    assert len(sampled) == 4 and all(sorted(p) == list(range(5)) for p in sampled)


def test_three_task_run_fills_the_matrix(tmp_path):
    rec = harness.run_seed(tiny(), 100, tmp_path)
    m = rec.evalmatrix
    diag = [k for k in m.entries if k[0] == k[1]]
    off = [k for k in m.entries if k[0] != k[1]]
    assert len(diag) == 3 * 3 and len(off) == 3
    assert {(i, j) for i, j, _ in off} == {(1, 0), (2, 0), (2, 1)}
    for i, j, e in off:
        assert e == rec.report.e_star[i]
    run_dir = tmp_path / rec.config_digest
    for name in ("config.json", "evalmatrix.json", "metrics.json", "record.json", "demos/task_000.jsonl",
                 "ckpts/pos_002.ckpt", "report/metrics_table.csv"):
        assert (run_dir / name).exists(), name
    loaded = RunRecord.load(run_dir)
    assert loaded.evalmatrix.entries == m.entries and loaded.report == rec.report
    assert harness.audit_protocol(rec, epochs=(0, 1, 2), rollouts=2) == []


@pytest.mark.parametrize("regime", ["seql", "er", "ewc", "packnet", "mtl"])
def test_runs_are_deterministic(tmp_path, regime):
    cfg = tiny(regime=regime)
    a = harness.run_seed(cfg, 100, tmp_path / "a")
    b = harness.run_seed(cfg, 100, tmp_path / "b")
    for name in ("evalmatrix.json", "metrics.json"):
        assert (tmp_path / "a" / a.config_digest / name).read_bytes() == (tmp_path / "b" / b.config_digest / name).read_bytes()


@pytest.mark.parametrize("regime", ["er", "ewc", "packnet"])
def test_resume_after_interruption_matches(tmp_path, regime):
    cfg = tiny(regime=regime)
    full = harness.run_seed(cfg, 100, tmp_path / "full")
    with pytest.raises(harness.RunInterrupted):
        harness.run_seed(cfg, 100, tmp_path / "cut", stop_after=1)
    resumed = harness.run_seed(cfg, 100, tmp_path / "cut")
    assert resumed.evalmatrix.to_json() == full.evalmatrix.to_json()
    assert resumed.report == full.report


def test_errors_carry_task_context(tmp_path):
    cfg = tiny(regime="packnet", regime_options={"keep_ratio": 0.999})
    with pytest.raises(harness.RunError) as info:
        harness.run_seed(cfg, 100, tmp_path)
    assert info.value.position == 0 and info.value.task == 0


def test_audit_flags_protocol_violations(tmp_path):
    rec = harness.run_seed(tiny(), 100, tmp_path)
    problems = harness.audit_protocol(rec)
    assert any("rollouts" in p for p in problems)
    assert any("diagonal" in p or "eval epochs" in p for p in problems)
    del rec.evalmatrix.entries[next(k for k in rec.evalmatrix.entries if k[:2] == (2, 0))]
    assert any("not evaluated" in p for p in harness.audit_protocol(rec, (0, 1, 2), 2))


def test_ordering_study(tmp_path):
    study = harness.run_ordering_study(tiny(), tmp_path, [[0, 1, 2], [2, 1, 0]])
    assert len(study.results) == 2
    summary = study.summary()
    assert [o["order"] for o in summary["orderings"]] == [[0, 1, 2], [2, 1, 0]]
    assert set(summary["spread"]) == {"FWT", "NBT", "AUC"}
    again = harness.run_ordering_study(tiny(), tmp_path / "again", [[0, 1, 2], [2, 1, 0]])
    assert again.summary() == summary
    with pytest.raises(ConfigError):
        harness.run_ordering_study(tiny(), tmp_path, [[0, 1, 2]])


def test_pretrain_study(tmp_path):
    pre = {"suite": {"kind": "NINETY", "task_count": 2, "seed": 3}, "epochs": 2, "checkpoint_every": 1}
    study = harness.run_pretrain_study(tiny(pretrain=pre), tmp_path)
    s, p = study.scratch.records[0], study.pretrained.records[0]
    assert (s.suite, s.regime, s.seed) == (p.suite, p.regime, p.seed)
    assert study.init_differs
    assert study.delta_auc() == pytest.approx(p.report.AUC - s.report.AUC)
    assert "delta_AUC" in study.summary()
    with pytest.raises(ConfigError):
        harness.run_pretrain_study(tiny(pretrain={"suite": {"builtin": "interference"}}), tmp_path)


def test_report_files(tmp_path):
    rec = harness.run_seed(tiny(), 100, tmp_path)
    paths = harness.write_report([rec], tmp_path / "rep")
    rows = list(csv.reader(io.StringIO(paths[0].read_text())))
    assert rows[0] == metrics.TABLE_HEADER and len(rows) == 2
    assert len(rows[1]) == 8 and all(float(c) == float(c) for c in rows[1][2:])
    assert float(rows[1][2]) == rec.report.FWT
    assert float(rows[1][4]) == rec.report.NBT
    assert float(rows[1][6]) == rec.report.AUC
    for p in paths[1:]:
        root = ET.parse(p).getroot()
        assert root.tag.endswith("svg")


def test_suite_from_directory(tmp_path):
    specs = taskgen.interference_suite(0)
    taskgen.write_suite(tmp_path / "suite", specs, "INTERFERENCE", 0)
    suite = harness.resolve_suite({"dir": str(tmp_path / "suite")})
    assert len(suite) == 3
    with pytest.raises(ConfigError):
        harness.resolve_suite({"nothing": 1})


def test_embedding_and_observer_dims():
    cfg = tiny()
    suite = harness.resolve_suite(cfg.suite)
    ctx = harness.build_context(cfg, suite)
    for t in range(3):
        e = ctx.embedding(t)
        assert e.sum() == 1.0 and e[t] == 1.0
        s0 = harness.world.sample_initial_state(ctx.specs[t], np.random.default_rng(0))
        assert ctx.observer(t)(s0).shape == (ctx.hyper.obs_dim,)
