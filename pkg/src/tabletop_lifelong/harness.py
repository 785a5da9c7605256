"""Experiment orchestration: suites, demos, lifelong runs, studies and reports.

A run directory ``<root>/<digest>/`` holds one seed's lifelong run::

    config.json      the per-seed config the digest is computed from
    demos/           task_XXX.jsonl demo files (suite task index)
    ckpts/           best (or post-regime) parameters after each position
    state/           regime memory and progress marker for resuming
    evalmatrix.json  metrics.json  record.json
    report/          CSV table and SVG curves

``evalmatrix.json`` and ``metrics.json`` contain no timestamps, so two runs
of one config are byte-identical; wall-clock timings go to ``record.json``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import lifelong, metrics, nn, taskgen, world
from .task_dsl import serialize_problem

FORMAT_VERSION = 1
PAPER_PROTOCOL = {"demos_per_task": 50, "rollouts": 20, "epochs": 50, "checkpoint_every": 5}
FAST_PROTOCOL = {"demos_per_task": 20, "rollouts": 10, "epochs": 50, "checkpoint_every": 5}
# fast mode sees 2.5x fewer samples per epoch, so its cosine schedule starts 10x higher
PAPER_OPTIM = {"lr_max": 1e-4, "lr_min": 1e-5}
FAST_OPTIM = {"lr_max": 1e-3, "lr_min": 1e-4}
DEFAULT_SEEDS = (100, 200, 300)

# seed-sequence tags
_DEMO, _INIT, _EVAL_BACKWARD = 7001, 7002, 1000


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    """A module error raised while training or evaluating one task."""

    def __init__(self, position: int, task: int, cause: Exception):
        super().__init__(f"position {position} (suite task {task}): {type(cause).__name__}: {cause}")
        self.position, self.task, self.cause = position, task, cause


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    suite: dict = field(default_factory=lambda: {"builtin": "interference", "seed": 0})
    regime: str = "seql"
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    ordering: dict = field(default_factory=lambda: {"mode": "identity"})
    pretrain: Optional[dict] = None
    paper_protocol: bool = False
    demos_per_task: int = FAST_PROTOCOL["demos_per_task"]
    demo_noise: float = 0.02
    rollouts: int = FAST_PROTOCOL["rollouts"]
    epochs: int = 50
    checkpoint_every: int = 5
    nn: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    regime_options: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.paper_protocol:
            for k, v in PAPER_PROTOCOL.items():
                setattr(self, k, v)
        self.optim = {**(PAPER_OPTIM if self.paper_protocol else FAST_OPTIM), **self.optim}
        if self.regime not in lifelong.REGIMES:
            raise ConfigError(f"regime must be one of {lifelong.REGIMES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        mode = self.ordering.get("mode", "identity")
        if mode not in ("identity", "explicit", "sampled"):
            raise ConfigError(f"unknown ordering mode {mode!r}")
        if mode == "sampled" and int(self.ordering.get("count", 0)) < 1:
            raise ConfigError("sampled ordering needs a positive count")
        if self.rollouts < 1 or self.demos_per_task < 1:
            raise ConfigError("rollouts and demos_per_task must be positive")
        lifelong.TrainSchedule(self.epochs, self.checkpoint_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=[int(seed)])

    def with_ordering(self, perm: Sequence[int]) -> "ExperimentConfig":
        return replace(self, ordering={"mode": "explicit", "permutation": [int(i) for i in perm]})

    def schedule(self) -> lifelong.TrainSchedule:
        return lifelong.TrainSchedule(self.epochs, self.checkpoint_every, nn.OptimConfig(**self.optim))

    def sim_config(self) -> world.SimConfig:
        return world.SimConfig(**{**self.sim, "eval_rollout_count": self.rollouts})


def resolve_suite(desc: dict) -> taskgen.Suite:
    """Suite from ``{"dir": path}``, ``{"builtin": "interference", "seed": s}`` or a recipe."""
    if "dir" in desc:
        return taskgen.load_suite(desc["dir"])
    if desc.get("builtin") == "interference":
        seed = int(desc.get("seed", 0))
        return taskgen.make_suite(taskgen.interference_suite(seed), "INTERFERENCE", seed)
    if "kind" in desc:
        recipe = taskgen.SuiteRecipe(desc["kind"], int(desc.get("task_count", 10)), int(desc.get("seed", 0)))
        return taskgen.make_suite(taskgen.build_suite(recipe), recipe.kind, recipe.seed)
    raise ConfigError(f"cannot resolve suite {desc}")


def suite_label(desc: dict) -> str:
    if "dir" in desc:
        return Path(desc["dir"]).name
    if desc.get("builtin"):
        return str(desc["builtin"])
    return f"{desc['kind']}-{desc.get('task_count', 10)}-{desc.get('seed', 0)}"


def orderings(config: ExperimentConfig, K: int) -> list[list[int]]:
    mode = config.ordering.get("mode", "identity")
    if mode == "identity":
        return [list(range(K))]
    if mode == "explicit":
        perm = [int(i) for i in config.ordering["permutation"]]
        if sorted(perm) != list(range(K)):
            raise ConfigError(f"permutation {perm} is not a bijection over {K} tasks")
        return [perm]
    rng = np.random.default_rng(int(config.ordering.get("seed", 0)))
    return [list(map(int, rng.permutation(K))) for _ in range(int(config.ordering["count"]))]


# ---------------------------------------------------------------------------
# task context shared by runs


@dataclass
class TaskContext:
    """Everything about the tasks that is independent of seed and regime."""

    specs: list
    object_orders: list
    layout: world.ObservationLayout
    hyper: nn.PolicyHyper
    embedding_offset: int
    sim: world.SimConfig

    def embedding(self, task: int) -> np.ndarray:
        e = np.zeros(self.layout.embedding_dim)
        e[self.embedding_offset + task] = 1.0
        return e

    def observer(self, task: int) -> world.Observer:
        return world.Observer(self.specs[task], self.layout, self.embedding(task), self.object_orders[task])


def build_context(config: ExperimentConfig, suite: taskgen.Suite, pretrain: Optional[taskgen.Suite] = None) -> TaskContext:
    extra = list(pretrain.specs) if pretrain else []
    all_specs = extra + list(suite.specs)
    layout = world.ObservationLayout.for_specs(all_specs, embedding_dim=len(all_specs))
    nn_opts = dict(config.nn)
    gain = float(nn_opts.pop("input_gain", 10.0))
    offset, scale = layout.input_normalizer(gain)
    if "hidden" in nn_opts:
        nn_opts["hidden"] = tuple(nn_opts["hidden"])
    hyper = nn.PolicyHyper(obs_dim=layout.obs_dim, input_offset=offset, input_scale=scale, **nn_opts)
    return TaskContext(list(suite.specs), list(suite.object_orders), layout, hyper, len(extra), config.sim_config())


def demo_rng(task: int, spec) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(serialize_problem(spec).encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([_DEMO, key, task]))


def collect_task_demos(ctx: TaskContext, task: int, n: int, noise: float) -> list[world.Trajectory]:
    obs = ctx.observer(task)
    return world.collect_demos(ctx.specs[task], n, demo_rng(task, ctx.specs[task]), noise, ctx.sim, obs, task)


def load_or_collect(ctx: TaskContext, task: int, n: int, noise: float, directory: Optional[Path]) -> list[world.Trajectory]:
    feature_layout = replace(ctx.layout, embedding_dim=0)
    if directory is not None:
        path = directory / f"task_{task:03d}.jsonl"
        digest = world.ordering_digest(feature_layout, ctx.object_orders[task])
        if path.exists():
            header, demos = world.load_demos(path, expect_digest=digest)
            if header["count"] == n:
                return demos
        demos = collect_task_demos(ctx, task, n, noise)
        directory.mkdir(parents=True, exist_ok=True)
        world.save_demos(path, demos, feature_layout, ctx.object_orders[task])
        return demos
    return collect_task_demos(ctx, task, n, noise)


def evaluate(ctx: TaskContext, params: nn.PolicyParams, task: int, seed: int, tag: int, rollouts: int) -> float:
    """Deterministic-mode success rate; initial states are a function of (seed, task, tag, rollout) only."""
    starts = [
        world.sample_initial_state(ctx.specs[task], np.random.default_rng(np.random.SeedSequence([seed, task, tag, r])), ctx.sim)
        for r in range(rollouts)
    ]
    policy = nn.GmmPolicy(params, deterministic=True)
    return world.evaluate_policy(policy, ctx.specs[task], rollouts, None, ctx.sim, ctx.observer(task), starts)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    config_digest: str
    version: str
    seed: int
    regime: str
    suite: str
    order: list
    rollouts: int
    evalmatrix: metrics.EvalMatrix
    report: metrics.MetricReport
    tasks: list  # per position: task, epochs, losses, rates, e_star
    evaluations: list  # every evaluation performed: (i, j, e, rollouts)
    timings: dict = field(default_factory=dict)
    directory: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config_digest": self.config_digest,
            "version": self.version,
            "seed": self.seed,
            "regime": self.regime,
            "suite": self.suite,
            "order": self.order,
            "rollouts": self.rollouts,
            "evalmatrix": json.loads(self.evalmatrix.to_json()),
            "metrics": self.report.to_dict(),
            "tasks": self.tasks,
            "evaluations": self.evaluations,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict, directory: Optional[str] = None) -> "RunRecord":
        return cls(
            d["config_digest"], d["version"], d["seed"], d["regime"], d["suite"], d["order"], d["rollouts"],
            metrics.EvalMatrix.from_json(json.dumps(d["evalmatrix"])), metrics.MetricReport.from_dict(d["metrics"]),
            d["tasks"], d["evaluations"], d.get("timings", {}), directory,
        )

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        return cls.from_dict(json.loads((directory / "record.json").read_text(encoding="utf-8")), str(directory))


def audit_protocol(record: RunRecord, epochs: Sequence[int] = metrics.DEFAULT_EVAL_EPOCHS, rollouts: int = 20) -> list[str]:
    """Protocol violations in a completed record (empty when faithful)."""
    problems = []
    m = record.evalmatrix
    if tuple(m.eval_epochs) != tuple(epochs):
        problems.append(f"eval epochs {m.eval_epochs} != {tuple(epochs)}")
    for i in range(m.K):
        diag = sorted(e for (a, b, e) in m.entries if a == i and b == i)
        if diag != list(epochs):
            problems.append(f"task {i}: diagonal checkpoints at {diag}")
        for j in range(i):
            if not any(a == i and b == j for (a, b, _) in m.entries):
                problems.append(f"task {j} not evaluated after learning task {i}")
    for ev in record.evaluations:
        if ev[3] != rollouts:
            problems.append(f"evaluation {ev[:3]} used {ev[3]} rollouts")
    expected = m.K * len(epochs) + m.K * (m.K - 1) // 2
    if len(record.evaluations) != expected:
        problems.append(f"{len(record.evaluations)} evaluations recorded, expected {expected}")
    return problems


# ---------------------------------------------------------------------------
# persistence helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _save_state(directory: Path, state: dict) -> None:
    arrays = {k: v for k, v in state.items() if isinstance(v, np.ndarray)}
    scalars = {k: v for k, v in state.items() if not isinstance(v, np.ndarray)}
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "regime_arrays.npz", **arrays)
    _write_json(directory / "regime.json", scalars)


def _load_state(directory: Path) -> dict:
    state = json.loads((directory / "regime.json").read_text(encoding="utf-8"))
    with np.load(directory / "regime_arrays.npz") as z:
        for k in z.files:
            state[k] = z[k]
    return state


# ---------------------------------------------------------------------------
# the lifelong run


class RunInterrupted(Exception):
    """Raised by ``run_seed(stop_after=...)`` to simulate a crash."""

    pass


def _init_params(ctx: TaskContext, seed: int, init: Optional[np.ndarray]) -> nn.PolicyParams:
    if init is not None:
        return nn.PolicyParams(np.array(init, dtype=np.float64), ctx.hyper)
    return nn.init_params(ctx.hyper, np.random.default_rng(np.random.SeedSequence([seed, _INIT])))


def run_seed(
    config: ExperimentConfig,
    seed: int,
    root,
    order: Optional[Sequence[int]] = None,
    suite: Optional[taskgen.Suite] = None,
    ctx: Optional[TaskContext] = None,
    init: Optional[np.ndarray] = None,
    stop_after: Optional[int] = None,
) -> RunRecord:
    """One seed of a lifelong run, resuming from ``<root>/<digest>`` if it was interrupted.

    ``stop_after`` (testing aid) aborts after that many positions have been persisted.
    """
    cfg = config.for_seed(seed)
    suite = suite or resolve_suite(cfg.suite)
    ctx = ctx or build_context(cfg, suite)
    K = len(ctx.specs)
    order = list(order) if order is not None else orderings(cfg, K)[0]
    if sorted(order) != list(range(K)):
        raise ConfigError(f"order {order} is not a permutation of {K} tasks")
    digest = cfg.digest() if init is None else _digest_with_init(cfg, init)
    run_dir = Path(root) / digest
    state_dir = run_dir / "state"
    _write_json(run_dir / "config.json", cfg.to_dict())
    t_start = time.perf_counter()

    demos_dir = run_dir / "demos"
    datasets = {}
    for task in order:
        demos = load_or_collect(ctx, task, cfg.demos_per_task, cfg.demo_noise, demos_dir)
        datasets[task] = lifelong.TaskData(demos, ctx.embedding(task), ctx.hyper.window)
    t_demos = time.perf_counter()

    schedule = cfg.schedule()
    matrix = metrics.EvalMatrix(K, schedule.checkpoint_epochs)
    tasks_info: list[dict] = []
    evaluations: list[list] = []

    if cfg.regime == "mtl":
        _run_mtl(cfg, ctx, order, datasets, schedule, seed, matrix, tasks_info, evaluations, init)
    else:
        regime = lifelong.make_regime(cfg.regime, ctx.hyper, cfg.regime_options)
        params = _init_params(ctx, seed, init)
        start = 0
        progress_path = state_dir / "progress.json"
        if progress_path.exists():
            progress = json.loads(progress_path.read_text(encoding="utf-8"))
            if progress["order"] != order:
                raise ConfigError("persisted run used a different task order")
            start = progress["completed"]
            matrix = metrics.EvalMatrix.from_json(json.dumps(progress["evalmatrix"]))
            tasks_info, evaluations = progress["tasks"], progress["evaluations"]
            params, _ = nn.load_checkpoint(run_dir / "ckpts" / f"pos_{start - 1:03d}.ckpt")
            regime.load_state_dict(_load_state(state_dir), [datasets[t] for t in order[:start]])
        for pos in range(start, K):
            task = order[pos]
            try:
                params = _learn_position(cfg, ctx, regime, params, pos, order, datasets, schedule, seed, matrix,
                                         tasks_info, evaluations)
            except (world.WorldError, lifelong.CapacityExhausted, nn.DimensionMismatch, ValueError) as exc:
                raise RunError(pos, task, exc) from exc
            nn.save_checkpoint(run_dir / "ckpts" / f"pos_{pos:03d}.ckpt", params, {"position": pos, "task": task})
            _save_state(state_dir, regime.state_dict())
            _write_json(progress_path, {"order": order, "completed": pos + 1, "evalmatrix": json.loads(matrix.to_json()),
                                        "tasks": tasks_info, "evaluations": evaluations})
            if stop_after is not None and pos + 1 >= stop_after and pos + 1 < K:
                raise RunInterrupted()

    report = metrics.compute_metrics(matrix)
    t_end = time.perf_counter()
    record = RunRecord(
        digest, _package_version(), seed, cfg.regime, suite_label(cfg.suite), order, cfg.rollouts, matrix, report,
        tasks_info, evaluations, {"demos_s": t_demos - t_start, "total_s": t_end - t_start}, str(run_dir),
    )
    _write_text(run_dir / "evalmatrix.json", matrix.to_json() + "\n")
    _write_text(run_dir / "metrics.json", report.to_json() + "\n")
    _write_json(run_dir / "record.json", record.to_dict())
    write_report([record], run_dir / "report")
    return record


def _digest_with_init(cfg: ExperimentConfig, init: np.ndarray) -> str:
    h = hashlib.sha256(cfg.digest().encode())
    h.update(np.asarray(init, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _learn_position(cfg, ctx, regime, params, pos, order, datasets, schedule, seed, matrix, tasks_info, evaluations):
    task = order[pos]
    data = datasets[task]
    run = regime.train_task(pos, params, data, schedule, seed)
    rates = []
    for ck in run.checkpoints:
        r = evaluate(ctx, params.with_flat(ck.flat), task, seed, ck.epoch, cfg.rollouts)
        matrix.set(pos, pos, ck.epoch, r)
        evaluations.append([pos, pos, ck.epoch, cfg.rollouts])
        rates.append(r)
    best, e_star = metrics.best_checkpoint(rates, run.epochs)
    chosen = params.with_flat(run.at(e_star).flat)
    params = regime.finish_task(pos, chosen, data, schedule, seed)
    for j in range(pos):
        r = evaluate(ctx, regime.eval_params(params, j), order[j], seed, _EVAL_BACKWARD + pos, cfg.rollouts)
        matrix.set(pos, j, e_star, r)
        evaluations.append([pos, j, e_star, cfg.rollouts])
    tasks_info.append({
        "position": pos,
        "task": task,
        "epochs": run.epochs,
        "losses": [c.loss for c in run.checkpoints],
        "rates": rates,
        "e_star": e_star,
    })
    return params


def _run_mtl(cfg, ctx, order, datasets, schedule, seed, matrix, tasks_info, evaluations, init):
    params = _init_params(ctx, seed, init)
    run = lifelong.train_mtl(params, [datasets[t] for t in order], schedule, seed)
    K = len(order)
    rates = np.zeros((len(run.checkpoints), K))
    for ci, ck in enumerate(run.checkpoints):
        for pos, task in enumerate(order):
            rates[ci, pos] = evaluate(ctx, params.with_flat(ck.flat), task, seed, ck.epoch, cfg.rollouts)
            matrix.set(pos, pos, ck.epoch, float(rates[ci, pos]))
            evaluations.append([pos, pos, ck.epoch, cfg.rollouts])
    # backward entries: every task read at the checkpoint with the best mean success
    best_ci = int(np.argmax(rates.mean(axis=1)))
    for pos, task in enumerate(order):
        _, e_star = metrics.best_checkpoint(list(rates[:, pos]), run.epochs)
        for j in range(pos):
            matrix.set(pos, j, e_star, float(rates[best_ci, j]))
            evaluations.append([pos, j, e_star, cfg.rollouts])
        tasks_info.append({"position": pos, "task": task, "epochs": run.epochs,
                           "losses": [c.loss for c in run.checkpoints], "rates": list(map(float, rates[:, pos])),
                           "e_star": e_star})


@dataclass
class LifelongResult:
    records: list
    aggregate: dict

    def aggregate_dict(self) -> dict:
        return {k: {"mean": v.mean, "se": v.se} for k, v in self.aggregate.items()}


def run_lifelong(config: ExperimentConfig, root, order: Optional[Sequence[int]] = None) -> LifelongResult:
    """All seeds of one config; writes ``<root>/<config digest>/aggregate.json``."""
    suite = resolve_suite(config.suite)
    ctx = build_context(config, suite)
    records = [run_seed(config, s, root, order, suite, ctx) for s in config.seeds]
    agg = metrics.aggregate_seeds([r.report for r in records])
    result = LifelongResult(records, agg)
    out = Path(root) / config.digest()
    _write_json(out / "aggregate.json", {"config": config.to_dict(), "seeds": list(config.seeds),
                                         "runs": [r.config_digest for r in records], **result.aggregate_dict()})
    write_report(records, out / "report")
    return result


# ---------------------------------------------------------------------------
# studies


@dataclass
class OrderingStudy:
    permutations: list
    results: list  # LifelongResult per permutation

    def summary(self) -> dict:
        per = []
        for perm, res in zip(self.permutations, self.results):
            per.append({"order": perm, **res.aggregate_dict()})
        spread = {}
        for name in metrics.METRIC_NAMES:
            means = [res.aggregate[name].mean for res in self.results]
            spread[name] = max(means) - min(means)
        return {"orderings": per, "spread": spread}


def run_ordering_study(config: ExperimentConfig, root, permutations: Optional[Sequence[Sequence[int]]] = None) -> OrderingStudy:
    suite = resolve_suite(config.suite)
    perms = [list(p) for p in permutations] if permutations is not None else orderings(config, len(suite))
    if len(perms) < 2:
        raise ConfigError("an ordering study needs at least two permutations")
    results = [run_lifelong(config.with_ordering(p), root) for p in perms]
    study = OrderingStudy(perms, results)
    _write_json(Path(root) / f"ordering-{config.digest()}.json", study.summary())
    return study


@dataclass
class PretrainStudy:
    scratch: LifelongResult
    pretrained: LifelongResult
    pretrain_curve: list  # (epoch, mean pretrain success) per seed
    init_differs: bool

    def delta_auc(self) -> float:
        return self.pretrained.aggregate["AUC"].mean - self.scratch.aggregate["AUC"].mean

    def summary(self) -> dict:
        return {
            "scratch": self.scratch.aggregate_dict(),
            "pretrained": self.pretrained.aggregate_dict(),
            "delta_AUC": self.delta_auc(),
            "pretrain_curve": self.pretrain_curve,
        }


def pretrain(config: ExperimentConfig, ctx_pre: TaskContext, seed: int, root) -> tuple[np.ndarray, list]:
    """MTL-style BC on the pretrain tasks; returns the best checkpoint by mean success."""
    pre = config.pretrain or {}
    schedule = lifelong.TrainSchedule(int(pre.get("epochs", 50)), int(pre.get("checkpoint_every", 5)),
                                      nn.OptimConfig(**config.optim))
    n = int(pre.get("demos_per_task", config.demos_per_task))
    demos_dir = Path(root) / "pretrain-demos"
    datasets = [lifelong.TaskData(load_or_collect(ctx_pre, t, n, config.demo_noise, demos_dir), ctx_pre.embedding(t),
                                  ctx_pre.hyper.window) for t in range(len(ctx_pre.specs))]
    params = nn.init_params(ctx_pre.hyper, np.random.default_rng(np.random.SeedSequence([seed, _INIT])))
    run = lifelong.train_mtl(params, datasets, schedule, seed)
    rollouts = int(pre.get("rollouts", config.rollouts))
    curve = []
    for ck in run.checkpoints:
        rates = [evaluate(ctx_pre, params.with_flat(ck.flat), t, seed, ck.epoch, rollouts) for t in range(len(datasets))]
        curve.append([ck.epoch, float(np.mean(rates))])
    # epoch 0 is the untrained init, so it is never a pretraining outcome
    best = max(range(1, len(curve)), key=lambda i: (curve[i][1], -i))
    return run.checkpoints[best].flat, curve


def run_pretrain_study(config: ExperimentConfig, root) -> PretrainStudy:
    if not config.pretrain:
        raise ConfigError("config has no pretrain section")
    suite = resolve_suite(config.suite)
    pre_suite = resolve_suite(config.pretrain["suite"])
    lifelong_texts = {serialize_problem(s) for s in suite.specs}
    if any(serialize_problem(s) in lifelong_texts for s in pre_suite.specs):
        raise ConfigError("pretrain suite overlaps the lifelong suite")
    ctx = build_context(config, suite, pre_suite)
    ctx_pre = TaskContext(list(pre_suite.specs), list(pre_suite.object_orders), ctx.layout, ctx.hyper, 0, ctx.sim)
    scratch_cfg = replace(config, pretrain=None)
    scratch_records, pre_records, curves = [], [], []
    differs = True
    for seed in config.seeds:
        scratch_records.append(run_seed(scratch_cfg, seed, root, suite=suite, ctx=ctx))
        init, curve = pretrain(config, ctx_pre, seed, root)
        curves.append({"seed": seed, "curve": curve})
        scratch_init = _init_params(ctx, seed, None).flat
        differs = differs and not np.array_equal(init, scratch_init)
        pre_records.append(run_seed(config, seed, root, suite=suite, ctx=ctx, init=init))
    study = PretrainStudy(
        LifelongResult(scratch_records, metrics.aggregate_seeds([r.report for r in scratch_records])),
        LifelongResult(pre_records, metrics.aggregate_seeds([r.report for r in pre_records])),
        curves,
        differs,
    )
    _write_json(Path(root) / f"pretrain-{config.digest()}.json", study.summary())
    return study


# ---------------------------------------------------------------------------
# reports


def table_rows(records: Sequence[RunRecord]):
    groups: dict[tuple[str, str], list] = {}
    for r in records:
        groups.setdefault((r.regime, r.suite), []).append(r.report)
    return [(regime, suite, metrics.aggregate_seeds(reps)) for (regime, suite), reps in sorted(groups.items())]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def svg_lines(series: Sequence[tuple[str, Sequence[tuple[float, float]]]], title: str, xlabel: str, ylabel: str,
              width: int = 480, height: int = 320) -> str:
    """A minimal line chart; each series is ``(label, [(x, y), ...])``."""
    pad = 48
    xs = [x for _, pts in series for x, _ in pts] or [0.0, 1.0]
    ys = [y for _, pts in series for _, y in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2})">'
        f"{escape(ylabel)}</text>",
        f'<text x="{pad - 4}" y="{py(y0) + 4:.1f}" text-anchor="end" font-size="10">{y0:g}</text>',
        f'<text x="{pad - 4}" y="{py(y1) + 4:.1f}" text-anchor="end" font-size="10">{y1:g}</text>',
        f'<text x="{px(x0):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x0:g}</text>',
        f'<text x="{px(x1):.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x1:g}</text>',
    ]
    for n, (label, pts) in enumerate(series):
        color = _PALETTE[n % len(_PALETTE)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * n}" font-size="10" fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def lifetime_curves(record: RunRecord) -> list[tuple[str, list[tuple[float, float]]]]:
    """Success on each task at every later stage of the run (best checkpoint on its own stage)."""
    m = record.evalmatrix
    out = []
    for k in range(m.K):
        best = max(m.diagonal(k))
        pts = [(float(k + 1), best)] + [(float(t + 1), m.off_diagonal(t, k)) for t in range(k + 1, m.K)]
        out.append((f"task {record.order[k]}", pts))
    return out


def write_report(records: Sequence[RunRecord], directory) -> list[Path]:
    """Metric table CSV plus lifetime and loss-vs-success SVGs for each record."""
    if not records:
        raise ValueError("need at least one record")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "metrics_table.csv"]
    _write_text(paths[0], metrics.table_csv(table_rows(records)))
    for r in records:
        stem = f"{r.regime}_seed{r.seed}"
        p = directory / f"{stem}_lifetime.svg"
        _write_text(p, svg_lines(lifetime_curves(r), f"{r.regime} seed {r.seed}", "tasks learned", "success rate"))
        paths.append(p)
        loss = [(f"task {t['task']} loss", list(zip(map(float, t["epochs"]), t["losses"]))) for t in r.tasks]
        succ = [(f"task {t['task']} success", list(zip(map(float, t["epochs"]), t["rates"]))) for t in r.tasks]
        p = directory / f"{stem}_loss_success.svg"
        _write_text(p, _side_by_side(
            svg_lines(loss, "training loss", "epoch", "NLL"),
            svg_lines(succ, "success rate", "epoch", "success"),
        ))
        paths.append(p)
    return paths


def _side_by_side(left: str, right: str, width: int = 480, height: int = 320) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * width}" height="{height}">\n'
        f'<g>{left}</g>\n<g transform="translate({width},0)">{right}</g>\n</svg>\n'
    )
