"""Lifelong behavioural-cloning regimes: SeqL, ER, EWC, PackNet and MTL.

Every regime trains one task at a time through :meth:`Regime.train_task`,
which returns the same checkpoint schedule (epoch 0 and every
``checkpoint_every`` epochs up to ``epochs``).  The harness evaluates those
checkpoints, picks the best one, and hands it back via
:meth:`Regime.finish_task`, where regimes update their memory (replay buffer,
Fisher estimate, PackNet masks).  :meth:`Regime.eval_params` gives the
parameters used to evaluate an earlier task.

Randomness is drawn from generators seeded by ``(seed, task, stream)`` so a
run can resume after any finished task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import (
    AdamState,
    OptimConfig,
    PolicyParams,
    adam_cosine_step,
    backward,
    forward,
    layout_for,
    nll_per_sample,
    per_sample_grads,
)
from .world import Trajectory

REGIMES = ("seql", "er", "ewc", "packnet", "mtl")

# rng stream tags
_TRAIN, _REPLAY, _EVICT, _FINETUNE = 1, 2, 3, 4


class CapacityExhausted(RuntimeError):
    pass


def task_rng(seed: int, task: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, task, stream]))


# ---------------------------------------------------------------------------
# training data


class TaskData:
    """Windows and actions for one task, gathered lazily from stored frames.

    Row 0 of ``frames`` is the all-zero padding frame; ``index[n]`` lists the
    ``window`` frame rows ending at sample ``n``.
    """

    def __init__(self, demos: Sequence[Trajectory], embedding, window: int):
        if not demos:
            raise ValueError("empty demo set")
        emb = np.asarray(embedding, dtype=np.float64)
        rows = [np.zeros((1, len(demos[0].observations[0]) + emb.size))]
        index, actions, traj_of, starts, lengths = [], [], [], [], []
        next_row = 1
        n = 0
        for ti, traj in enumerate(demos):
            T = len(traj.actions)
            if T == 0:
                raise ValueError("demo with no actions")
            feats = np.asarray(traj.observations[:T], dtype=np.float64)
            rows.append(np.concatenate([feats, np.broadcast_to(emb, (T, emb.size))], axis=1))
            steps = np.arange(T)
            offs = steps[:, None] - np.arange(window - 1, -1, -1)[None, :]
            index.append(np.where(offs >= 0, next_row + offs, 0))
            actions.append(np.asarray(traj.actions, dtype=np.float64))
            traj_of.append(np.full(T, ti))
            starts.append(n)
            lengths.append(T)
            next_row += T
            n += T
        self.frames = np.concatenate(rows)
        self.index = np.concatenate(index)
        self.actions = np.concatenate(actions)
        self.traj_of = np.concatenate(traj_of)
        self.traj_start = np.array(starts)
        self.traj_len = np.array(lengths)
        self.window = window

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def n_trajectories(self) -> int:
        return len(self.traj_len)

    def windows(self, sel) -> np.ndarray:
        idx = self.index[sel]
        return self.frames[idx].reshape(len(idx), -1)

    def batch(self, sel):
        return self.windows(sel), self.actions[sel]

    def sample_index(self, traj: int, step: int) -> int:
        return int(self.traj_start[traj] + step)


def dataset_loss(params: PolicyParams, data: TaskData, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), chunk):
        sel = np.arange(s, min(len(data), s + chunk))
        w, a = data.batch(sel)
        total += float(np.sum(nll_per_sample(forward(params, w), a)))
    return total / len(data)


# ---------------------------------------------------------------------------
# the shared BC loop


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 50
    checkpoint_every: int = 5
    optim: OptimConfig = OptimConfig()

    def __post_init__(self):
        if self.epochs < 1 or self.checkpoint_every < 1 or self.epochs % self.checkpoint_every:
            raise ValueError("epochs must be a positive multiple of checkpoint_every")

    @property
    def checkpoint_epochs(self) -> tuple[int, ...]:
        return tuple(range(0, self.epochs + 1, self.checkpoint_every))


@dataclass
class Checkpoint:
    epoch: int
    flat: np.ndarray
    loss: float


@dataclass
class TaskRun:
    checkpoints: list[Checkpoint]
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> list[int]:
        return [c.epoch for c in self.checkpoints]

    def at(self, epoch: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.epoch == epoch:
                return c
        raise KeyError(epoch)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def bc_loop(
    params: PolicyParams,
    data: TaskData,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    trainable: Optional[np.ndarray] = None,
    extra: Optional[Callable[[np.ndarray], tuple[float, np.ndarray]]] = None,
    replay: Optional[Callable[[], tuple[np.ndarray, np.ndarray]]] = None,
    batches: Optional[Callable[[np.random.Generator], list]] = None,
    checkpoints: bool = True,
) -> TaskRun:
    """Minibatch BC with Adam on a cosine schedule spanning the whole run.

    ``extra(flat)`` adds a (loss, gradient) term; ``replay()`` supplies extra
    (windows, actions) concatenated onto each batch; ``batches(rng)`` replaces
    the default shuffled pass over ``data`` and must return a list of
    ``(TaskData, index_array)`` pairs.
    """
    cfg = schedule.optim
    if batches is None:
        def batches(r):
            return [(data, b) for b in _epoch_batches(len(data), cfg.batch_size, r)]
        steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    else:
        steps_per_epoch = None
    flat = params.flat.copy()
    adam = AdamState.zeros(flat.size)
    ckpts = [Checkpoint(0, flat.copy(), dataset_loss(params, data))] if checkpoints else []
    losses: list[float] = []
    t = 0
    total = None
    for epoch in range(1, schedule.epochs + 1):
        plan = batches(rng)
        if total is None:
            total = schedule.epochs * (steps_per_epoch or len(plan))
        ep_loss = 0.0
        for src, sel in plan:
            w, a = src.batch(sel)
            if replay is not None:
                rw, ra = replay()
                if len(ra):
                    w = np.concatenate([w, rw])
                    a = np.concatenate([a, ra])
            loss, g = backward(params.with_flat(flat), w, a)
            if extra is not None:
                pl, pg = extra(flat)
                loss += pl
                g = g + pg
            if trainable is not None:
                g = np.where(trainable, g, 0.0)
            flat = adam_cosine_step(adam, flat, g, t, total, cfg, trainable)
            t += 1
            ep_loss += loss
        losses.append(ep_loss / len(plan))
        if checkpoints and epoch % schedule.checkpoint_every == 0:
            ckpts.append(Checkpoint(epoch, flat.copy(), losses[-1]))
    if not checkpoints:
        ckpts.append(Checkpoint(schedule.epochs, flat.copy(), losses[-1]))
    return TaskRun(ckpts, losses)


# ---------------------------------------------------------------------------
# regimes


class Regime:
    name = "base"

    def train_task(self, k: int, params: PolicyParams, data: TaskData, schedule: TrainSchedule, seed: int) -> TaskRun:
        return bc_loop(params, data, schedule, task_rng(seed, k, _TRAIN))

    def finish_task(self, k: int, params: PolicyParams, data: TaskData, schedule: TrainSchedule, seed: int) -> PolicyParams:
        """Fold the chosen checkpoint of task ``k`` into regime memory; returns the params to carry on with."""
        return params

    def eval_params(self, params: PolicyParams, j: int) -> PolicyParams:
        return params

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict, datasets: Sequence[TaskData] = ()) -> None:
        pass


class SeqL(Regime):
    name = "seql"


class ReplayBuffer:
    """Capacity-bounded store of ``(task, trajectory)`` references.

    When an insertion overflows, single items are evicted uniformly at random
    from the task holding the most items (lowest task id on ties).
    """

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self.items)

    def quotas(self) -> dict[int, int]:
        q: dict[int, int] = {}
        for task, _ in self.items:
            q[task] = q.get(task, 0) + 1
        return q

    def insert(self, task: int, trajectories: Sequence[int], rng: np.random.Generator) -> None:
        for ti in trajectories:
            self.items.append((task, int(ti)))
            if len(self.items) > self.capacity:
                self._evict(rng)
            assert len(self.items) <= self.capacity

    def _evict(self, rng: np.random.Generator) -> None:
        q = self.quotas()
        victim_task = min(q, key=lambda t: (-q[t], t))
        positions = [i for i, (t, _) in enumerate(self.items) if t == victim_task]
        del self.items[positions[int(rng.integers(len(positions)))]]

    def draw(self, rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
        """``n`` stored trajectories, uniformly with replacement."""
        if not self.items:
            return []
        return [self.items[i] for i in rng.integers(len(self.items), size=n)]


class ER(Regime):
    name = "er"

    def __init__(self, capacity: int = 1000, replay_batch: int = 32):
        self.buffer = ReplayBuffer(capacity)
        self.replay_batch = replay_batch
        self.datasets: dict[int, TaskData] = {}

    def replay_sample(self, rng: np.random.Generator):
        """Replay windows: a uniform stored trajectory, then a uniform step of it."""
        refs = self.buffer.draw(rng, self.replay_batch)
        if not refs:
            return np.zeros((0, 0)), np.zeros((0, 0))
        ws, acts = [], []
        for task, traj in refs:
            d = self.datasets[task]
            i = d.sample_index(traj, int(rng.integers(d.traj_len[traj])))
            w, a = d.batch(np.array([i]))
            ws.append(w)
            acts.append(a)
        return np.concatenate(ws), np.concatenate(acts)

    def train_task(self, k, params, data, schedule, seed):
        if not self.buffer.items:
            return bc_loop(params, data, schedule, task_rng(seed, k, _TRAIN))
        rr = task_rng(seed, k, _REPLAY)
        return bc_loop(params, data, schedule, task_rng(seed, k, _TRAIN), replay=lambda: self.replay_sample(rr))

    def finish_task(self, k, params, data, schedule, seed):
        self.datasets[k] = data
        self.buffer.insert(k, range(data.n_trajectories), task_rng(seed, k, _EVICT))
        return params

    def state_dict(self):
        return {"capacity": self.buffer.capacity, "items": [list(i) for i in self.buffer.items]}

    def load_state_dict(self, state, datasets=()):
        self.buffer = ReplayBuffer(state["capacity"])
        self.buffer.items = [tuple(i) for i in state["items"]]
        self.datasets = dict(enumerate(datasets))


def empirical_fisher(params: PolicyParams, data: TaskData, chunk: int = 32) -> np.ndarray:
    """Mean over demo samples of the squared per-sample log-likelihood gradient."""
    acc = np.zeros(params.flat.size)
    for s in range(0, len(data), chunk):
        sel = np.arange(s, min(len(data), s + chunk))
        w, a = data.batch(sel)
        g = per_sample_grads(params, w, a)
        acc += np.einsum("bp,bp->p", g, g)
    return acc / len(data)


@dataclass
class EwcState:
    anchor: Optional[np.ndarray] = None
    fisher: Optional[np.ndarray] = None
    gamma: float = 0.9
    lam: float = 5e4

    def penalty(self, flat: np.ndarray) -> tuple[float, np.ndarray]:
        """``(lam/2) sum F (theta - theta*)^2`` and its gradient."""
        if self.anchor is None:
            return 0.0, np.zeros_like(flat)
        diff = flat - self.anchor
        fd = self.fisher * diff
        return 0.5 * self.lam * float(np.dot(fd, diff)), self.lam * fd

    def update(self, flat: np.ndarray, fisher_k: np.ndarray) -> None:
        prev = np.zeros_like(fisher_k) if self.fisher is None else self.fisher
        self.fisher = self.gamma * prev + (1.0 - self.gamma) * fisher_k
        self.anchor = flat.copy()


class EWC(Regime):
    name = "ewc"

    def __init__(self, lam: float = 5e4, gamma: float = 0.9):
        self.state = EwcState(gamma=gamma, lam=lam)

    def train_task(self, k, params, data, schedule, seed):
        extra = None
        if self.state.anchor is not None and self.state.lam != 0:
            extra = self.state.penalty
        return bc_loop(params, data, schedule, task_rng(seed, k, _TRAIN), extra=extra)

    def finish_task(self, k, params, data, schedule, seed):
        self.state.update(params.flat, empirical_fisher(params, data))
        return params

    def state_dict(self):
        s = self.state
        return {"gamma": s.gamma, "lam": s.lam, "anchor": s.anchor, "fisher": s.fisher}

    def load_state_dict(self, state, datasets=()):
        self.state = EwcState(state["anchor"], state["fisher"], state["gamma"], state["lam"])


FREE = -1
NOT_PRUNABLE = -2


class PackNetState:
    """Ownership of each parameter: a task id, ``FREE`` or ``NOT_PRUNABLE`` (biases)."""

    def __init__(self, owner: np.ndarray, keep_ratio: float = 0.25, floor: float = 0.01):
        self.owner = owner
        self.keep_ratio = keep_ratio
        self.floor = floor

    @classmethod
    def fresh(cls, hyper, keep_ratio: float = 0.25, floor: float = 0.01) -> "PackNetState":
        lay = layout_for(hyper)
        owner = np.where(lay.weight_mask, FREE, NOT_PRUNABLE).astype(np.int32)
        return cls(owner, keep_ratio, floor)

    @property
    def prunable_count(self) -> int:
        return int(np.sum(self.owner != NOT_PRUNABLE))

    @property
    def free(self) -> np.ndarray:
        return self.owner == FREE

    def mask(self, k: int) -> np.ndarray:
        return self.owner == k

    def trainable(self, k: int) -> np.ndarray:
        t = self.free.copy()
        if k == 0:
            t |= self.owner == NOT_PRUNABLE
        return t

    def prune(self, flat: np.ndarray, k: int, groups: Sequence[slice] = ()) -> np.ndarray:
        """Assign the largest-magnitude ``keep_ratio`` of free weights to task ``k``; zero the rest.

        Ranking is done separately inside each of ``groups`` (weight matrices)
        so layers with small initial scale are not pruned away wholesale.
        """
        groups = list(groups) or [slice(0, flat.size)]
        free = self.free
        plan = []
        remaining = 0
        for g in groups:
            idx = np.arange(flat.size)[g]
            idx = idx[free[g]]
            keep = int(round(self.keep_ratio * idx.size))
            plan.append((idx, keep))
            remaining += idx.size - keep
        if remaining < self.floor * self.prunable_count:
            raise CapacityExhausted(
                f"task {k}: {remaining} free parameters would remain, floor is {self.floor:.2%} of {self.prunable_count}"
            )
        out = flat.copy()
        for idx, keep in plan:
            order = np.argsort(-np.abs(flat[idx]), kind="stable")
            self.owner[idx[order[:keep]]] = k
            out[idx[order[keep:]]] = 0.0
        return out

    def restrict(self, flat: np.ndarray, j: int) -> np.ndarray:
        """Parameters seen by task ``j``: masks ``0..j`` plus biases; other weights read as zero."""
        visible = (self.owner == NOT_PRUNABLE) | ((self.owner >= 0) & (self.owner <= j))
        return np.where(visible, flat, 0.0)


class PackNet(Regime):
    name = "packnet"

    def __init__(self, hyper, keep_ratio: float = 0.25, floor: float = 0.01, finetune_epochs: Optional[int] = None):
        self.state = PackNetState.fresh(hyper, keep_ratio, floor)
        self.finetune_epochs = finetune_epochs
        self.learned = -1

    def train_task(self, k, params, data, schedule, seed):
        if not self.state.free.any():
            raise CapacityExhausted(f"task {k}: no free parameters")
        return bc_loop(params, data, schedule, task_rng(seed, k, _TRAIN), trainable=self.state.trainable(k))

    def finish_task(self, k, params, data, schedule, seed):
        weights = [sl.slice for sl in params.layout.slots if not sl.name.endswith(".b")]
        flat = self.state.prune(params.flat, k, weights)
        epochs = self.finetune_epochs or schedule.epochs
        ft = TrainSchedule(epochs, epochs, schedule.optim)
        tune = self.state.mask(k)
        if k == 0:
            tune = tune | (self.state.owner == NOT_PRUNABLE)
        run = bc_loop(params.with_flat(flat), data, ft, task_rng(seed, k, _FINETUNE), trainable=tune, checkpoints=False)
        self.learned = k
        return params.with_flat(run.checkpoints[-1].flat)

    def eval_params(self, params, j):
        if j > self.learned:
            return params
        return params.with_flat(self.state.restrict(params.flat, j))

    def state_dict(self):
        s = self.state
        return {"owner": s.owner, "keep_ratio": s.keep_ratio, "floor": s.floor, "learned": self.learned,
                "finetune_epochs": self.finetune_epochs}

    def load_state_dict(self, state, datasets=()):
        self.state = PackNetState(np.asarray(state["owner"], dtype=np.int32), state["keep_ratio"], state["floor"])
        self.learned = int(state["learned"])
        self.finetune_epochs = state["finetune_epochs"]


def train_mtl(params: PolicyParams, datasets: Sequence[TaskData], schedule: TrainSchedule, seed: int) -> TaskRun:
    """Joint BC: each batch comes from one task drawn uniformly.

    An epoch has as many steps as one pass over the pooled data would.
    """
    steps = math.ceil(sum(len(d) for d in datasets) / schedule.optim.batch_size)
    bs = schedule.optim.batch_size

    def batches(rng):
        plan = []
        for _ in range(steps):
            d = datasets[int(rng.integers(len(datasets)))]
            plan.append((d, rng.integers(len(d), size=min(bs, len(d)))))
        return plan

    if len(datasets) == 1:
        return bc_loop(params, datasets[0], schedule, task_rng(seed, 0, _TRAIN))
    return bc_loop(params, datasets[0], schedule, task_rng(seed, 0, _TRAIN), batches=batches)


def make_regime(name: str, hyper, options: Optional[dict] = None) -> Regime:
    opts = dict(options or {})
    if name == "seql":
        return SeqL()
    if name == "er":
        return ER(opts.get("capacity", 1000), opts.get("replay_batch", 32))
    if name == "ewc":
        return EWC(opts.get("lam", 5e4), opts.get("gamma", 0.9))
    if name == "packnet":
        return PackNet(hyper, opts.get("keep_ratio", 0.25), opts.get("floor", 0.01), opts.get("finetune_epochs"))
    raise ValueError(f"unknown regime {name!r}; mtl is driven by train_mtl")
