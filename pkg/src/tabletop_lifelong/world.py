"""Deterministic top-down 2D tabletop world for problem specs.

The workspace is the unit square.  Table-anchored region ranges are offsets
from the table origin at (0.5, 0.5); regions anchored on a fixture or object
are offsets from that entity's pose.  Geometry of fixtures is inferred from
their type name:

* ``*cabinet*``: ranges-free ``*_region`` children are drawers (containers
  with a handle that slides along the facing axis), ``top_side`` is a surface.
* ``*stove*``: a switch knob; ranges-free children are cooking surfaces.
* ``*basket*``: an always-open container.
* ``*table*``: the anchor surface.

There are no contact forces: grasping, releasing, drawer coupling and switch
toggling are triggered by the gripper aperture crossing 0.5.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .task_dsl import GoalFormula, Predicate, ProblemSpec

TABLE_ORIGIN = (0.5, 0.5)
OBJECT_RADIUS = 0.02
PLATE_RADIUS = 0.04
CABINET_HALF = 0.06
SURFACE_HALF = 0.05
HANDLE_OFFSET = 0.07
DRAWER_SPACING = 0.05
DRAWER_TRAVEL = 0.12
DRAWER_DEPTH = 0.05
DRAWER_HALF = 0.03
BASKET_HALF = 0.05
KNOB_OFFSET = 0.07
ACTION_DIM = 3
SURFACE_OBJECT_TYPES = ("plate",)


class WorldError(RuntimeError):
    pass


class PlacementInfeasible(WorldError):
    pass


class NoPlan(WorldError):
    pass


class ExpertUnreliable(WorldError):
    pass


@dataclass(frozen=True)
class SimConfig:
    horizon: int = 150
    max_step: float = 0.02
    grasp_radius: float = 0.03
    open_threshold: float = 0.9
    eval_rollout_count: int = 20
    switch_radius: float = 0.03
    placement_attempts: int = 100
    expert_tolerance: float = 0.004

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("max_step", "grasp_radius", "open_threshold", "switch_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float]
    aperture: float
    held_object: Optional[str]
    held_handle: Optional[str]
    object_poses: tuple[tuple[float, float, float], ...]
    fixture_poses: tuple[tuple[float, float, float], ...]
    articulations: tuple[float, ...]
    switches: tuple[bool, ...]
    contained: tuple[Optional[str], ...]

    def to_dict(self) -> dict:
        return {
            "gripper": list(self.gripper),
            "aperture": self.aperture,
            "held_object": self.held_object,
            "held_handle": self.held_handle,
            "object_poses": [list(p) for p in self.object_poses],
            "fixture_poses": [list(p) for p in self.fixture_poses],
            "articulations": list(self.articulations),
            "switches": list(self.switches),
            "contained": list(self.contained),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            gripper=tuple(d["gripper"]),
            aperture=d["aperture"],
            held_object=d["held_object"],
            held_handle=d["held_handle"],
            object_poses=tuple(tuple(p) for p in d["object_poses"]),
            fixture_poses=tuple(tuple(p) for p in d["fixture_poses"]),
            articulations=tuple(d["articulations"]),
            switches=tuple(bool(s) for s in d["switches"]),
            contained=tuple(d["contained"]),
        )


@dataclass
class Trajectory:
    observations: list
    actions: list
    success: bool
    task_id: int = 0
    initial_state: Optional[WorldState] = None

    def __len__(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------------------
# geometry compiled from a spec


def fixture_kind(type_name: str) -> str:
    t = type_name.lower()
    for kind in ("table", "cabinet", "stove", "basket"):
        if kind in t:
            return kind
    return "static"


def _facing(yaw: float) -> tuple[float, float]:
    # yaw = pi (wall-facing) opens towards +x
    return (-math.cos(yaw), -math.sin(yaw))


@dataclass(frozen=True)
class Drawer:
    name: str
    cabinet: int
    lateral: float


@dataclass(frozen=True)
class SceneModel:
    spec: ProblemSpec
    objects: tuple[str, ...]
    fixtures: tuple[str, ...]
    fixture_kinds: tuple[str, ...]
    drawers: tuple[Drawer, ...]
    baskets: dict
    surfaces: dict
    switches: tuple[int, ...]
    rect_regions: tuple
    surface_objects: tuple[int, ...]
    object_index: dict = field(repr=False)
    fixture_index: dict = field(repr=False)
    drawer_index: dict = field(repr=False)

    # -- poses ------------------------------------------------------------
    def origin(self, state: WorldState, target: str) -> tuple[float, float]:
        if target in self.fixture_index:
            i = self.fixture_index[target]
            if self.fixture_kinds[i] == "table":
                return TABLE_ORIGIN
            p = state.fixture_poses[i]
            return (p[0], p[1])
        if target in self.object_index:
            p = state.object_poses[self.object_index[target]]
            return (p[0], p[1])
        raise KeyError(target)

    def drawer_frame(self, state: WorldState, d: Drawer):
        cx, cy, yaw = state.fixture_poses[d.cabinet]
        fx, fy = _facing(yaw)
        lx, ly = -fy, fx
        base = (cx + fx * HANDLE_OFFSET + lx * d.lateral, cy + fy * HANDLE_OFFSET + ly * d.lateral)
        return base, (fx, fy)

    def handle_position(self, state: WorldState, d: Drawer, frac: Optional[float] = None):
        if frac is None:
            frac = state.articulations[self.drawer_index[d.name]]
        (bx, by), (fx, fy) = self.drawer_frame(state, d)
        return (bx + fx * DRAWER_TRAVEL * frac, by + fy * DRAWER_TRAVEL * frac)

    def drawer_interior(self, state: WorldState, d: Drawer):
        hx, hy = self.handle_position(state, d)
        _, (fx, fy) = self.drawer_frame(state, d)
        return (hx - fx * DRAWER_DEPTH, hy - fy * DRAWER_DEPTH)

    def knob_position(self, state: WorldState, fixture: int):
        x, y, yaw = state.fixture_poses[fixture]
        fx, fy = _facing(yaw)
        return (x + fx * KNOB_OFFSET, y + fy * KNOB_OFFSET)

    def container_center(self, state: WorldState, name: str):
        if name in self.drawer_index:
            return self.drawer_interior(state, self.drawers[self.drawer_index[name]])
        f = self.baskets[name]
        return (state.fixture_poses[f][0], state.fixture_poses[f][1])

    def container_open(self, state: WorldState, name: str, cfg: SimConfig) -> bool:
        if name in self.drawer_index:
            return state.articulations[self.drawer_index[name]] >= cfg.open_threshold
        return True

    def container_accepts(self, state: WorldState, name: str, point, cfg: SimConfig) -> bool:
        if not self.container_open(state, name, cfg):
            return False
        cx, cy = self.container_center(state, name)
        half = DRAWER_HALF if name in self.drawer_index else BASKET_HALF
        return abs(point[0] - cx) <= half and abs(point[1] - cy) <= half

    def surface_box(self, state: WorldState, name: str):
        f, half = self.surfaces[name]
        x, y, _ = state.fixture_poses[f]
        return (x - half, y - half, x + half, y + half)

    def region_rects(self, state: WorldState, region) -> list:
        ox, oy = self.origin(state, region.target)
        return [(ox + a, oy + b, ox + c, oy + d) for a, b, c, d in region.ranges]

    # -- goal-directed geometry -------------------------------------------
    def placement_point(self, state: WorldState, target: str):
        """Where to release an object so that On(obj, target) or In(obj, target) holds."""
        region = self.spec.region(target)
        if region is not None and region.ranges:
            x0, y0, x1, y1 = self.region_rects(state, region)[0]
            return ((x0 + x1) / 2, (y0 + y1) / 2)
        if target in self.surfaces:
            x0, y0, x1, y1 = self.surface_box(state, target)
            return ((x0 + x1) / 2, (y0 + y1) / 2)
        if target in self.drawer_index or target in self.baskets:
            return self.container_center(state, target)
        if target in self.object_index and self.object_index[target] in self.surface_objects:
            p = state.object_poses[self.object_index[target]]
            return (p[0], p[1])
        raise NoPlan(f"no placement geometry for {target}")


@lru_cache(maxsize=512)
def compile_scene(spec: ProblemSpec) -> SceneModel:
    objects = spec.object_names
    fixtures = spec.fixture_names
    kinds = tuple(fixture_kind(t) for _, t in spec.fixtures)
    fixture_index = {n: i for i, n in enumerate(fixtures)}
    drawers: list[Drawer] = []
    baskets: dict = {}
    surfaces: dict = {}
    per_cabinet: dict = {}
    for r in spec.regions:
        if r.ranges or r.target not in fixture_index:
            continue
        f = fixture_index[r.target]
        kind = kinds[f]
        if kind == "cabinet" and r.name != "top_side" and r.name.endswith("_region"):
            per_cabinet.setdefault(f, []).append(r.derived_name)
        elif kind == "cabinet":
            surfaces[r.derived_name] = (f, CABINET_HALF)
        elif kind == "basket":
            baskets[r.derived_name] = f
        elif kind != "table":
            surfaces[r.derived_name] = (f, SURFACE_HALF)
    for f, names in per_cabinet.items():
        n = len(names)
        for k, name in enumerate(names):
            drawers.append(Drawer(name, f, (k - (n - 1) / 2) * DRAWER_SPACING))
    rect_regions = tuple(r for r in spec.regions if r.ranges)
    return SceneModel(
        spec=spec,
        objects=objects,
        fixtures=fixtures,
        fixture_kinds=kinds,
        drawers=tuple(drawers),
        baskets=baskets,
        surfaces=surfaces,
        switches=tuple(i for i, k in enumerate(kinds) if k == "stove"),
        rect_regions=rect_regions,
        surface_objects=tuple(
            i for i, (_, t) in enumerate(spec.objects) if any(s in t for s in SURFACE_OBJECT_TYPES)
        ),
        object_index={n: i for i, n in enumerate(objects)},
        fixture_index=fixture_index,
        drawer_index={d.name: i for i, d in enumerate(drawers)},
    )


# ---------------------------------------------------------------------------
# initial states


def _sample_in_region(region, origin, rng: np.random.Generator):
    rect = region.ranges[0] if len(region.ranges) == 1 else region.ranges[rng.integers(len(region.ranges))]
    x = rng.uniform(rect[0], rect[2])
    y = rng.uniform(rect[1], rect[3])
    yaw = 0.0
    if region.yaw_rotation:
        lo, hi = region.yaw_rotation[0]
        yaw = rng.uniform(lo, hi)
    return (origin[0] + x, origin[1] + y, float(yaw))


def sample_initial_state(spec: ProblemSpec, rng: np.random.Generator, config: SimConfig = SimConfig()) -> WorldState:
    """Draw a state from the problem's initial-state distribution.

    Objects whose centers come closer than two object radii trigger a full
    redraw, up to ``config.placement_attempts`` times.
    """
    m = compile_scene(spec)
    for _ in range(config.placement_attempts):
        state = _draw_once(m, rng)
        free = [
            state.object_poses[i]
            for i, n in enumerate(m.objects)
            if state.contained[i] is None and not _stacked(m, n)
        ]
        if _separated(free):
            return state
    raise PlacementInfeasible(f"{spec.name}: no collision-free placement after {config.placement_attempts} draws")


def _stacked(m: SceneModel, name: str) -> bool:
    for p in m.spec.init_atoms:
        if p.name == "On" and p.args[0] == name and m.spec.region(p.args[1]) is None:
            return True
    return False


def _separated(poses) -> bool:
    for a in range(len(poses)):
        for b in range(a + 1, len(poses)):
            if math.hypot(poses[a][0] - poses[b][0], poses[a][1] - poses[b][1]) < 2 * OBJECT_RADIUS:
                return False
    return True


def _draw_once(m: SceneModel, rng: np.random.Generator) -> WorldState:
    spec = m.spec
    fixture_poses = [(TABLE_ORIGIN[0], TABLE_ORIGIN[1], 0.0)] * len(m.fixtures)
    object_poses: list = [None] * len(m.objects)
    contained: list = [None] * len(m.objects)
    arts = [0.0] * len(m.drawers)
    switches = [False] * len(m.switches)
    placements = {}
    for p in spec.init_atoms:
        if p.name == "On":
            placements[p.args[0]] = p.args[1]
        elif p.name == "Open" and p.args[0] in m.drawer_index:
            arts[m.drawer_index[p.args[0]]] = 1.0
        elif p.name == "TurnOn" and p.args[0] in m.fixture_index:
            f = m.fixture_index[p.args[0]]
            if f in m.switches:
                switches[m.switches.index(f)] = True

    def state():
        return WorldState(
            gripper=(0.5, 0.9),
            aperture=1.0,
            held_object=None,
            held_handle=None,
            object_poses=tuple(p if p is not None else (0.5, 0.5, 0.0) for p in object_poses),
            fixture_poses=tuple(fixture_poses),
            articulations=tuple(arts),
            switches=tuple(switches),
            contained=tuple(contained),
        )

    # fixtures, then objects in rectangle regions, then anything stacked on those
    for i, name in enumerate(m.fixtures):
        region = spec.region(placements.get(name, ""))
        if region is not None and region.ranges:
            fixture_poses[i] = _sample_in_region(region, m.origin(state(), region.target), rng)
    pending = []
    for i, name in enumerate(m.objects):
        region = spec.region(placements.get(name, ""))
        if region is not None and region.ranges and region.target not in m.object_index:
            object_poses[i] = _sample_in_region(region, m.origin(state(), region.target), rng)
        else:
            pending.append(i)
    for p in spec.init_atoms:
        if p.name == "In" and p.args[0] in m.object_index:
            i = m.object_index[p.args[0]]
            contained[i] = p.args[1]
            if i in pending:
                pending.remove(i)
            cx, cy = m.container_center(state(), p.args[1])
            object_poses[i] = (cx, cy, 0.0)
    for _ in range(len(pending)):
        for i in list(pending):
            target = placements.get(m.objects[i])
            if target is None:
                raise PlacementInfeasible(f"object {m.objects[i]} has no initial placement")
            region = spec.region(target)
            if region is not None and region.ranges:
                if region.target in m.object_index and object_poses[m.object_index[region.target]] is None:
                    continue
                object_poses[i] = _sample_in_region(region, m.origin(state(), region.target), rng)
            else:
                if target in m.object_index and object_poses[m.object_index[target]] is None:
                    continue
                x, y = m.placement_point(state(), target)
                object_poses[i] = (x, y, 0.0)
            pending.remove(i)
    if pending:
        raise PlacementInfeasible(f"cyclic placement among {[m.objects[i] for i in pending]}")
    for x, y, _ in object_poses + fixture_poses:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise PlacementInfeasible(f"{spec.name}: placement outside the workspace")
    return state()


# ---------------------------------------------------------------------------
# dynamics


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    return np.clip(np.nan_to_num(a, nan=0.0), -1.0, 1.0)


def step(state: WorldState, action, spec: ProblemSpec, config: SimConfig = SimConfig()) -> WorldState:
    m = compile_scene(spec)
    dx, dy, dg = clamp_action(action)
    gx = min(1.0, max(0.0, state.gripper[0] + config.max_step * dx))
    gy = min(1.0, max(0.0, state.gripper[1] + config.max_step * dy))
    old_ap = state.aperture
    ap = min(1.0, max(0.0, old_ap + dg))
    closing = old_ap > 0.5 >= ap
    opening = old_ap <= 0.5 < ap

    poses = list(state.object_poses)
    arts = list(state.articulations)
    switches = list(state.switches)
    contained = list(state.contained)
    held_object = state.held_object
    held_handle = state.held_handle

    if held_handle is not None:
        d = m.drawers[m.drawer_index[held_handle]]
        k = m.drawer_index[held_handle]
        _, (fx, fy) = m.drawer_frame(state, d)
        along = (gx - state.gripper[0]) * fx + (gy - state.gripper[1]) * fy
        new_frac = min(1.0, max(0.0, arts[k] + along / DRAWER_TRAVEL))
        shift = (new_frac - arts[k]) * DRAWER_TRAVEL
        arts[k] = new_frac
        for i, c in enumerate(contained):
            if c == held_handle:
                x, y, yaw = poses[i]
                poses[i] = (x + fx * shift, y + fy * shift, yaw)
        interim = replace(state, articulations=tuple(arts))
        gx, gy = m.handle_position(interim, d)
        gx = min(1.0, max(0.0, gx))
        gy = min(1.0, max(0.0, gy))
        if opening:
            held_handle = None
    elif held_object is not None:
        i = m.object_index[held_object]
        poses[i] = (gx, gy, poses[i][2])
        if opening:
            held_object = None
            probe = replace(state, articulations=tuple(arts), object_poses=tuple(poses))
            for c in list(m.drawer_index) + list(m.baskets):
                if m.container_accepts(probe, c, (gx, gy), config):
                    contained[i] = c
                    break
    elif closing:
        probe = replace(state, gripper=(gx, gy))
        grabbed = _nearest_object(m, probe, (gx, gy), config)
        if grabbed is not None:
            held_object = m.objects[grabbed]
            contained[grabbed] = None
            poses[grabbed] = (gx, gy, poses[grabbed][2])
        else:
            handle = _nearest_handle(m, probe, (gx, gy), config)
            if handle is not None:
                held_handle = handle.name
                gx, gy = m.handle_position(probe, handle)
            else:
                for s, f in enumerate(m.switches):
                    kx, ky = m.knob_position(state, f)
                    if math.hypot(kx - gx, ky - gy) <= config.switch_radius:
                        switches[s] = not switches[s]
                        break

    return WorldState(
        gripper=(gx, gy),
        aperture=ap,
        held_object=held_object,
        held_handle=held_handle,
        object_poses=tuple(poses),
        fixture_poses=state.fixture_poses,
        articulations=tuple(arts),
        switches=tuple(switches),
        contained=tuple(contained),
    )


def _nearest_object(m: SceneModel, state: WorldState, point, cfg: SimConfig) -> Optional[int]:
    best, best_d = None, cfg.grasp_radius
    for i, (x, y, _) in enumerate(state.object_poses):
        c = state.contained[i]
        if c is not None and not m.container_open(state, c, cfg):
            continue
        d = math.hypot(x - point[0], y - point[1])
        if d <= best_d and (best is None or d < best_d):
            best, best_d = i, d
    return best


def _nearest_handle(m: SceneModel, state: WorldState, point, cfg: SimConfig) -> Optional[Drawer]:
    best, best_d = None, cfg.grasp_radius
    for d in m.drawers:
        hx, hy = m.handle_position(state, d)
        dist = math.hypot(hx - point[0], hy - point[1])
        if dist <= best_d and (best is None or dist < best_d):
            best, best_d = d, dist
    return best


# ---------------------------------------------------------------------------
# predicates


def _inside(rect, x, y) -> bool:
    return rect[0] <= x <= rect[2] and rect[1] <= y <= rect[3]


def holds(pred: Predicate, state: WorldState, spec: ProblemSpec, config: SimConfig = SimConfig()) -> bool:
    m = compile_scene(spec)
    name, args = pred.name, pred.args
    if name in ("Open", "Close"):
        k = m.drawer_index.get(args[0])
        if k is None:
            return False
        f = state.articulations[k]
        return f >= config.open_threshold if name == "Open" else f <= 1.0 - config.open_threshold
    if name in ("TurnOn", "TurnOff"):
        f = m.fixture_index.get(args[0])
        if f is None or f not in m.switches:
            return False
        on = state.switches[m.switches.index(f)]
        return on if name == "TurnOn" else not on
    if name == "In":
        i = m.object_index.get(args[0])
        return i is not None and state.contained[i] == args[1]
    if name == "On":
        return _on(m, state, args[0], args[1])
    return False


def _on(m: SceneModel, state: WorldState, what: str, where: str) -> bool:
    if what in m.object_index:
        i = m.object_index[what]
        if state.held_object == what or state.contained[i] is not None:
            return False
        x, y, _ = state.object_poses[i]
    elif what in m.fixture_index:
        f = m.fixture_index[what]
        if m.fixture_kinds[f] == "table":
            return False
        x, y, _ = state.fixture_poses[f]
    else:
        return False
    region = m.spec.region(where)
    if region is not None and region.ranges:
        if region.target == what:
            return False
        return any(_inside(r, x, y) for r in m.region_rects(state, region))
    if where in m.surfaces:
        if m.fixture_index.get(what) == m.surfaces[where][0]:
            return False
        return _inside(m.surface_box(state, where), x, y)
    j = m.object_index.get(where)
    if j is not None and j in m.surface_objects and where != what and state.held_object != where:
        px, py, _ = state.object_poses[j]
        return math.hypot(px - x, py - y) <= PLATE_RADIUS
    return False


def extract_predicates(state: WorldState, spec: ProblemSpec, config: SimConfig = SimConfig()) -> frozenset:
    m = compile_scene(spec)
    out = set()
    for d in m.drawers:
        for name in ("Open", "Close"):
            p = Predicate(name, (d.name,))
            if holds(p, state, spec, config):
                out.add(p)
    for f in m.switches:
        for name in ("TurnOn", "TurnOff"):
            p = Predicate(name, (m.fixtures[f],))
            if holds(p, state, spec, config):
                out.add(p)
    for i, o in enumerate(m.objects):
        if state.contained[i] is not None:
            out.add(Predicate("In", (o, state.contained[i])))
    targets = [r.derived_name for r in m.rect_regions] + list(m.surfaces) + [m.objects[j] for j in m.surface_objects]
    for what in m.objects + tuple(n for n, k in zip(m.fixtures, m.fixture_kinds) if k != "table"):
        for where in targets:
            if _on(m, state, what, where):
                out.add(Predicate("On", (what, where)))
    return frozenset(out)


def goal_satisfied(goal: GoalFormula, state: WorldState, spec: ProblemSpec, config: SimConfig = SimConfig()) -> bool:
    return all(holds(p, state, spec, config) for p in goal.conjuncts)


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class ObservationLayout:
    """Suite-wide padded observation layout."""

    max_objects: int
    max_articulations: int
    max_switches: int
    embedding_dim: int = 0

    @property
    def feature_dim(self) -> int:
        return 3 + 4 * self.max_objects + self.max_articulations + self.max_switches + self.max_objects + 1

    @property
    def obs_dim(self) -> int:
        return self.feature_dim + self.embedding_dim

    @classmethod
    def for_specs(cls, specs: Iterable[ProblemSpec], embedding_dim: int = 0) -> "ObservationLayout":
        models = [compile_scene(s) for s in specs]
        return cls(
            max(len(m.objects) for m in models),
            max(len(m.drawers) for m in models),
            max(len(m.switches) for m in models),
            embedding_dim,
        )

    def position_indices(self) -> list[int]:
        """Observation entries holding workspace x/y coordinates."""
        idx = [0, 1]
        for slot in range(self.max_objects):
            idx += [3 + 4 * slot, 4 + 4 * slot]
        return idx

    def input_normalizer(self, gain: float = 10.0) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Fixed (offset, scale) centring coordinates on the table and scaling them by ``gain``.

        Raw coordinates vary by a few centimetres between states the expert
        treats differently; the gain makes that resolvable by a small MLP.
        The task embedding gets the same gain so that it is not drowned out
        by the amplified coordinates.
        """
        offset = [0.0] * self.obs_dim
        scale = [1.0] * self.obs_dim
        idx = self.position_indices()
        for ix, iy in zip(idx[::2], idx[1::2]):
            offset[ix], offset[iy] = TABLE_ORIGIN
            scale[ix] = scale[iy] = gain
        for i in range(self.feature_dim, self.obs_dim):
            scale[i] = gain
        return tuple(offset), tuple(scale)

    def to_dict(self) -> dict:
        return {
            "max_objects": self.max_objects,
            "max_articulations": self.max_articulations,
            "max_switches": self.max_switches,
            "embedding_dim": self.embedding_dim,
        }


def ordering_digest(layout: ObservationLayout, object_order: Sequence[str]) -> str:
    blob = json.dumps({"layout": layout.to_dict(), "order": list(object_order)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def observe(
    state: WorldState,
    spec: ProblemSpec,
    task_embedding: Sequence[float] = (),
    layout: Optional[ObservationLayout] = None,
    object_order: Optional[Sequence[str]] = None,
) -> np.ndarray:
    """Flat observation: gripper, object poses, drawers, switches, held one-hot, embedding."""
    m = compile_scene(spec)
    emb = np.asarray(task_embedding, dtype=np.float64).ravel()
    if layout is None:
        layout = ObservationLayout(len(m.objects), len(m.drawers), len(m.switches), emb.size)
    if emb.size != layout.embedding_dim:
        raise ValueError(f"embedding has {emb.size} entries, layout expects {layout.embedding_dim}")
    order = list(object_order) if object_order is not None else list(m.objects)
    if len(order) > layout.max_objects or len(m.drawers) > layout.max_articulations or len(m.switches) > layout.max_switches:
        raise ValueError("spec does not fit the observation layout")
    out = np.zeros(layout.obs_dim)
    out[0], out[1], out[2] = state.gripper[0], state.gripper[1], state.aperture
    base = 3
    held = layout.max_objects
    for slot, name in enumerate(order):
        x, y, yaw = state.object_poses[m.object_index[name]]
        out[base + 4 * slot : base + 4 * slot + 4] = (x, y, math.sin(yaw), math.cos(yaw))
        if state.held_object == name:
            held = slot
    base += 4 * layout.max_objects
    out[base : base + len(m.drawers)] = state.articulations
    base += layout.max_articulations
    out[base : base + len(m.switches)] = [1.0 if s else 0.0 for s in state.switches]
    base += layout.max_switches
    out[base + held] = 1.0
    base += layout.max_objects + 1
    out[base:] = emb
    return out


class Observer:
    """Binds a spec, layout, ordering and embedding into ``state -> vector``."""

    def __init__(self, spec, layout=None, embedding=(), object_order=None):
        self.spec = spec
        self.embedding = np.asarray(embedding, dtype=np.float64)
        m = compile_scene(spec)
        self.layout = layout or ObservationLayout(len(m.objects), len(m.drawers), len(m.switches), self.embedding.size)
        self.object_order = tuple(object_order) if object_order is not None else m.objects

    def __call__(self, state: WorldState) -> np.ndarray:
        return observe(state, self.spec, self.embedding, self.layout, self.object_order)

    def features(self, state: WorldState) -> np.ndarray:
        lay = replace(self.layout, embedding_dim=0)
        return observe(state, self.spec, (), lay, self.object_order)


# ---------------------------------------------------------------------------
# scripted expert


def _toward(state: WorldState, point, cfg: SimConfig):
    v = np.array([point[0] - state.gripper[0], point[1] - state.gripper[1]]) / cfg.max_step
    peak = np.max(np.abs(v))
    if peak > 1.0:
        v = v / peak
    return v


def _at(state: WorldState, point, cfg: SimConfig) -> bool:
    return math.hypot(point[0] - state.gripper[0], point[1] - state.gripper[1]) <= cfg.expert_tolerance


def _ordered_conjuncts(goal: GoalFormula) -> list[Predicate]:
    conj = list(goal.conjuncts)
    out: list[Predicate] = []
    for p in conj:
        if p in out:
            continue
        if p.name == "In":
            opener = Predicate("Open", (p.args[1],))
            if opener in conj and opener not in out:
                out.append(opener)
        out.append(p)
    return out


def _release(state) -> np.ndarray:
    return np.array([0.0, 0.0, 1.0])


def _fetch_and_place(m: SceneModel, state: WorldState, obj: str, point, cfg: SimConfig) -> np.ndarray:
    if state.held_handle is not None:
        return _release(state)
    if state.held_object == obj:
        if _at(state, point, cfg):
            return _release(state)
        dx, dy = _toward(state, point, cfg)
        return np.array([dx, dy, -1.0])
    if state.held_object is not None:
        return _release(state)
    x, y, _ = state.object_poses[m.object_index[obj]]
    if _at(state, (x, y), cfg) and state.aperture > 0.5:
        return np.array([0.0, 0.0, -1.0])
    dx, dy = _toward(state, (x, y), cfg)
    return np.array([dx, dy, 1.0])


def _operate(m: SceneModel, state: WorldState, drawer: Drawer, frac: float, cfg: SimConfig) -> np.ndarray:
    if state.held_object is not None:
        return _release(state)
    if state.held_handle == drawer.name:
        dx, dy = _toward(state, m.handle_position(state, drawer, frac), cfg)
        return np.array([dx, dy, -1.0])
    if state.held_handle is not None:
        return _release(state)
    h = m.handle_position(state, drawer)
    if _at(state, h, cfg) and state.aperture > 0.5:
        return np.array([0.0, 0.0, -1.0])
    dx, dy = _toward(state, h, cfg)
    return np.array([dx, dy, 1.0])


def _press(m: SceneModel, state: WorldState, fixture: int, cfg: SimConfig) -> np.ndarray:
    if state.held_object is not None or state.held_handle is not None:
        return _release(state)
    k = m.knob_position(state, fixture)
    if _at(state, k, cfg) and state.aperture > 0.5:
        return np.array([0.0, 0.0, -1.0])
    dx, dy = _toward(state, k, cfg)
    return np.array([dx, dy, 1.0])


def expert_action(spec: ProblemSpec, state: WorldState, config: SimConfig = SimConfig()) -> Optional[np.ndarray]:
    """Noise-free expert action, or ``None`` when the goal already holds."""
    m = compile_scene(spec)
    for p in _ordered_conjuncts(spec.goal):
        if holds(p, state, spec, config):
            continue
        if p.name in ("Open", "Close") and p.args[0] in m.drawer_index:
            d = m.drawers[m.drawer_index[p.args[0]]]
            return _operate(m, state, d, 1.0 if p.name == "Open" else 0.0, config)
        if p.name in ("TurnOn", "TurnOff") and m.fixture_index.get(p.args[0]) in m.switches:
            return _press(m, state, m.fixture_index[p.args[0]], config)
        if p.name == "In" and p.args[0] in m.object_index and (p.args[1] in m.drawer_index or p.args[1] in m.baskets):
            obj, c = p.args
            if c in m.drawer_index and not m.container_open(state, c, config) and state.held_object != obj:
                return _operate(m, state, m.drawers[m.drawer_index[c]], 1.0, config)
            if c in m.drawer_index and not m.container_open(state, c, config):
                return _release(state)
            return _fetch_and_place(m, state, obj, m.container_center(state, c), config)
        if p.name == "On" and p.args[0] in m.object_index:
            return _fetch_and_place(m, state, p.args[0], m.placement_point(state, p.args[1]), config)
        raise NoPlan(f"unsupported goal conjunct {p}")
    return None


def scripted_expert(
    spec: ProblemSpec,
    state: WorldState,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    config: SimConfig = SimConfig(),
) -> np.ndarray:
    a = expert_action(spec, state, config)
    if a is None:
        a = np.zeros(ACTION_DIM)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        a = a + rng.normal(0.0, noise_sigma, size=ACTION_DIM)
    return clamp_action(a)


# ---------------------------------------------------------------------------
# episodes


class Policy(Protocol):
    def reset(self, n: int) -> None: ...

    def act(self, observations: np.ndarray, states: Sequence[WorldState]) -> np.ndarray: ...


class ExpertPolicy:
    """The scripted expert behind the batched policy interface."""

    def __init__(self, spec: ProblemSpec, noise_sigma: float = 0.0, rng=None, config: SimConfig = SimConfig()):
        self.spec, self.noise_sigma, self.rng, self.config = spec, noise_sigma, rng, config

    def reset(self, n: int) -> None:
        pass

    def act(self, observations, states):
        return np.stack([scripted_expert(self.spec, s, self.noise_sigma, self.rng, self.config) for s in states])


class ZeroPolicy:
    def reset(self, n: int) -> None:
        pass

    def act(self, observations, states):
        return np.zeros((len(states), ACTION_DIM))


def run_expert_episode(
    spec: ProblemSpec,
    initial: WorldState,
    noise_sigma: float,
    rng: Optional[np.random.Generator],
    config: SimConfig = SimConfig(),
    observer: Optional[Observer] = None,
    task_id: int = 0,
) -> Trajectory:
    observer = observer or Observer(spec)
    state = initial
    obs = [observer.features(state)]
    actions = []
    success = goal_satisfied(spec.goal, state, spec, config)
    while not success and len(actions) < config.horizon:
        a = scripted_expert(spec, state, noise_sigma, rng, config)
        state = step(state, a, spec, config)
        actions.append(a)
        obs.append(observer.features(state))
        success = goal_satisfied(spec.goal, state, spec, config)
    return Trajectory(obs, actions, success, task_id, initial)


def collect_demos(
    spec: ProblemSpec,
    n: int,
    rng: np.random.Generator,
    noise_sigma: float = 0.02,
    config: SimConfig = SimConfig(),
    observer: Optional[Observer] = None,
    task_id: int = 0,
) -> list[Trajectory]:
    """Exactly ``n`` successful noisy expert trajectories.

    Failed rollouts are discarded and redrawn; more than ``10 * n`` attempts
    raises :class:`ExpertUnreliable`.
    """
    demos: list[Trajectory] = []
    attempts = 0
    while len(demos) < n:
        if attempts >= 10 * n:
            raise ExpertUnreliable(f"{spec.name}: {len(demos)}/{n} successes after {attempts} attempts")
        attempts += 1
        initial = sample_initial_state(spec, rng, config)
        traj = run_expert_episode(spec, initial, noise_sigma, rng, config, observer, task_id)
        if traj.success:
            demos.append(traj)
    return demos


def evaluate_policy(
    policy: Policy,
    spec: ProblemSpec,
    rollout_count: int,
    rng: Optional[np.random.Generator] = None,
    config: SimConfig = SimConfig(),
    observer: Optional[Observer] = None,
    initial_states: Optional[Sequence[WorldState]] = None,
) -> float:
    """Fraction of rollouts whose goal holds within the horizon.

    All rollouts advance in lockstep so the policy sees one batch per tick.
    """
    if rollout_count == 0:
        return 0.0
    observer = observer or Observer(spec)
    if initial_states is None:
        initial_states = [sample_initial_state(spec, rng, config) for _ in range(rollout_count)]
    states = list(initial_states)
    if len(states) != rollout_count:
        raise ValueError("initial_states length must equal rollout_count")
    done = [goal_satisfied(spec.goal, s, spec, config) for s in states]
    policy.reset(rollout_count)
    for _ in range(config.horizon):
        if all(done):
            break
        obs = np.stack([observer(s) for s in states])
        actions = policy.act(obs, states)
        for k in range(rollout_count):
            if done[k]:
                continue
            states[k] = step(states[k], actions[k], spec, config)
            done[k] = goal_satisfied(spec.goal, states[k], spec, config)
    return sum(done) / rollout_count


# ---------------------------------------------------------------------------
# demo persistence

DEMO_FORMAT_VERSION = 1


def save_demos(path, demos: Sequence[Trajectory], layout: ObservationLayout, object_order: Sequence[str]) -> None:
    header = {
        "format": "demoset",
        "version": DEMO_FORMAT_VERSION,
        "obs_dim": layout.feature_dim,
        "action_dim": ACTION_DIM,
        "ordering_digest": ordering_digest(replace(layout, embedding_dim=0), object_order),
        "layout": replace(layout, embedding_dim=0).to_dict(),
        "object_order": list(object_order),
        "count": len(demos),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in demos:
            rec = {
                "task_id": t.task_id,
                "success": t.success,
                "initial_state": t.initial_state.to_dict() if t.initial_state else None,
                "observations": [[float(v) for v in o] for o in t.observations],
                "actions": [[float(v) for v in a] for a in t.actions],
            }
            fh.write(json.dumps(rec) + "\n")


def load_demos(path, expect_digest: Optional[str] = None) -> tuple[dict, list[Trajectory]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "demoset" or header.get("version") != DEMO_FORMAT_VERSION:
            raise ValueError(f"{path}: not a version-{DEMO_FORMAT_VERSION} demo file")
        if expect_digest is not None and header["ordering_digest"] != expect_digest:
            raise ValueError(f"{path}: observation ordering digest mismatch")
        demos = []
        for line in fh:
            rec = json.loads(line)
            init = WorldState.from_dict(rec["initial_state"]) if rec["initial_state"] else None
            demos.append(
                Trajectory(
                    [np.asarray(o) for o in rec["observations"]],
                    [np.asarray(a) for a in rec["actions"]],
                    rec["success"],
                    rec["task_id"],
                    init,
                )
            )
    if len(demos) != header["count"]:
        raise ValueError(f"{path}: truncated demo file")
    return header, demos


def replay(spec: ProblemSpec, traj: Trajectory, config: SimConfig = SimConfig()):
    """Re-simulate a stored trajectory; yields (t, state, predicates)."""
    if traj.initial_state is None:
        raise ValueError("trajectory has no initial state")
    state = traj.initial_state
    yield 0, state, extract_predicates(state, spec, config)
    for t, a in enumerate(traj.actions, start=1):
        state = step(state, a, spec, config)
        yield t, state, extract_predicates(state, spec, config)
