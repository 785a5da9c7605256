"""Procedural task generation.

A task is made from a :class:`BehaviorTemplate` (an instruction pattern with
typed slots plus a goal schema over the same slots) instantiated in a scene
from :data:`SCENES`.  Objects are laid out on a per-scene grid of candidate
cells; each placed object gets a small init region around its cell.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import world
from .task_dsl import GoalFormula, Predicate, ProblemSpec, RegionSpec, serialize_problem, validate

SLOT_TYPES = ("object", "fixture", "container", "articulation", "region")
SUITE_KINDS = ("SPATIAL", "OBJECT", "GOAL", "LONG", "NINETY")
DEFAULT_JITTER = 0.05
FIXTURE_JITTER = 0.02
MAX_ATTEMPTS = 1000


class TaskGenError(ValueError):
    pass


class MissingSlot(TaskGenError):
    pass


class TypeMismatch(TaskGenError):
    pass


class UnsatisfiableTemplate(TaskGenError):
    pass


class UnsatisfiableRecipe(TaskGenError):
    pass


_SLOT_RE = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class BehaviorTemplate:
    id: str
    pattern: str
    slots: Mapping[str, str]
    goal_schema: tuple[tuple[str, tuple[str, ...]], ...]
    # slot -> required fixture/container kind, e.g. {"container": "drawer"}
    constraints: Mapping[str, str] = field(default_factory=dict)
    init_schema: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        in_pattern = set(_SLOT_RE.findall(self.pattern))
        for slot, typ in self.slots.items():
            if typ not in SLOT_TYPES:
                raise ValueError(f"{self.id}: slot {slot} has unknown type {typ}")
        for _, args in self.goal_schema + self.init_schema:
            for arg in args:
                for slot in _SLOT_RE.findall(arg):
                    if slot not in in_pattern:
                        raise ValueError(f"{self.id}: goal slot {slot} missing from pattern")
        if in_pattern != set(self.slots):
            raise ValueError(f"{self.id}: pattern slots {in_pattern} != declared {set(self.slots)}")


def _t(id, pattern, slots, goal, constraints=None, init=()):
    return BehaviorTemplate(id, pattern, slots, tuple(goal), constraints or {}, tuple(init))


DRAWER_REGION = "{fixture}_{articulation}"

TEMPLATES: tuple[BehaviorTemplate, ...] = (
    _t("open_drawer", "open the {articulation} of the {fixture}", {"articulation": "articulation", "fixture": "fixture"},
       [("Open", (DRAWER_REGION,))], {"fixture": "cabinet"}),
    _t("close_drawer", "close the {articulation} of the {fixture}", {"articulation": "articulation", "fixture": "fixture"},
       [("Close", (DRAWER_REGION,))], {"fixture": "cabinet"}, init=[("Open", (DRAWER_REGION,))]),
    _t("put_in_drawer", "put the {object} in the {container}", {"object": "object", "container": "container"},
       [("Open", ("{container}",)), ("In", ("{object}", "{container}"))], {"container": "drawer"}),
    _t("put_in_basket", "put the {object} in the {container}", {"object": "object", "container": "container"},
       [("In", ("{object}", "{container}"))], {"container": "basket"}),
    _t("put_on", "put the {object} on the {region}", {"object": "object", "region": "region"},
       [("On", ("{object}", "{region}"))]),
    _t("turn_on", "turn on the {fixture}", {"fixture": "fixture"}, [("TurnOn", ("{fixture}",))], {"fixture": "stove"}),
    _t("turn_off", "turn off the {fixture}", {"fixture": "fixture"}, [("TurnOff", ("{fixture}",))], {"fixture": "stove"},
       init=[("TurnOn", ("{fixture}",))]),
    _t("put_on_top", "put the {object} on top of the {fixture}", {"object": "object", "fixture": "fixture"},
       [("On", ("{object}", "{fixture}_top_side"))], {"fixture": "cabinet"}),
    _t("pick_place_basket", "pick up the {object} and place it in the {container}", {"object": "object", "container": "container"},
       [("In", ("{object}", "{container}"))], {"container": "basket"}),
    _t("open_and_put", "open the {container} and put the {object} in it", {"container": "container", "object": "object"},
       [("Open", ("{container}",)), ("In", ("{object}", "{container}"))], {"container": "drawer"}),
    _t("put_in_and_close", "put the {object} in the {container} and close it", {"object": "object", "container": "container"},
       [("In", ("{object}", "{container}")), ("Close", ("{container}",))], {"container": "drawer"}),
    _t("turn_on_and_put", "turn on the {fixture} and put the {object} on it", {"fixture": "fixture", "object": "object"},
       [("TurnOn", ("{fixture}",)), ("On", ("{object}", "{fixture}_cook_region"))], {"fixture": "stove"}),
    _t("put_both_in", "put both the {object} and the {object2} in the {container}",
       {"object": "object", "object2": "object", "container": "container"},
       [("In", ("{object}", "{container}")), ("In", ("{object2}", "{container}"))], {"container": "basket"}),
    _t("put_two_on", "put the {object} on the {region} and the {object2} on the {region2}",
       {"object": "object", "region": "region", "object2": "object", "region2": "region"},
       [("On", ("{object}", "{region}")), ("On", ("{object2}", "{region2}"))]),
    _t("put_in_and_turn_on", "put the {object} in the {container} and turn on the {fixture}",
       {"object": "object", "container": "container", "fixture": "fixture"},
       [("In", ("{object}", "{container}")), ("TurnOn", ("{fixture}",))], {"container": "basket", "fixture": "stove"}),
)

TEMPLATE_BY_ID = {t.id: t for t in TEMPLATES}


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    type: str
    offset: tuple[float, float]
    yaw: float
    regions: tuple[str, ...] = ()


@dataclass(frozen=True)
class Scene:
    id: str
    table: str
    fixtures: tuple[FixtureSpec, ...]
    object_vocab: tuple[str, ...]
    # named candidate object cells, table-relative
    cells: tuple[tuple[str, tuple[float, float]], ...]


_GRID_ROWS = (("back", 0.25), ("middle", 0.1), ("front", -0.05))
_GRID_COLS = (("left", -0.3), ("center left", -0.15), ("center", 0.0), ("center right", 0.15))


def _grid(cols=_GRID_COLS, rows=_GRID_ROWS):
    return tuple((f"{r} {c}", (x, y)) for r, y in rows for c, x in cols)


SCENES: dict[str, Scene] = {
    s.id: s
    for s in (
        Scene(
            "kitchen_scene",
            "kitchen_table",
            (
                FixtureSpec("wooden_cabinet_1", "wooden_cabinet", (0.0, -0.3), math.pi,
                            ("top_side", "top_region", "middle_region", "bottom_region")),
                FixtureSpec("flat_stove_1", "flat_stove", (0.32, 0.05), 0.0, ("cook_region",)),
            ),
            ("akita_black_bowl", "plate", "ketchup", "butter", "cream_cheese", "chocolate_pudding"),
            _grid(),
        ),
        Scene(
            "living_room_scene",
            "living_room_table",
            (FixtureSpec("basket_1", "basket", (0.3, -0.25), 0.0, ("contain_region",)),),
            ("alphabet_soup", "cream_cheese", "salad_dressing", "bbq_sauce", "ketchup", "tomato_sauce",
             "butter", "milk", "chocolate_pudding", "orange_juice", "plate"),
            _grid(rows=(("back", 0.3), ("middle", 0.15), ("front", 0.0), ("near", -0.15)),
                  cols=(("left", -0.3), ("center left", -0.15), ("center", 0.0))),
        ),
        Scene(
            "study_scene",
            "study_table",
            (
                FixtureSpec("white_cabinet_1", "white_cabinet", (0.0, -0.3), math.pi,
                            ("top_side", "top_region", "bottom_region")),
                FixtureSpec("basket_1", "basket", (0.32, 0.2), 0.0, ("contain_region",)),
                FixtureSpec("flat_stove_1", "flat_stove", (0.32, -0.05), 0.0, ("cook_region",)),
            ),
            ("akita_black_bowl", "plate", "butter", "milk", "orange_juice"),
            _grid(),
        ),
    )
}


def display(name: str) -> str:
    return re.sub(r"_\d+$", "", name).replace("_", " ")


@dataclass(frozen=True)
class SceneInstance:
    """A scene with concrete object instances, used to resolve template bindings."""

    scene: Scene
    objects: tuple[tuple[str, str], ...]

    def fixture(self, name: str) -> Optional[FixtureSpec]:
        for f in self.scene.fixtures:
            if name in (f.name, f.type):
                return f
        kinds = [f for f in self.scene.fixtures if world.fixture_kind(f.type) == name]
        return kinds[0] if len(kinds) == 1 else None

    def drawers(self):
        for f in self.scene.fixtures:
            if world.fixture_kind(f.type) == "cabinet":
                for r in f.regions:
                    if r != "top_side":
                        yield f, r

    def containers(self, kind: Optional[str] = None) -> list[str]:
        out = []
        if kind in (None, "drawer"):
            out += [f"{f.name}_{r}" for f, r in self.drawers()]
        if kind in (None, "basket"):
            out += [f"{f.name}_{r}" for f in self.scene.fixtures if world.fixture_kind(f.type) == "basket" for r in f.regions]
        return out

    def surfaces(self) -> list[str]:
        out = [o for o, t in self.objects if t in world.SURFACE_OBJECT_TYPES]
        for f in self.scene.fixtures:
            kind = world.fixture_kind(f.type)
            if kind == "cabinet":
                out.append(f"{f.name}_top_side")
            elif kind == "stove":
                out += [f"{f.name}_{r}" for r in f.regions]
        return out

    def candidates(self, slot_type: str, constraint: Optional[str]) -> list[str]:
        """Binding values acceptable for a slot, in canonical order."""
        if slot_type == "object":
            return [o for o, t in self.objects if t not in world.SURFACE_OBJECT_TYPES]
        if slot_type == "fixture":
            return [f.name for f in self.scene.fixtures
                    if constraint is None or world.fixture_kind(f.type) == constraint]
        if slot_type == "container":
            return self.containers(constraint)
        if slot_type == "articulation":
            return sorted({r for _, r in self.drawers()})
        if slot_type == "region":
            return self.surfaces()
        raise TypeMismatch(f"unknown slot type {slot_type}")

    def resolve(self, slot_type: str, value: str, constraint: Optional[str] = None) -> tuple[str, str]:
        """Map a binding value to ``(identifier, display text)``."""
        if slot_type == "object":
            for inst, typ in self.objects:
                if value in (inst, typ) or value == display(inst):
                    matches = [i for i, t in self.objects if value in (i, t) or value == display(i)]
                    if len(matches) > 1 and value != inst:
                        raise TypeMismatch(f"object {value!r} is ambiguous")
                    return inst, display(typ)
            raise TypeMismatch(f"{value!r} is not an object in {self.scene.id}")
        if slot_type == "fixture":
            f = self.fixture(value)
            if f is None:
                raise TypeMismatch(f"{value!r} is not a fixture in {self.scene.id}")
            if constraint and world.fixture_kind(f.type) != constraint:
                raise TypeMismatch(f"{value!r} is not a {constraint}")
            return f.name, display(f.type)
        if slot_type == "articulation":
            region = value if value.endswith("_region") else f"{value}_region"
            if region not in {r for _, r in self.drawers()}:
                raise TypeMismatch(f"{value!r} is not an articulation in {self.scene.id}")
            return region, _drawer_words(region)
        if slot_type == "container":
            names = self.containers(constraint)
            if value in names:
                return value, self._container_words(value)
            stem = value.replace(" ", "_")
            hits = [n for n in names if n.endswith(f"_{stem}_region") or n.endswith(f"_{stem}")
                    or display(self._owner(n).type) == value
                    or (stem == "drawer" and self._owner(n) is not None and world.fixture_kind(self._owner(n).type) == "cabinet")]
            if len(hits) != 1:
                raise TypeMismatch(f"{value!r} does not name exactly one {constraint or 'container'}")
            return hits[0], self._container_words(hits[0])
        if slot_type == "region":
            names = self.surfaces()
            if value in names:
                return value, self._surface_words(value)
            hits = [n for n in names if self._surface_words(n) == value or value in (n.rsplit("_", 1)[0],)]
            for o, t in self.objects:
                if value == t and o in names:
                    hits.append(o)
            if len(hits) != 1:
                raise TypeMismatch(f"{value!r} does not name exactly one surface")
            return hits[0], self._surface_words(hits[0])
        raise TypeMismatch(f"unknown slot type {slot_type}")

    def _owner(self, derived: str) -> Optional[FixtureSpec]:
        for f in self.scene.fixtures:
            if derived.startswith(f.name + "_"):
                return f
        return None

    def _container_words(self, derived: str) -> str:
        f = self._owner(derived)
        region = derived[len(f.name) + 1:]
        if world.fixture_kind(f.type) == "cabinet":
            return f"{_drawer_words(region)} of the {display(f.type)}"
        return display(f.type)

    def _surface_words(self, name: str) -> str:
        f = self._owner(name)
        if f is None:
            return display(dict(self.objects).get(name, name))
        return display(f.type)


def _drawer_words(region: str) -> str:
    stem = region[: -len("_region")] if region.endswith("_region") else region
    return "drawer" if stem == "drawer" else f"{stem.replace('_', ' ')} drawer"


def instantiate(template: BehaviorTemplate, bindings: Mapping[str, str], scene: SceneInstance):
    """Fill a template: returns ``(instruction, goal, init_atoms)``.

    The instruction substitutes each slot's display text; goal and init
    schemas substitute the resolved identifiers.
    """
    ids: dict[str, str] = {}
    words: dict[str, str] = {}
    for slot, typ in template.slots.items():
        if slot not in bindings:
            raise MissingSlot(f"{template.id}: no binding for slot {slot!r}")
        ids[slot], words[slot] = scene.resolve(typ, bindings[slot], template.constraints.get(slot))
    instruction = _SLOT_RE.sub(lambda m: words[m.group(1)], template.pattern)

    def ground(schema):
        return tuple(Predicate(name, tuple(_SLOT_RE.sub(lambda m: ids[m.group(1)], a) for a in args))
                     for name, args in schema)

    return instruction, GoalFormula(ground(template.goal_schema)), ground(template.init_schema)


# ---------------------------------------------------------------------------
# spec assembly


def _region_names(objects: Sequence[tuple[str, str]]) -> dict[str, str]:
    counts: dict[str, int] = {}
    for _, t in objects:
        counts[t] = counts.get(t, 0) + 1
    return {o: (f"{t}_init_region" if counts[t] == 1 else f"{o}_init_region") for o, t in objects}


def assemble_spec(
    scene: Scene,
    objects: Sequence[tuple[str, str]],
    cells: Mapping[str, tuple[float, float]],
    language: str,
    goal: GoalFormula,
    extra_init: Sequence[Predicate] = (),
    jitter: float = DEFAULT_JITTER,
    name: Optional[str] = None,
) -> ProblemSpec:
    regions: list[RegionSpec] = []
    init: list[Predicate] = []
    h = jitter / 2
    for f in scene.fixtures:
        rname = f"{f.type}_init_region"
        x, y = f.offset
        e = FIXTURE_JITTER / 2
        regions.append(RegionSpec(rname, scene.table, ((x - e, y - e, x + e, y + e),), ((f.yaw, f.yaw),)))
        init.append(Predicate("On", (f.name, f"{scene.table}_{rname}")))
    names = _region_names(objects)
    for o, _ in objects:
        x, y = cells[o]
        regions.append(RegionSpec(names[o], scene.table, ((x - h, y - h, x + h, y + h),), ((0.0, 0.0),)))
    for f in scene.fixtures:
        regions.extend(RegionSpec(r, f.name) for r in f.regions)
    init = [Predicate("On", (o, f"{scene.table}_{names[o]}")) for o, _ in objects] + init + list(extra_init)
    interest = []
    for p in goal.conjuncts:
        for a in p.args:
            owner = next((f.name for f in scene.fixtures if a.startswith(f.name + "_")), a)
            if owner not in interest:
                interest.append(owner)
    spec = ProblemSpec(
        name=name or (scene.id.upper() + "_" + re.sub(r"\W+", "_", language)),
        domain="robosuite",
        language=language,
        regions=tuple(regions),
        fixtures=((scene.table, scene.table),) + tuple((f.name, f.type) for f in scene.fixtures),
        objects=tuple(objects),
        objects_of_interest=tuple(interest),
        init_atoms=tuple(init),
        goal=goal,
    )
    issues = validate(spec)
    if issues:
        raise TaskGenError(f"generated spec is invalid: {issues}")
    return spec


def _pick_objects(scene: Scene, template: BehaviorTemplate, rng: np.random.Generator, extra: int = 2):
    n_obj = sum(1 for t in template.slots.values() if t == "object")
    needs_plate = any(t == "region" for t in template.slots.values())
    vocab = [v for v in scene.object_vocab if v not in world.SURFACE_OBJECT_TYPES]
    k = min(len(vocab), n_obj + extra)
    types = [vocab[i] for i in sorted(rng.choice(len(vocab), size=k, replace=False))]
    if needs_plate and "plate" in scene.object_vocab:
        types.append("plate")
    return [(f"{t}_1", t) for t in types]


def _layout(scene: Scene, objects, rng: np.random.Generator) -> dict:
    if len(objects) > len(scene.cells):
        raise UnsatisfiableTemplate(f"{scene.id}: not enough cells for {len(objects)} objects")
    picks = rng.choice(len(scene.cells), size=len(objects), replace=False)
    return {o: scene.cells[int(c)][1] for (o, _), c in zip(objects, picks)}


def _random_bindings(template: BehaviorTemplate, inst: SceneInstance, rng: np.random.Generator) -> dict:
    bindings: dict[str, str] = {}
    used: set[str] = set()
    for slot, typ in template.slots.items():
        options = [c for c in inst.candidates(typ, template.constraints.get(slot)) if c not in used]
        if slot == "articulation" and "fixture" in bindings:
            f = inst.fixture(bindings["fixture"])
            options = [r for r in options if r in f.regions]
        if not options:
            raise UnsatisfiableTemplate(f"{template.id}: no {typ} for slot {slot} in {inst.scene.id}")
        bindings[slot] = options[int(rng.integers(len(options)))]
        used.add(bindings[slot])
    return bindings


def _ordered_slots(template: BehaviorTemplate) -> BehaviorTemplate:
    order = sorted(template.slots, key=lambda s: (s == "articulation", list(template.slots).index(s)))
    return BehaviorTemplate(template.id, template.pattern, {s: template.slots[s] for s in order},
                            template.goal_schema, template.constraints, template.init_schema)


def generate_task(scene_id: str, template: BehaviorTemplate, rng: np.random.Generator,
                  jitter: float = DEFAULT_JITTER) -> ProblemSpec:
    scene = SCENES[scene_id]
    objects = _pick_objects(scene, template, rng)
    inst = SceneInstance(scene, tuple(objects))
    bindings = _random_bindings(_ordered_slots(template), inst, rng)
    language, goal, extra = instantiate(template, bindings, inst)
    cells = _layout(scene, objects, rng)
    return assemble_spec(scene, objects, cells, language, goal, extra, jitter)


def satisfiable(scene_id: str, template: BehaviorTemplate) -> bool:
    scene = SCENES[scene_id]
    objects = [(f"{t}_1", t) for t in scene.object_vocab]
    inst = SceneInstance(scene, tuple(objects))
    for slot, typ in template.slots.items():
        constraint = template.constraints.get(slot)
        same = sum(1 for s2, t2 in template.slots.items() if t2 == typ and template.constraints.get(s2) == constraint)
        if len(inst.candidates(typ, constraint)) < same:
            return False
    if "fixture" in template.slots and "articulation" in template.slots:
        return any(inst.fixture(f).regions and any(r != "top_side" for r in inst.fixture(f).regions)
                   for f in inst.candidates("fixture", template.constraints.get("fixture")))
    n_obj = sum(1 for t in template.slots.values() if t == "object")
    return len(inst.candidates("object", None)) >= n_obj


# ---------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class SuiteRecipe:
    kind: str
    task_count: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SUITE_KINDS:
            raise ValueError(f"unknown suite kind {self.kind}")
        if self.task_count < 1:
            raise ValueError("task_count must be >= 1")


def _spatial(recipe: SuiteRecipe, rng) -> list[ProblemSpec]:
    scene = SCENES["kitchen_scene"]
    objects = [("akita_black_bowl_1", "akita_black_bowl"), ("akita_black_bowl_2", "akita_black_bowl"),
               ("plate_1", "plate")]
    goal = GoalFormula((Predicate("On", ("akita_black_bowl_1", "plate_1")),))
    cells = dict(scene.cells)
    names = [n for n, _ in scene.cells]

    def make():
        a, b, p = (names[int(i)] for i in rng.choice(len(names), size=3, replace=False))
        language = (f"pick up the akita black bowl at the {a} rather than the one at the {b} "
                    f"and place it on the plate")
        layout = {"akita_black_bowl_1": cells[a], "akita_black_bowl_2": cells[b], "plate_1": cells[p]}
        return assemble_spec(scene, objects, layout, language, goal)

    return _distinct(recipe, make)


def _object(recipe: SuiteRecipe, rng) -> list[ProblemSpec]:
    scene = SCENES["living_room_scene"]
    vocab = [v for v in scene.object_vocab if v not in world.SURFACE_OBJECT_TYPES]
    if recipe.task_count > len(vocab):
        raise UnsatisfiableRecipe(f"OBJECT suite supports at most {len(vocab)} tasks")
    objects = [(f"{t}_1", t) for t in vocab]
    layout = _layout(scene, objects, rng)
    order = [objects[int(i)] for i in rng.permutation(len(objects))]
    basket = "basket_1_contain_region"
    template = TEMPLATE_BY_ID["pick_place_basket"]
    inst = SceneInstance(scene, tuple(objects))
    specs = []
    for o, _ in order[: recipe.task_count]:
        language, goal, _ = instantiate(template, {"object": o, "container": basket}, inst)
        specs.append(assemble_spec(scene, objects, layout, language, goal))
    return specs


GOAL_TEMPLATES = ("open_drawer", "put_in_drawer", "put_on", "put_on_top", "turn_on", "turn_on_and_put", "open_and_put")


def _shared_layout_tasks(recipe: SuiteRecipe, rng, scene_id: str, template_ids: Sequence[str],
                         objects: Sequence[tuple[str, str]]) -> list[ProblemSpec]:
    scene = SCENES[scene_id]
    inst = SceneInstance(scene, tuple(objects))
    layout = _layout(scene, objects, rng)
    templates = [_ordered_slots(TEMPLATE_BY_ID[t]) for t in template_ids]

    def make():
        template = templates[int(rng.integers(len(templates)))]
        bindings = _random_bindings(template, inst, rng)
        language, goal, extra = instantiate(template, bindings, inst)
        if extra:
            raise UnsatisfiableTemplate("shared-layout suites need templates without init requirements")
        return assemble_spec(scene, objects, layout, language, goal)

    return _distinct(recipe, make)


def _goal(recipe: SuiteRecipe, rng) -> list[ProblemSpec]:
    objects = [("akita_black_bowl_1", "akita_black_bowl"), ("plate_1", "plate"), ("ketchup_1", "ketchup")]
    return _shared_layout_tasks(recipe, rng, "kitchen_scene", GOAL_TEMPLATES, objects)


# every LONG goal pairs an articulation/switch conjunct with a placement conjunct
LONG_TEMPLATES = ("open_and_put", "put_in_drawer", "put_in_and_close", "turn_on_and_put", "put_in_and_turn_on")
NINETY_TEMPLATES = tuple(t.id for t in TEMPLATES)


def _pool(recipe: SuiteRecipe, rng, template_ids: Sequence[str]) -> list[ProblemSpec]:
    pairs = [(s, t) for s in SCENES for t in template_ids if satisfiable(s, TEMPLATE_BY_ID[t])]

    def make():
        scene_id, tid = pairs[int(rng.integers(len(pairs)))]
        return generate_task(scene_id, TEMPLATE_BY_ID[tid], rng)

    return _distinct(recipe, make)


def _distinct(recipe: SuiteRecipe, make) -> list[ProblemSpec]:
    specs: list[ProblemSpec] = []
    seen: set[str] = set()
    attempts = 0
    while len(specs) < recipe.task_count:
        if attempts >= MAX_ATTEMPTS:
            raise UnsatisfiableRecipe(
                f"{recipe.kind}: only {len(specs)} distinct tasks after {MAX_ATTEMPTS} attempts")
        attempts += 1
        try:
            spec = make()
        except UnsatisfiableTemplate:
            continue
        if spec.language in seen:
            continue
        seen.add(spec.language)
        specs.append(spec)
    return specs


def build_suite(recipe: SuiteRecipe) -> list[ProblemSpec]:
    rng = np.random.default_rng(recipe.seed)
    if recipe.kind == "SPATIAL":
        return _spatial(recipe, rng)
    if recipe.kind == "OBJECT":
        return _object(recipe, rng)
    if recipe.kind == "GOAL":
        return _goal(recipe, rng)
    if recipe.kind == "LONG":
        return _pool(recipe, rng, LONG_TEMPLATES)
    return _pool(recipe, rng, NINETY_TEMPLATES)


def interference_suite(seed: int = 0) -> list[ProblemSpec]:
    """Three tasks with one shared layout that all start by grasping the same bowl.

    Only the destination differs (plate, stove, cabinet top), so the tasks
    compete for the same observations.
    """
    scene = SCENES["kitchen_scene"]
    objects = (("akita_black_bowl_1", "akita_black_bowl"), ("plate_1", "plate"))
    rng = np.random.default_rng(seed)
    layout = _layout(scene, objects, rng)
    inst = SceneInstance(scene, objects)
    specs = []
    for tid, bindings in (
        ("put_on", {"object": "akita_black_bowl_1", "region": "plate_1"}),
        ("put_on", {"object": "akita_black_bowl_1", "region": "flat_stove_1_cook_region"}),
        ("put_on_top", {"object": "akita_black_bowl_1", "fixture": "wooden_cabinet_1"}),
    ):
        language, goal, _ = instantiate(TEMPLATE_BY_ID[tid], bindings, inst)
        specs.append(assemble_spec(scene, list(objects), layout, language, goal))
    return specs


# ---------------------------------------------------------------------------
# suite directories


def suite_layout(specs: Sequence[ProblemSpec]) -> world.ObservationLayout:
    return world.ObservationLayout.for_specs(specs)


def write_suite(directory, specs: Sequence[ProblemSpec], kind: str, seed: int) -> Path:
    """Emit one ``.bddl`` per task plus ``suite.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i, spec in enumerate(specs):
        fname = f"task_{i:03d}.bddl"
        text = serialize_problem(spec)
        (directory / fname).write_text(text, encoding="utf-8")
        tasks.append({
            "index": i,
            "file": fname,
            "name": spec.name,
            "language": spec.language,
            "object_order": list(spec.object_names),
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        })
    manifest = {"kind": kind, "seed": seed, "task_count": len(specs), "layout": suite_layout(specs).to_dict(),
                "tasks": tasks}
    path = directory / "suite.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Suite:
    kind: str
    seed: int
    specs: list
    object_orders: list
    layout: world.ObservationLayout
    directory: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.specs)


def load_suite(directory) -> Suite:
    from .task_dsl import parse_problem

    directory = Path(directory)
    manifest = json.loads((directory / "suite.json").read_text(encoding="utf-8"))
    specs, orders = [], []
    for t in manifest["tasks"]:
        text = (directory / t["file"]).read_text(encoding="utf-8")
        if hashlib.sha256(text.encode()).hexdigest() != t["sha256"]:
            raise ValueError(f"{t['file']}: content does not match suite.json")
        specs.append(parse_problem(text))
        orders.append(tuple(t["object_order"]))
    layout = world.ObservationLayout(**{k: manifest["layout"][k] for k in ("max_objects", "max_articulations", "max_switches")})
    return Suite(manifest["kind"], manifest["seed"], specs, orders, layout, directory)


def make_suite(specs: Sequence[ProblemSpec], kind: str = "CUSTOM", seed: int = 0) -> Suite:
    return Suite(kind, seed, list(specs), [s.object_names for s in specs], suite_layout(specs))
