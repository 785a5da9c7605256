"""Scene/task description language (``.bddl`` files).

A problem file is an s-expression::

    (define (problem NAME)
      (:domain robosuite)
      (:language put the bowl on the plate)
      (:regions (REGION (:target OWNER) (:ranges ((x0 y0 x1 y1))) (:yaw_rotation ((lo hi)))))
      (:fixtures NAME - TYPE ...)
      (:objects NAME - TYPE ...)
      (:obj_of_interest NAME ...)
      (:init (On a b) ...)
      (:goal (And (Open d) (In a d))))

Regions are referenced from ``:init``/``:goal`` by their derived name
``<target>_<region>``.  Goals are positive conjunctions only.
"""

from __future__ import annotations

import re

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

PREDICATE_ARITY = {"On": 2, "In": 2, "Open": 1, "Close": 1, "TurnOn": 1, "TurnOff": 1}

SECTIONS = (
    ":domain",
    ":language",
    ":regions",
    ":fixtures",
    ":objects",
    ":obj_of_interest",
    ":init",
    ":goal",
)


class ParseError(ValueError):
    """Raised for any malformed problem text.  ``code`` names the failure class."""

    code = "ParseError"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(f"{self.code} at {line}:{column}: {message}")


class UnbalancedParens(ParseError):
    code = "UnbalancedParens"


class UnknownSection(ParseError):
    code = "UnknownSection"


class MalformedRange(ParseError):
    code = "MalformedRange"


class DuplicateName(ParseError):
    code = "DuplicateName"


class MalformedSection(ParseError):
    code = "MalformedSection"


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple[str, ...]

    def __str__(self) -> str:
        return f"({self.name} {' '.join(self.args)})"


@dataclass(frozen=True)
class GoalFormula:
    conjuncts: tuple[Predicate, ...]

    def __iter__(self):
        return iter(self.conjuncts)

    def __len__(self) -> int:
        return len(self.conjuncts)


@dataclass(frozen=True)
class RegionSpec:
    name: str
    target: str
    ranges: Optional[tuple[tuple[float, float, float, float], ...]] = None
    yaw_rotation: Optional[tuple[tuple[float, float], ...]] = None

    @property
    def derived_name(self) -> str:
        return f"{self.target}_{self.name}"


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: str
    language: str
    regions: tuple[RegionSpec, ...] = ()
    fixtures: tuple[tuple[str, str], ...] = ()
    objects: tuple[tuple[str, str], ...] = ()
    objects_of_interest: tuple[str, ...] = ()
    init_atoms: tuple[Predicate, ...] = ()
    goal: GoalFormula = field(default_factory=lambda: GoalFormula(()))

    def instance_type(self, name: str) -> Optional[str]:
        for inst, typ in self.fixtures + self.objects:
            if inst == name:
                return typ
        return None

    def region(self, derived_name: str) -> Optional[RegionSpec]:
        for r in self.regions:
            if r.derived_name == derived_name:
                return r
        return None

    @property
    def object_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.objects)

    @property
    def fixture_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fixtures)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    name: str
    detail: str = ""


# ---------------------------------------------------------------------------
# s-expression reader


@dataclass
class _Atom:
    text: str
    line: int
    column: int


@dataclass
class _List:
    items: list
    line: int
    column: int


_TOKEN = re.compile(r"[()]|[^\s();]+|;")


def _tokenize(text: str):
    for line, row in enumerate(text.split("\n"), start=1):
        for m in _TOKEN.finditer(row):
            tok = m.group()
            if tok == ";":
                break
            yield tok, line, m.start() + 1


def _read(text: str) -> _List:
    # iterative so adversarial nesting depth cannot blow the interpreter stack
    stack: list[_List] = []
    top: Optional[_List] = None
    last = (1, 1)
    for tok, line, col in _tokenize(text):
        last = (line, col)
        if tok == "(":
            stack.append(_List([], line, col))
        elif tok == ")":
            if not stack:
                raise UnbalancedParens("unexpected ')'", line, col)
            done = stack.pop()
            if stack:
                stack[-1].items.append(done)
            elif top is None:
                top = done
            else:
                raise MalformedSection("more than one top-level form", done.line, done.column)
        else:
            if not stack:
                raise MalformedSection(f"atom {tok!r} outside any form", line, col)
            stack[-1].items.append(_Atom(tok, line, col))
    if stack:
        raise UnbalancedParens("missing ')'", stack[-1].line, stack[-1].column)
    if top is None:
        raise MalformedSection("empty input", *last)
    return top


# ---------------------------------------------------------------------------
# interpretation


def _atom(node, what: str) -> str:
    if not isinstance(node, _Atom):
        raise MalformedSection(f"expected {what}, found a list", node.line, node.column)
    return node.text


def _lower(node) -> Optional[str]:
    return node.text.lower() if isinstance(node, _Atom) else None


def _number(node) -> float:
    if not isinstance(node, _Atom):
        raise MalformedRange("expected a number, found a list", node.line, node.column)
    try:
        value = float(node.text)
    except ValueError:
        raise MalformedRange(f"non-numeric value {node.text!r}", node.line, node.column) from None
    if not math.isfinite(value):
        raise MalformedRange(f"non-finite value {node.text!r}", node.line, node.column)
    return value


def _tuples(node, arity: int, label: str) -> tuple:
    # accepts both ``(:ranges ((a b c d) ...))`` and the flattened ``(:ranges (a b c d))``
    if not isinstance(node, _List):
        raise MalformedRange(f"{label} must be a list", node.line, node.column)
    items = node.items
    if items and all(isinstance(it, _Atom) for it in items):
        items = [node]
    out = []
    for it in items:
        if not isinstance(it, _List):
            raise MalformedRange(f"{label} entry must be a list", it.line, it.column)
        if len(it.items) != arity:
            raise MalformedRange(
                f"{label} entry has {len(it.items)} values, expected {arity}", it.line, it.column
            )
        out.append(tuple(_number(v) for v in it.items))
    return tuple(out)


def _predicate(node) -> Predicate:
    if not isinstance(node, _List) or not node.items:
        raise MalformedSection("expected a predicate (Name arg ...)", node.line, node.column)
    name = _atom(node.items[0], "predicate name")
    args = tuple(_atom(a, "predicate argument") for a in node.items[1:])
    return Predicate(name, args)


def _region(node) -> RegionSpec:
    if not isinstance(node, _List) or not node.items:
        raise MalformedSection("expected a region declaration", node.line, node.column)
    name = _atom(node.items[0], "region name")
    target = None
    ranges = None
    yaw = None
    for sub in node.items[1:]:
        if not isinstance(sub, _List) or not sub.items:
            raise MalformedSection("expected a region attribute", sub.line, sub.column)
        key = _lower(sub.items[0])
        if key == ":target":
            if len(sub.items) != 2:
                raise MalformedSection(":target takes one name", sub.line, sub.column)
            target = _atom(sub.items[1], "target name")
        elif key == ":ranges":
            if len(sub.items) != 2:
                raise MalformedRange(":ranges takes one list", sub.line, sub.column)
            ranges = _tuples(sub.items[1], 4, "range")
        elif key == ":yaw_rotation":
            if len(sub.items) != 2:
                raise MalformedRange(":yaw_rotation takes one list", sub.line, sub.column)
            yaw = _tuples(sub.items[1], 2, "yaw interval")
        else:
            raise UnknownSection(f"unknown region attribute {sub.items[0]!r}", sub.line, sub.column)
    if target is None:
        raise MalformedSection(f"region {name} has no :target", node.line, node.column)
    return RegionSpec(name, target, ranges, yaw)


def _typed_names(items) -> list[tuple[str, str, _Atom]]:
    # ``a b - t c - u`` -> [(a, t), (b, t), (c, u)], each with its source node
    out: list[tuple[str, str, _Atom]] = []
    pending: list[_Atom] = []
    it = iter(items)
    for node in it:
        text = _atom(node, "name")
        if text == "-":
            typ = next(it, None)
            if typ is None or not pending:
                raise MalformedSection("dangling '-' in typed list", node.line, node.column)
            t = _atom(typ, "type name")
            out.extend((p.text, t, p) for p in pending)
            pending = []
        else:
            pending.append(node)
    if pending:
        p = pending[0]
        raise MalformedSection(f"name {p.text!r} has no type", p.line, p.column)
    return out


def parse_problem(text: Union[str, bytes]) -> ProblemSpec:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedSection(f"input is not UTF-8 ({exc.reason})") from None
    root = _read(text)
    items = root.items
    if not items or _lower(items[0]) != "define":
        raise MalformedSection("expected (define ...)", root.line, root.column)
    if len(items) < 2 or not isinstance(items[1], _List) or len(items[1].items) != 2:
        raise MalformedSection("expected (problem NAME)", root.line, root.column)
    head = items[1]
    if _lower(head.items[0]) != "problem":
        raise MalformedSection("expected (problem NAME)", head.line, head.column)
    name = _atom(head.items[1], "problem name")

    seen: set[str] = set()
    domain = ""
    language = ""
    regions: list[RegionSpec] = []
    fixtures: list[tuple[str, str]] = []
    objects: list[tuple[str, str]] = []
    interest: list[str] = []
    init: list[Predicate] = []
    goal: list[Predicate] = []

    for sec in items[2:]:
        if not isinstance(sec, _List) or not sec.items:
            raise MalformedSection("expected a section", sec.line, sec.column)
        key = _lower(sec.items[0])
        if key not in SECTIONS:
            raise UnknownSection(f"unknown section {sec.items[0]!r}", sec.line, sec.column)
        if key in seen:
            raise DuplicateName(f"section {key} given twice", sec.line, sec.column)
        seen.add(key)
        body = sec.items[1:]
        if key == ":domain":
            if len(body) != 1:
                raise MalformedSection(":domain takes one name", sec.line, sec.column)
            domain = _atom(body[0], "domain name")
        elif key == ":language":
            language = " ".join(_atom(b, "instruction word") for b in body)
        elif key == ":regions":
            names: set[str] = set()
            for node in body:
                r = _region(node)
                if r.name in names:
                    raise DuplicateName(f"region {r.name} declared twice", node.line, node.column)
                names.add(r.name)
                regions.append(r)
        elif key in (":fixtures", ":objects"):
            already = {n for n, _ in fixtures + objects}
            for inst, typ, node in _typed_names(body):
                if inst in already:
                    raise DuplicateName(f"instance {inst} declared twice", node.line, node.column)
                already.add(inst)
                (fixtures if key == ":fixtures" else objects).append((inst, typ))
        elif key == ":obj_of_interest":
            interest.extend(_atom(b, "name") for b in body)
        elif key == ":init":
            init.extend(_predicate(b) for b in body)
        elif key == ":goal":
            if len(body) != 1:
                raise MalformedSection(":goal takes one formula", sec.line, sec.column)
            form = body[0]
            if isinstance(form, _List) and form.items and _lower(form.items[0]) == "and":
                goal.extend(_predicate(b) for b in form.items[1:])
            else:
                goal.append(_predicate(form))

    return ProblemSpec(
        name=name,
        domain=domain,
        language=language,
        regions=tuple(regions),
        fixtures=tuple(fixtures),
        objects=tuple(objects),
        objects_of_interest=tuple(interest),
        init_atoms=tuple(init),
        goal=GoalFormula(tuple(goal)),
    )


# ---------------------------------------------------------------------------
# canonical serialization


def _num(x: float) -> str:
    return repr(float(x))


def serialize_problem(spec: ProblemSpec) -> str:
    out = [f"(define (problem {spec.name})", f"  (:domain {spec.domain})"]
    out.append(f"  (:language {spec.language})" if spec.language else "  (:language)")
    if spec.regions:
        out.append("  (:regions")
        for r in spec.regions:
            out.append(f"    ({r.name}")
            out.append(f"      (:target {r.target})")
            if r.ranges is not None:
                out.append("      (:ranges (")
                out.extend(f"        ({' '.join(_num(v) for v in rect)})" for rect in r.ranges)
                out.append("      ))")
            if r.yaw_rotation is not None:
                out.append("      (:yaw_rotation (")
                out.extend(f"        ({_num(lo)} {_num(hi)})" for lo, hi in r.yaw_rotation)
                out.append("      ))")
            out.append("    )")
        out.append("  )")
    else:
        out.append("  (:regions)")
    for key, pairs in ((":fixtures", spec.fixtures), (":objects", spec.objects)):
        if pairs:
            out.append(f"  ({key}")
            out.extend(f"    {inst} - {typ}" for inst, typ in pairs)
            out.append("  )")
        else:
            out.append(f"  ({key})")
    if spec.objects_of_interest:
        out.append("  (:obj_of_interest")
        out.extend(f"    {n}" for n in spec.objects_of_interest)
        out.append("  )")
    else:
        out.append("  (:obj_of_interest)")
    if spec.init_atoms:
        out.append("  (:init")
        out.extend(f"    {p}" for p in spec.init_atoms)
        out.append("  )")
    else:
        out.append("  (:init)")
    out.append("  (:goal")
    out.append("    (" + " ".join(["And", *(str(p) for p in spec.goal.conjuncts)]) + ")")
    out.append("  )")
    out.append(")")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# validation and goal semantics


def _referenceable(spec: ProblemSpec) -> set[str]:
    names = {n for n, _ in spec.fixtures} | {n for n, _ in spec.objects}
    names |= {r.derived_name for r in spec.regions}
    return names


def validate(spec: ProblemSpec) -> list[ValidationIssue]:
    """Return every invariant violation in ``spec``; an empty list means valid."""
    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    for inst, _ in spec.fixtures + spec.objects:
        if inst in seen:
            issues.append(ValidationIssue("DuplicateName", inst, "instance declared twice"))
        seen.add(inst)
    region_names: set[str] = set()
    for r in spec.regions:
        if r.name in region_names:
            issues.append(ValidationIssue("DuplicateName", r.name, "region declared twice"))
        region_names.add(r.name)
        if r.target not in seen:
            issues.append(ValidationIssue("UnresolvedReference", r.target, f"target of region {r.name}"))
        for rect in r.ranges or ():
            x0, y0, x1, y1 = rect
            if x0 > x1 or y0 > y1:
                issues.append(ValidationIssue("MalformedRange", r.name, f"inverted rectangle {rect}"))
        for lo, hi in r.yaw_rotation or ():
            if lo > hi:
                issues.append(ValidationIssue("MalformedRange", r.name, f"inverted yaw interval {(lo, hi)}"))
    known = _referenceable(spec)
    for n in spec.objects_of_interest:
        if n not in known:
            issues.append(ValidationIssue("UnresolvedReference", n, "object of interest"))
    if not spec.goal.conjuncts:
        issues.append(ValidationIssue("EmptyGoal", spec.name, "goal has no conjuncts"))
    for where, atoms in (("init", spec.init_atoms), ("goal", spec.goal.conjuncts)):
        for p in atoms:
            arity = PREDICATE_ARITY.get(p.name)
            if arity is None:
                issues.append(ValidationIssue("UnknownPredicate", p.name, f"in {where}"))
            elif arity != len(p.args):
                issues.append(
                    ValidationIssue("ArityMismatch", p.name, f"{len(p.args)} args in {where}, expected {arity}")
                )
            for a in p.args:
                if a not in known:
                    issues.append(ValidationIssue("UnresolvedReference", a, f"{p} in {where}"))
    return issues


def eval_goal(goal: GoalFormula, state: Iterable[Predicate]) -> bool:
    facts = state if isinstance(state, (set, frozenset)) else set(state)
    return all(p in facts for p in goal.conjuncts)
