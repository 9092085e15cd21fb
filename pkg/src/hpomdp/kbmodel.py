"""Two-part knowledge base: general knowledge (robot skills) and specific
knowledge (one environment), in a line-oriented text format.

General document::

    module <name>
    var <name>
    action <name> modifies <var>
    rel <name> <vv|vo> over <var>
    trans <action> rel <rel> <prob>
    trans <action> <from> <to> <prob>
    obs <action> rel <rel> <prob|rest>
    obs <action> <value> <observation> <prob|rest>
    hier over <var>
    exec-forbid <action> when <rel-or-values...>

Specific document::

    values <var> <id>...
    observations <var> <id>...
    abstract <id>...
    pair <rel> <a> <b>
    hpair <child> <parent>
    forbid <var>=<value> ...

Relation pairs are directional ``(from, to)``: an entry ``trans right rel
is_at_right 0.8`` moves from ``a`` to ``b`` for every pair ``(a, b)`` of
``is_at_right``.  The probability token ``rest`` assigns whatever mass the
other entries of the row leave unassigned, which is how boundary mass of an
observation kernel is folded onto its center.

``exec-forbid <action> when <rel>`` forbids the action at every value that
is the first member of a pair of ``rel``; any other token list is read as
literal values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

ROOT = "root"
REST = None  # probability marker for `rest` entries
ROW_TOL = 1e-9


class KBSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class KBError(ValueError):
    """Semantically invalid knowledge base (unknown ids, bad hierarchy...)."""


@dataclass(frozen=True)
class StateVariable:
    name: str
    values: tuple[str, ...] = ()
    observations: tuple[str, ...] = ()


@dataclass(frozen=True)
class Relation:
    name: str
    kind: str  # "vv" or "vo"
    variable: str
    pairs: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class LiteralEntry:
    action: str
    source: str
    target: str
    prob: float | None


@dataclass(frozen=True)
class RelationEntry:
    action: str
    relation: str
    prob: float | None


@dataclass(frozen=True)
class BasicModule:
    name: str
    actions: tuple[tuple[str, str], ...] = ()
    transition_entries: tuple = ()
    observation_entries: tuple = ()


@dataclass(frozen=True)
class ExecutabilityCondition:
    action: str
    relation: str | None = None
    values: tuple[str, ...] = ()


@dataclass(frozen=True)
class StateConstraint:
    forbidden_tuples: tuple[tuple[tuple[str, str], ...], ...] = ()


@dataclass(frozen=True)
class HierarchicalFunction:
    variable: str
    abstract_values: tuple[str, ...] = ()
    parent_pairs: tuple[tuple[str, str], ...] = ()

    @property
    def parent(self) -> dict[str, str]:
        return dict(self.parent_pairs)

    def depth_of(self, ident: str) -> int:
        """Number of parent steps from `ident` to the root."""
        parent = self.parent
        steps, cur = 0, ident
        while cur != ROOT:
            cur = parent[cur]
            steps += 1
            if steps > len(parent) + 1:
                raise KBError(f"cycle in hierarchy above {ident!r}")
        return steps


@dataclass(frozen=True)
class KnowledgeBase:
    variables: tuple[StateVariable, ...] = ()
    relations: tuple[Relation, ...] = ()
    basic_modules: tuple[BasicModule, ...] = ()
    executability: tuple[ExecutabilityCondition, ...] = ()
    constraints: StateConstraint = field(default_factory=StateConstraint)
    hier_fn: HierarchicalFunction | None = None

    # -- lookups -----------------------------------------------------------
    def variable(self, name: str) -> StateVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KBError(f"unknown variable {name!r}")

    def relation(self, name: str) -> Relation:
        for r in self.relations:
            if r.name == name:
                return r
        raise KBError(f"unknown relation {name!r}")

    @property
    def actions(self) -> list[tuple[str, str]]:
        """(action, modified variable) in declaration order."""
        return [pair for m in self.basic_modules for pair in m.actions]

    def modified_variable(self, action: str) -> str:
        for a, v in self.actions:
            if a == action:
                return v
        raise KBError(f"unknown action {action!r}")

    def transition_entries(self, action: str) -> list:
        return [e for m in self.basic_modules for e in m.transition_entries if e.action == action]

    def observation_entries(self, action: str) -> list:
        return [e for m in self.basic_modules for e in m.observation_entries if e.action == action]

    def forbidden_values(self, action: str) -> frozenset[str]:
        out: set[str] = set()
        for cond in self.executability:
            if cond.action != action:
                continue
            if cond.relation is not None:
                out.update(a for a, _ in self.relation(cond.relation).pairs)
            out.update(cond.values)
        return frozenset(out)

    # -- row expansion ----------------------------------------------------
    def transition_row(self, action: str, value: str) -> dict[str, float]:
        """Expanded P(value' | value, action) over the modified variable."""
        return self._expand(self.transition_entries(action), value)

    def observation_row(self, action: str, value: str) -> dict[str, float]:
        """Expanded P(observation | reached value, action)."""
        return self._expand(self.observation_entries(action), value)

    def _expand(self, entries: Iterable, value: str) -> dict[str, float]:
        row: dict[str, float] = {}
        rest_targets: list[str] = []
        for e in entries:
            if isinstance(e, LiteralEntry):
                targets = [e.target] if e.source == value else []
            else:
                rel = self._relation_index().get(e.relation, {})
                targets = rel.get(value, [])
            if e.prob is REST:
                rest_targets.extend(targets)
                continue
            for t in targets:
                row[t] = row.get(t, 0.0) + e.prob
        if rest_targets:
            leftover = max(0.0, 1.0 - sum(row.values())) / len(rest_targets)
            for t in rest_targets:
                row[t] = row.get(t, 0.0) + leftover
        return row

    def _relation_index(self) -> dict[str, dict[str, list[str]]]:
        cache = self.__dict__.get("_rel_index")
        if cache is None:
            cache = {}
            for r in self.relations:
                succ: dict[str, list[str]] = {}
                for a, b in r.pairs:
                    succ.setdefault(a, []).append(b)
                cache[r.name] = succ
            object.__setattr__(self, "_rel_index", cache)
        return cache


# ---------------------------------------------------------------------------
# parsing


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _prob(tok: str, lineno: int) -> float | None:
    if tok == "rest":
        return REST
    try:
        p = float(tok)
    except ValueError:
        raise KBSyntaxError(f"bad probability {tok!r}", lineno) from None
    if not 0.0 <= p <= 1.0:
        raise KBSyntaxError(f"probability {p} outside [0, 1]", lineno)
    return p


def parse_general(text: str) -> KnowledgeBase:
    """Parse a general-knowledge document into a partial knowledge base."""
    modules: list[dict] = []
    variables: dict[str, StateVariable] = {}
    relations: dict[str, Relation] = {}
    action_var: dict[str, str] = {}
    execs: list[ExecutabilityCondition] = []
    hier_var: str | None = None

    def current(lineno):
        if not modules:
            raise KBSyntaxError("declaration before any `module`", lineno)
        return modules[-1]

    def known_action(name, lineno):
        if name not in action_var:
            raise KBSyntaxError(f"undeclared action {name!r}", lineno)

    for lineno, tok in _tokens(text):
        kw, args = tok[0], tok[1:]
        if kw == "module" and len(args) == 1:
            if any(m["name"] == args[0] for m in modules):
                raise KBSyntaxError(f"duplicate module {args[0]!r}", lineno)
            modules.append({"name": args[0], "actions": [], "trans": [], "obs": []})
        elif kw == "var" and len(args) == 1:
            current(lineno)
            if args[0] in variables:
                raise KBSyntaxError(f"duplicate variable {args[0]!r}", lineno)
            variables[args[0]] = StateVariable(args[0])
        elif kw == "action" and len(args) == 3 and args[1] == "modifies":
            mod = current(lineno)
            name, var = args[0], args[2]
            if var not in variables:
                raise KBSyntaxError(f"action {name!r} names undeclared variable {var!r}", lineno)
            if name in action_var:
                if action_var[name] != var:
                    raise KBSyntaxError(f"action {name!r} modifies two variables", lineno)
                raise KBSyntaxError(f"duplicate action {name!r}", lineno)
            action_var[name] = var
            mod["actions"].append((name, var))
        elif kw == "rel" and len(args) == 4 and args[2] == "over":
            name, kind, var = args[0], args[1], args[3]
            if kind not in ("vv", "vo"):
                raise KBSyntaxError(f"relation kind must be vv or vo, got {kind!r}", lineno)
            if var not in variables:
                raise KBSyntaxError(f"relation {name!r} over undeclared variable {var!r}", lineno)
            if name in relations:
                raise KBSyntaxError(f"duplicate relation {name!r}", lineno)
            relations[name] = Relation(name, kind, var)
        elif kw in ("trans", "obs") and len(args) == 4:
            mod = current(lineno)
            action = args[0]
            known_action(action, lineno)
            if args[1] == "rel":
                if args[2] not in relations:
                    raise KBSyntaxError(f"undeclared relation {args[2]!r}", lineno)
                want = "vv" if kw == "trans" else "vo"
                if relations[args[2]].kind != want:
                    raise KBSyntaxError(f"{kw} entry needs a {want} relation, {args[2]!r} is not", lineno)
                entry = RelationEntry(action, args[2], _prob(args[3], lineno))
            else:
                entry = LiteralEntry(action, args[1], args[2], _prob(args[3], lineno))
            mod["trans" if kw == "trans" else "obs"].append(entry)
        elif kw == "hier" and len(args) == 2 and args[0] == "over":
            if hier_var is not None:
                raise KBSyntaxError("more than one `hier` declaration", lineno)
            if args[1] not in variables:
                raise KBSyntaxError(f"hierarchy over undeclared variable {args[1]!r}", lineno)
            hier_var = args[1]
        elif kw == "exec-forbid" and len(args) >= 3 and args[1] == "when":
            known_action(args[0], lineno)
            rest = args[2:]
            if len(rest) == 1 and rest[0] in relations:
                execs.append(ExecutabilityCondition(args[0], relation=rest[0]))
            else:
                execs.append(ExecutabilityCondition(args[0], values=tuple(rest)))
        else:
            raise KBSyntaxError(f"unrecognized declaration {' '.join(tok)!r}", lineno)

    if not modules:
        raise KBSyntaxError("no basic module declared")
    return KnowledgeBase(
        variables=tuple(variables.values()),
        relations=tuple(relations.values()),
        basic_modules=tuple(
            BasicModule(m["name"], tuple(m["actions"]), tuple(m["trans"]), tuple(m["obs"]))
            for m in modules
        ),
        executability=tuple(execs),
        hier_fn=HierarchicalFunction(hier_var) if hier_var else None,
    )


def parse_specific(text: str, general: KnowledgeBase) -> KnowledgeBase:
    """Populate values, relation pairs and hierarchy pairs of `general`."""
    values: dict[str, list[str]] = {}
    observations: dict[str, list[str]] = {}
    abstract: list[str] = []
    pairs: dict[str, list[tuple[str, str]]] = {r.name: list(r.pairs) for r in general.relations}
    hpairs: list[tuple[str, str]] = []
    forbidden: list[tuple[tuple[str, str], ...]] = []
    var_names = {v.name for v in general.variables}

    for lineno, tok in _tokens(text):
        kw, args = tok[0], tok[1:]
        if kw in ("values", "observations") and len(args) >= 1:
            var, ids = args[0], args[1:]
            if var not in var_names:
                raise KBSyntaxError(f"unknown variable {var!r}", lineno)
            target = values if kw == "values" else observations
            bucket = target.setdefault(var, [])
            seen = set(bucket)
            for ident in ids:
                if ident in seen:
                    raise KBSyntaxError(f"duplicate {kw[:-1]} {ident!r} for {var!r}", lineno)
                seen.add(ident)
                bucket.append(ident)
        elif kw == "abstract":
            for ident in args:
                if ident in abstract:
                    raise KBSyntaxError(f"duplicate abstract value {ident!r}", lineno)
                abstract.append(ident)
        elif kw == "pair" and len(args) == 3:
            if args[0] not in pairs:
                raise KBSyntaxError(f"unknown relation {args[0]!r}", lineno)
            pairs[args[0]].append((args[1], args[2]))
        elif kw == "hpair" and len(args) == 2:
            hpairs.append((args[0], args[1]))
        elif kw == "forbid" and args:
            assignment = []
            for item in args:
                var, sep, val = item.partition("=")
                if not sep or var not in var_names:
                    raise KBSyntaxError(f"bad assignment {item!r}", lineno)
                assignment.append((var, val))
            forbidden.append(tuple(assignment))
        else:
            raise KBSyntaxError(f"unrecognized declaration {' '.join(tok)!r}", lineno)

    variables = tuple(
        dataclasses.replace(
            v,
            values=v.values + tuple(values.get(v.name, ())),
            observations=v.observations + tuple(observations.get(v.name, ())),
        )
        for v in general.variables
    )
    relations = []
    for r in general.relations:
        var = next(v for v in variables if v.name == r.variable)
        left = set(var.values)
        right = set(var.values) if r.kind == "vv" else set(var.observations)
        deduped = list(dict.fromkeys(pairs[r.name]))
        for a, b in deduped:
            if a not in left or b not in right:
                raise KBError(f"pair ({a}, {b}) of relation {r.name!r} references an unknown value")
        relations.append(dataclasses.replace(r, pairs=tuple(deduped)))

    hier = general.hier_fn
    if hier is not None:
        hier = dataclasses.replace(hier, abstract_values=tuple(abstract), parent_pairs=tuple(hpairs))
        _check_hierarchy(hier, next(v for v in variables if v.name == hier.variable))
    elif abstract or hpairs:
        raise KBError("hierarchy pairs given but no `hier` declared")

    return dataclasses.replace(
        general,
        variables=variables,
        relations=tuple(relations),
        constraints=StateConstraint(tuple(forbidden)),
        hier_fn=hier,
    )


def _check_hierarchy(hier: HierarchicalFunction, var: StateVariable) -> None:
    nodes = set(var.values) | set(hier.abstract_values)
    parent: dict[str, str] = {}
    for child, par in hier.parent_pairs:
        if child not in nodes:
            raise KBError(f"hierarchy pair ({child}, {par}) references unknown child")
        if par != ROOT and par not in nodes:
            raise KBError(f"hierarchy pair ({child}, {par}) references unknown parent")
        if child in parent and parent[child] != par:
            raise KBError(f"{child!r} has two parents")
        parent[child] = par
    for ident in var.values + hier.abstract_values:
        if ident not in parent:
            raise KBError(f"{ident!r} has no parent: second root")
    for ident in parent:
        seen = {ident}
        cur = parent[ident]
        while cur != ROOT:
            if cur in seen:
                raise KBError(f"cycle in hierarchy through {cur!r}")
            seen.add(cur)
            cur = parent[cur]
    concrete = set(var.values)
    internal = set(parent.values())
    leaves_internal = concrete & internal
    if leaves_internal:
        raise KBError(f"concrete values must be leaves: {sorted(leaves_internal)}")
    childless = [a for a in hier.abstract_values if a not in internal]
    if childless:
        raise KBError(f"abstract values without children: {childless}")


def parse_kb(general_text: str, specific_text: str) -> KnowledgeBase:
    return parse_specific(specific_text, parse_general(general_text))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    location: str
    message: str

    def __str__(self):
        return f"{self.location}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, location: str, message: str) -> None:
        self.violations.append(Violation(location, message))

    def __str__(self):
        return "\n".join(map(str, self.violations)) if self.violations else "ok"


def validate(kb: KnowledgeBase) -> ValidationReport:
    """Check every knowledge-base invariant; violations are returned, not raised."""
    report = ValidationReport()
    var_by_name = {v.name: v for v in kb.variables}
    modified = {v for _, v in kb.actions}

    for v in kb.variables:
        if v.name not in modified:
            report.add(f"var {v.name}", "variable is not modified by any action")
        elif not v.observations:
            report.add(f"var {v.name}", "variable has no observations")
        if not v.values:
            report.add(f"var {v.name}", "variable has no values")

    for cond in kb.executability:
        var = var_by_name[kb.modified_variable(cond.action)]
        bad = set(cond.values) - set(var.values)
        if bad:
            report.add(f"exec-forbid {cond.action}", f"unknown values {sorted(bad)}")
        if cond.relation is not None and kb.relation(cond.relation).variable != var.name:
            report.add(f"exec-forbid {cond.action}", f"relation {cond.relation!r} is over another variable")

    for m in kb.basic_modules:
        for e in m.transition_entries + m.observation_entries:
            var = kb.modified_variable(e.action)
            if isinstance(e, RelationEntry) and kb.relation(e.relation).variable != var:
                report.add(f"module {m.name}", f"entry for {e.action!r} uses relation over another variable")
        for e in m.transition_entries:
            if isinstance(e, LiteralEntry):
                vals = set(var_by_name[kb.modified_variable(e.action)].values)
                if e.source not in vals or e.target not in vals:
                    report.add(f"trans {e.action} {e.source} {e.target}", "unknown value")
        for e in m.observation_entries:
            if isinstance(e, LiteralEntry):
                var = var_by_name[kb.modified_variable(e.action)]
                if e.source not in var.values or e.target not in var.observations:
                    report.add(f"obs {e.action} {e.source} {e.target}", "unknown value or observation")

    for assignment in kb.constraints.forbidden_tuples:
        for var, val in assignment:
            if var not in var_by_name or val not in var_by_name[var].values:
                report.add(f"forbid {var}={val}", "unknown variable or value")

    for action, var_name in kb.actions:
        var = var_by_name[var_name]
        forbidden = kb.forbidden_values(action)
        for value in var.values:
            if value in forbidden:
                continue
            row = kb.transition_row(action, value)
            total = sum(row.values())
            if abs(total - 1.0) > ROW_TOL:
                report.add(f"({action}, {value})", f"row sum {total:g} ≠ 1 for transition")
        for value in var.values:
            total = sum(kb.observation_row(action, value).values())
            if abs(total - 1.0) > ROW_TOL:
                report.add(f"({action}, {value})", f"row sum {total:g} ≠ 1 for observation")

    if kb.hier_fn is None:
        report.add("hier", "no hierarchical function declared")
    else:
        try:
            _check_hierarchy(kb.hier_fn, var_by_name[kb.hier_fn.variable])
        except KBError as exc:
            report.add("hier", str(exc))
    return report


# ---------------------------------------------------------------------------
# serialization


def _fmt_prob(p: float | None) -> str:
    return "rest" if p is REST else repr(p)


def serialize_general(kb: KnowledgeBase) -> str:
    lines = []
    declared_vars: set[str] = set()
    for m in kb.basic_modules:
        lines.append(f"module {m.name}")
        for _, var in m.actions:
            if var not in declared_vars:
                declared_vars.add(var)
                lines.append(f"var {var}")
        for a, var in m.actions:
            lines.append(f"action {a} modifies {var}")
    for v in kb.variables:
        if v.name not in declared_vars:
            lines.append(f"var {v.name}")
    for r in kb.relations:
        lines.append(f"rel {r.name} {r.kind} over {r.variable}")
    for m in kb.basic_modules:
        for kw, entries in (("trans", m.transition_entries), ("obs", m.observation_entries)):
            for e in entries:
                if isinstance(e, RelationEntry):
                    lines.append(f"{kw} {e.action} rel {e.relation} {_fmt_prob(e.prob)}")
                else:
                    lines.append(f"{kw} {e.action} {e.source} {e.target} {_fmt_prob(e.prob)}")
    for c in kb.executability:
        target = c.relation if c.relation is not None else " ".join(c.values)
        lines.append(f"exec-forbid {c.action} when {target}")
    if kb.hier_fn is not None:
        lines.append(f"hier over {kb.hier_fn.variable}")
    return "\n".join(lines) + "\n"


def serialize_specific(kb: KnowledgeBase) -> str:
    lines = []
    for v in kb.variables:
        if v.values:
            lines.append(f"values {v.name} " + " ".join(v.values))
        if v.observations:
            lines.append(f"observations {v.name} " + " ".join(v.observations))
    if kb.hier_fn is not None and kb.hier_fn.abstract_values:
        lines.append("abstract " + " ".join(kb.hier_fn.abstract_values))
    for r in kb.relations:
        lines.extend(f"pair {r.name} {a} {b}" for a, b in r.pairs)
    if kb.hier_fn is not None:
        lines.extend(f"hpair {c} {p}" for c, p in kb.hier_fn.parent_pairs)
    for assignment in kb.constraints.forbidden_tuples:
        lines.append("forbid " + " ".join(f"{var}={val}" for var, val in assignment))
    return "\n".join(lines) + "\n"
