"""Grid-navigation benchmark: environment and knowledge-base generation,
flat (FP), two-level (TLP) and hierarchical (HP) planners, and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

DIRECTIONS = {  # action -> (dx, dy, movement relation, blocked relation); y grows downward
    "up": (0, -1, "is_above", "blocked_up"),
    "down": (0, 1, "is_below", "blocked_down"),
    "left": (-1, 0, "is_at_left", "blocked_left"),
    "right": (1, 0, "is_at_right", "blocked_right"),
}
STAY_PROB = 0.1
MOVE_PROB = 0.9
OFFSETS = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass(frozen=True)
class EnvConfig:
    section_dim: int = 2
    room_dim: int = 2
    building_dim: int = 2
    num_buildings: int = 2
    kernel_sigma: float = 0.2
    initial_belief_mode: str = "known-start"
    seed: int = 0

    def __post_init__(self):
        if min(self.section_dim, self.room_dim, self.building_dim, self.num_buildings) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        if self.initial_belief_mode not in ("known-start", "uniform"):
            raise ValueError(f"unknown initial belief mode {self.initial_belief_mode!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.section_dim, self.room_dim, self.building_dim)

    @property
    def building_side(self) -> int:
        return self.section_dim * self.room_dim * self.building_dim


def cell_name(x: int, y: int) -> str:
    return f"c{x}_{y}"


def obs_name(x: int, y: int) -> str:
    return f"z{x}_{y}"


@dataclass
class GridWorld:
    """Cells ``(x, y)`` of side-by-side square buildings; a wall blocks the
    edge between two adjacent cells."""
    config: EnvConfig
    width: int
    height: int
    walls: frozenset            # frozenset of frozenset({cell, cell})
    doors: tuple                # open edges crossing a wall frame
    cells: tuple = ()
    section_of: dict = field(default_factory=dict)
    room_of: dict = field(default_factory=dict)
    building_of: dict = field(default_factory=dict)
    _dist: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.cells = tuple((x, y) for y in range(self.height) for x in range(self.width))
        self.cell_index = {c: i for i, c in enumerate(self.cells)}

    def inside(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def is_open(self, a, b) -> bool:
        return self.inside(a) and self.inside(b) and frozenset((a, b)) not in self.walls

    def move(self, c, action: str):
        """Target cell of `action`, or None if blocked."""
        dx, dy, _, _ = DIRECTIONS[action]
        t = (c[0] + dx, c[1] + dy)
        return t if self.is_open(c, t) else None

    def visible(self, c, dx: int, dy: int) -> bool:
        """Whether the kernel cell at offset (dx, dy) can be perceived from `c`."""
        t = (c[0] + dx, c[1] + dy)
        if not self.inside(t):
            return False
        if dx == 0 or dy == 0:
            return self.is_open(c, t)
        via_x, via_y = (c[0] + dx, c[1]), (c[0], c[1] + dy)
        return (self.is_open(c, via_x) and self.is_open(via_x, t)) or \
            (self.is_open(c, via_y) and self.is_open(via_y, t))

    def adjacency(self) -> sp.csr_matrix:
        rows, cols = [], []
        for c in self.cells:
            for action in DIRECTIONS:
                t = self.move(c, action)
                if t is not None:
                    rows.append(self.cell_index[c])
                    cols.append(self.cell_index[t])
        n = len(self.cells)
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def distances(self) -> np.ndarray:
        if self._dist is None:
            self._dist = csgraph.shortest_path(self.adjacency(), unweighted=True)
        return self._dist

    def render(self) -> str:
        """Text dump: ``|`` and ``_`` mark walls to the right of / below a cell."""
        lines = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                right = "|" if x + 1 < self.width and not self.is_open((x, y), (x + 1, y)) else " "
                below = "_" if y + 1 < self.height and not self.is_open((x, y), (x, y + 1)) else "."
                row.append(below + right)
            lines.append("".join(row))
        return "\n".join(lines)


def shortest_path(world: GridWorld, c1, c2) -> int:
    """Number of moves on the shortest open path between two cells."""
    d = world.distances()[world.cell_index[tuple(c1)], world.cell_index[tuple(c2)]]
    if not np.isfinite(d):
        raise ValueError(f"cells {c1} and {c2} are not connected")
    return int(d)


def _regions(cfg: EnvConfig, c) -> tuple[tuple, tuple, int]:
    x, y = c
    sd, rd = cfg.section_dim, cfg.section_dim * cfg.room_dim
    side = cfg.building_side
    b = x // side
    return (x // sd, y // sd), (x // rd, y // rd), b


def build_world(cfg: EnvConfig) -> GridWorld:
    """Walls on every room frame (building frames included); one door per
    pair of adjacent rooms inside a building and one per pair of adjacent
    buildings, at seeded-random positions along the shared edge."""
    rng = np.random.default_rng(cfg.seed)
    side = cfg.building_side
    width, height = side * cfg.num_buildings, side
    frames: dict[tuple, list] = {}
    for y in range(height):
        for x in range(width):
            for t in ((x + 1, y), (x, y + 1)):
                if t[0] >= width or t[1] >= height:
                    continue
                (_, ra, ba), (_, rb, bb) = _regions(cfg, (x, y)), _regions(cfg, t)
                if ra == rb:
                    continue
                key = ("b", ba, bb) if ba != bb else ("r", ra, rb)
                frames.setdefault(key, []).append(((x, y), t))
    walls, doors = set(), []
    for key in sorted(frames):
        edges = frames[key]
        door = edges[int(rng.integers(len(edges)))]
        doors.append(door)
        walls.update(frozenset(e) for e in edges if e != door)
    world = GridWorld(cfg, width, height, frozenset(walls), tuple(doors))
    sections, rooms = {}, {}
    for c in world.cells:
        s, r, b = _regions(cfg, c)
        world.section_of[c] = sections.setdefault((b, r, s), len(sections))
        world.room_of[c] = rooms.setdefault((b, r), len(rooms))
        world.building_of[c] = b
    return world


def kernel_weights(sigma: float) -> dict[tuple[int, int], float]:
    w = {(dx, dy): math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) for dx, dy in OFFSETS}
    total = sum(w.values())
    return {k: v / total for k, v in w.items()}


def _see_rel(dx: int, dy: int) -> str:
    return f"see_{'m' if dx < 0 else 'p' if dx > 0 else '0'}{abs(dx)}_" \
           f"{'m' if dy < 0 else 'p' if dy > 0 else '0'}{abs(dy)}"


def general_kb_text(sigma: float) -> str:
    weights = kernel_weights(sigma)
    lines = ["# robot navigation skills", "module navigation", "var robot_loc"]
    lines += [f"action {a} modifies robot_loc" for a in DIRECTIONS]
    lines.append("rel current_cell vv over robot_loc")
    for _, _, move, blocked in DIRECTIONS.values():
        lines += [f"rel {move} vv over robot_loc", f"rel {blocked} vv over robot_loc"]
    lines += [f"rel {_see_rel(dx, dy)} vo over robot_loc" for dx, dy in OFFSETS]
    for a, (_, _, move, blocked) in DIRECTIONS.items():
        lines.append(f"trans {a} rel current_cell {STAY_PROB!r}")
        lines.append(f"trans {a} rel {move} {MOVE_PROB!r}")
    for a in DIRECTIONS:
        for dx, dy in OFFSETS:
            p = "rest" if (dx, dy) == (0, 0) else repr(weights[(dx, dy)])
            lines.append(f"obs {a} rel {_see_rel(dx, dy)} {p}")
    lines += [f"exec-forbid {a} when {blocked}" for a, (_, _, _, blocked) in DIRECTIONS.items()]
    lines.append("hier over robot_loc")
    return "\n".join(lines) + "\n"


def specific_kb_text(world: GridWorld) -> str:
    cells = world.cells
    lines = ["values robot_loc " + " ".join(cell_name(*c) for c in cells),
             "observations robot_loc " + " ".join(obs_name(*c) for c in cells)]
    n_sec = max(world.section_of.values()) + 1
    n_room = max(world.room_of.values()) + 1
    n_bld = world.config.num_buildings
    lines.append("abstract " + " ".join([f"S{i + 1}" for i in range(n_sec)] +
                                        [f"R{i + 1}" for i in range(n_room)] +
                                        [f"B{i + 1}" for i in range(n_bld)]))
    for c in cells:
        lines.append(f"pair current_cell {cell_name(*c)} {cell_name(*c)}")
    for action, (_, _, move, blocked) in DIRECTIONS.items():
        for c in cells:
            t = world.move(c, action)
            if t is None:
                lines.append(f"pair {blocked} {cell_name(*c)} {cell_name(*c)}")
            else:
                lines.append(f"pair {move} {cell_name(*c)} {cell_name(*t)}")
    for dx, dy in OFFSETS:
        rel = _see_rel(dx, dy)
        for c in cells:
            if world.visible(c, dx, dy):
                lines.append(f"pair {rel} {cell_name(*c)} {obs_name(c[0] + dx, c[1] + dy)}")
    sec_room, room_bld = {}, {}
    for c in cells:
        lines.append(f"hpair {cell_name(*c)} S{world.section_of[c] + 1}")
        sec_room[world.section_of[c]] = world.room_of[c]
        room_bld[world.room_of[c]] = world.building_of[c]
    lines += [f"hpair S{s + 1} R{r + 1}" for s, r in sorted(sec_room.items())]
    lines += [f"hpair R{r + 1} B{b + 1}" for r, b in sorted(room_bld.items())]
    lines += [f"hpair B{b + 1} root" for b in range(n_bld)]
    return "\n".join(lines) + "\n"


def generate_environment(cfg: EnvConfig) -> tuple[GridWorld, str, str]:
    world = build_world(cfg)
    return world, general_kb_text(cfg.kernel_sigma), specific_kb_text(world)


# ---------------------------------------------------------------------------
# planners


METHODS = ("FP", "TLP", "HP")


@dataclass
class Setup:
    """Everything grounded from one configuration, shared by all planners."""
    config: EnvConfig
    world: GridWorld
    general: str
    specific: str
    kb: object
    bp: object
    sst: object
    neighbors: object

    def state_of(self, c) -> int:
        return self.bp.pomdp.state_index[(cell_name(*c),)]

    def cell_of(self, s: int):
        name = self.bp.pomdp.states[s][0]
        x, y = name[1:].split("_")
        return int(x), int(y)

    def leaf(self, c) -> tuple:
        return (cell_name(*c),)


def build_setup(cfg: EnvConfig) -> Setup:
    from .grounding import build_bottom, neighbor_pairs_bottom
    from .hierarchy import build_sst, lift_neighbors
    from .kbmodel import parse_kb
    world, general, specific = generate_environment(cfg)
    kb = parse_kb(general, specific)
    bp = build_bottom(kb)
    sst = build_sst(kb, bp)
    neighbors = lift_neighbors(sst, neighbor_pairs_bottom(kb, bp))
    return Setup(cfg, world, general, specific, kb, bp, sst, neighbors)


@dataclass(frozen=True)
class Task:
    index: int
    initial: tuple
    goal: tuple
    seed: int


@dataclass
class RunRecord:
    method: str
    config: str
    task: int
    initial: tuple
    goal: tuple
    success: bool
    actions: int
    sp_initial: int
    sp_final: int
    planning_seconds: float
    init_seconds: float
    reason: str = ""

    COLUMNS = ("config", "method", "task", "initial", "goal", "success", "actions",
               "sp_initial", "sp_final", "reason")
    TIMING_COLUMNS = ("config", "method", "task", "planning_seconds", "init_seconds")

    def row(self) -> list[str]:
        return [self.config, self.method, str(self.task), cell_name(*self.initial),
                cell_name(*self.goal), "1" if self.success else "0", str(self.actions),
                str(self.sp_initial), str(self.sp_final), self.reason]

    def timing_row(self) -> list[str]:
        return [self.config, self.method, str(self.task), f"{self.planning_seconds:.6f}",
                f"{self.init_seconds:.6f}"]


def initial_belief(setup: Setup, task: Task) -> np.ndarray:
    n = setup.bp.pomdp.n_states
    if setup.config.initial_belief_mode == "uniform":
        return np.full(n, 1.0 / n)
    b = np.zeros(n)
    b[setup.state_of(task.initial)] = 1.0
    return b


def _record(method: str, setup: Setup, task: Task, env, report, planning: float,
            init: float, label: str) -> RunRecord:
    final = setup.cell_of(env.true_state)
    return RunRecord(
        method=method, config=label, task=task.index, initial=task.initial, goal=task.goal,
        success=final == tuple(task.goal) and not report.failed,
        actions=report.concrete_actions,
        sp_initial=shortest_path(setup.world, task.initial, task.goal),
        sp_final=shortest_path(setup.world, final, task.goal),
        planning_seconds=planning, init_seconds=init, reason=report.reason)


def _run_local(setup: Setup, local, policy, env, B, report, budgets):
    """Execute one cell-level policy in place of a hierarchy."""
    from .executive import _Run

    class _Flat:  # the executive only needs the bottom POMDP and the SST here
        bp, sst = setup.bp, setup.sst

    run = _Run(_Flat, env, B, budgets, report)
    action, _ = run.execute(local, policy)
    return action, run.B


def run_fp(setup: Setup, task: Task, solver=None, label: str = "") -> RunRecord:
    """Flat POMDP over every cell with a goal-based reward, solved per task."""
    from .executive import Budgets, ExecutionError, ExecutionReport, SimulatedEnvironment, \
        build_global_belief
    from .hierarchy import build_local_pomdp, derive_seed
    from .pbvi import SolverParams, solve
    import dataclasses
    import time
    solver = solver or SolverParams()
    sst, depth = setup.sst, setup.sst.depth
    b0 = initial_belief(setup, task)
    t0 = time.perf_counter()
    local = build_local_pomdp(setup.bp.pomdp, None, depth, list(sst.nodes[depth]),
                              [setup.leaf(task.goal)], setup.neighbors, "lp", with_extra=False,
                              node_order=sst.index[depth], require_actions=False)
    # a standard point-based solve: belief points are grown from b0 only
    seeds = np.concatenate([b0, np.zeros(local.pomdp.n_states - len(b0))])[None]
    # enough expansion rounds to fill the same point budget as the other planners
    rounds = max(solver.expansions, int(np.ceil(np.log2(solver.belief_points))) + 1)
    policy = solve(local.pomdp, seeds,
                   dataclasses.replace(solver, expansions=rounds,
                                       seed=derive_seed(solver.seed, "fp", task.seed)))
    planning = time.perf_counter() - t0
    env = SimulatedEnvironment(setup.bp.pomdp, setup.state_of(task.initial), task.seed)
    report = ExecutionReport()
    try:
        _run_local(setup, local, policy, env, build_global_belief(b0, sst), report, Budgets())
    except ExecutionError as exc:
        report.failed, report.reason = True, str(exc)
    return _record("FP", setup, task, env, report, planning, 0.0, label)


@dataclass
class TwoLevel:
    """Building-to-building policies of the two-level planner."""
    setup: Setup
    actions: dict          # (building node, building node) -> (LocalModel, policy)
    solver: object
    init_seconds: float = 0.0

    def buildings_path(self, start: tuple, goal: tuple) -> list[tuple]:
        prev = {start: None}
        frontier = [start]
        while frontier:
            nxt = []
            for b in frontier:
                for t in self.setup.neighbors.neighbors(1, b, self.setup.sst.index[1]):
                    if t not in prev and (b, t) in self.actions:
                        prev[t] = b
                        nxt.append(t)
            frontier = nxt
        if goal not in prev:
            raise ValueError(f"no building path from {start} to {goal}")
        path = [goal]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return path[::-1]


def _leaves_under(sst, node: tuple) -> list[tuple]:
    nodes = [node]
    for _ in range(sst.height_of(node), sst.depth):
        nodes = [c for n in nodes for c in sst.children_of(n)]
    return nodes


def build_two_level(setup: Setup, solver=None) -> TwoLevel:
    """Init phase: one cell-level policy per pair of neighboring buildings."""
    from .hierarchy import build_local_pomdp, derive_seed, local_seed_beliefs, node_name
    from .pbvi import SolverParams, solve
    import dataclasses
    import time
    solver = solver or SolverParams()
    sst, depth = setup.sst, setup.sst.depth
    t0 = time.perf_counter()
    actions = {}
    for b in sst.nodes[1]:
        for t in setup.neighbors.neighbors(1, b, sst.index[1]):
            local = build_local_pomdp(setup.bp.pomdp, None, depth, _leaves_under(sst, b),
                                      _leaves_under(sst, t), setup.neighbors, "aa",
                                      with_extra=True, node_order=sst.index[depth])
            seed = derive_seed(solver.seed, "tlp", node_name(b), node_name(t))
            actions[(b, t)] = (local, solve(local.pomdp, local_seed_beliefs(local),
                                            dataclasses.replace(solver, seed=seed)))
    return TwoLevel(setup, actions, solver, time.perf_counter() - t0)


def run_tlp(tl: TwoLevel, task: Task, label: str = "") -> RunRecord:
    """Cross buildings with the precomputed policies, then solve and run a
    cell-level policy inside the goal building.  Needs a known start."""
    from .executive import Budgets, ExecutionError, ExecutionReport, SimulatedEnvironment, \
        _Run, build_global_belief, local_policy_seeds, HELP
    from .hierarchy import build_local_pomdp, derive_seed
    from .pbvi import solve
    import dataclasses
    import time
    setup = tl.setup
    if setup.config.initial_belief_mode != "known-start":
        raise ValueError("the two-level planner needs the initial building to be known")
    sst, depth = setup.sst, setup.sst.depth
    b0 = initial_belief(setup, task)
    goal_leaf = setup.leaf(task.goal)
    goal_building = sst.path(goal_leaf)[1]
    env = SimulatedEnvironment(setup.bp.pomdp, setup.state_of(task.initial), task.seed)
    report = ExecutionReport()
    budgets = Budgets()

    class _Flat:
        bp, sst = setup.bp, setup.sst

    run = _Run(_Flat, env, build_global_belief(b0, sst), budgets, report)
    planning = 0.0
    t0 = time.perf_counter()
    local = build_local_pomdp(setup.bp.pomdp, None, depth, _leaves_under(sst, goal_building),
                              [goal_leaf], setup.neighbors, "lp", with_extra=True, with_help=True,
                              node_order=sst.index[depth], require_actions=False)
    seed = derive_seed(tl.solver.seed, "tlp-goal", task.seed)
    solver = dataclasses.replace(tl.solver, seed=seed)
    policy = None
    planning += time.perf_counter() - t0
    try:
        for _ in range(budgets.oscillation + 1):
            here = sst.nodes[1][int(np.argmax(run.B.levels[1]))]
            for b, t in zip(path := tl.buildings_path(here, goal_building), path[1:]):
                aa_local, aa_policy = tl.actions[(b, t)]
                run.execute(aa_local, aa_policy)
            if policy is None:
                t0 = time.perf_counter()
                policy = solve(local.pomdp, local_policy_seeds(local, run.B), solver)
                planning += time.perf_counter() - t0
            action, _ = run.execute(local, policy)
            if action != HELP:
                break
        else:
            raise ExecutionError("oscillation between building traversal and goal policy")
    except ExecutionError as exc:
        report.failed, report.reason = True, str(exc)
    return _record("TLP", setup, task, env, report, planning, tl.init_seconds, label)


def run_hp(setup: Setup, hierarchy, task: Task, label: str = "") -> RunRecord:
    from .executive import ExecutionReport, SimulatedEnvironment, build_hierarchical_policy, \
        execute_hierarchical_policy
    b0 = initial_belief(setup, task)
    hp = build_hierarchical_policy(setup.leaf(task.goal), hierarchy, b0=b0)
    env = SimulatedEnvironment(setup.bp.pomdp, setup.state_of(task.initial), task.seed)
    report = execute_hierarchical_policy(hp, b0, hierarchy, env, report=ExecutionReport())
    return _record("HP", setup, task, env, report, hp.planning_seconds, hierarchy.init_seconds,
                   label)


# ---------------------------------------------------------------------------
# metrics


def metrics(records: list[RunRecord]) -> dict:
    """Success ratio, path relative cost (successful runs) and relative
    error (all runs), with means and standard deviations."""
    if not records:
        raise ValueError("no records")
    rel = [r for r in records if r.sp_initial > 0]
    cost = np.array([r.actions / r.sp_initial for r in rel if r.success])
    err = np.array([r.sp_final / r.sp_initial for r in rel])
    plan = np.array([r.planning_seconds for r in records])

    def ms(x):
        return (float(x.mean()), float(x.std())) if len(x) else (float("nan"), float("nan"))

    return {
        "runs": len(records),
        "success_ratio": sum(r.success for r in records) / len(records),
        "path_cost": ms(cost),
        "relative_error": ms(err),
        "planning_seconds": ms(plan),
        "init_seconds": float(records[0].init_seconds),
    }


# ---------------------------------------------------------------------------
# experiments


def table2(set_id: int) -> list[EnvConfig]:
    """Configurations of the three experiment sets."""
    sigmas = [round(0.1 * k, 1) for k in range(2, 11)]
    if set_id == 1:
        return [EnvConfig(kernel_sigma=s) for s in sigmas]
    if set_id == 2:
        return [EnvConfig(kernel_sigma=s, initial_belief_mode="uniform") for s in sigmas]
    if set_id == 3:
        return [EnvConfig(2, 2, 2, kernel_sigma=0.2), EnvConfig(3, 2, 2, kernel_sigma=0.2),
                EnvConfig(3, 3, 2, kernel_sigma=0.2), EnvConfig(3, 3, 3, kernel_sigma=0.2)]
    raise ValueError(f"unknown experiment set {set_id}")


def default_methods(set_id: int) -> tuple[str, ...]:
    return {1: METHODS, 2: ("FP", "HP"), 3: ("TLP", "HP")}[set_id]


def config_label(cfg: EnvConfig) -> str:
    return (f"d{cfg.section_dim}{cfg.room_dim}{cfg.building_dim}_s{cfg.kernel_sigma:g}_"
            f"{'u' if cfg.initial_belief_mode == 'uniform' else 'k'}")


def sample_tasks(setup: Setup, runs: int, master_seed: int) -> list[Task]:
    """Task pairs: initial cell in the first building, goal in the last."""
    from .hierarchy import derive_seed
    cfg = setup.config
    rng = np.random.default_rng(derive_seed(master_seed, "tasks", config_label(cfg)))
    world = setup.world
    first = [c for c in world.cells if world.building_of[c] == 0]
    last = [c for c in world.cells if world.building_of[c] == cfg.num_buildings - 1]
    tasks = []
    for k in range(runs):
        c0 = first[int(rng.integers(len(first)))]
        g = last[int(rng.integers(len(last)))]
        tasks.append(Task(k, c0, g, derive_seed(master_seed, "run", config_label(cfg), k)))
    return tasks


def _run_task(job):
    method, setup, planner, task, label = job
    if method == "FP":
        return run_fp(setup, task, label=label)
    if method == "TLP":
        return run_tlp(planner, task, label=label)
    return run_hp(setup, planner, task, label=label)


def run_config(cfg: EnvConfig, methods, runs: int, master_seed: int, jobs: int = 1,
               hierarchy_params=None, progress=None) -> list[RunRecord]:
    """Generate the environment, initialize each method once and run all of
    them on the same task pairs."""
    from .hierarchy import HierarchyParams, build_hierarchy
    import time
    setup = build_setup(cfg)
    tasks = sample_tasks(setup, runs, master_seed)
    label = config_label(cfg)
    planners = {}
    for m in methods:
        if m == "HP":
            t0 = time.perf_counter()
            params = hierarchy_params or HierarchyParams(seed=master_seed)
            h = build_hierarchy(setup.bp, setup.sst, setup.neighbors, params)
            h.init_seconds = time.perf_counter() - t0
            planners[m] = h
        elif m == "TLP":
            if cfg.initial_belief_mode != "known-start":
                continue
            planners[m] = build_two_level(setup)
        elif m == "FP":
            planners[m] = None
        else:
            raise ValueError(f"unknown method {m!r}")
    job_list = [(m, setup, planners[m], t, label) for m in methods if m in planners for t in tasks]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            records = list(pool.map(_run_task, job_list, chunksize=4))
    else:
        records = []
        for job in job_list:
            records.append(_run_task(job))
            if progress:
                progress(records[-1])
    return sorted(records, key=lambda r: (r.config, METHODS.index(r.method), r.task))


def run_experiment(configs, methods, runs: int, master_seed: int, jobs: int = 1,
                   progress=None) -> list[RunRecord]:
    records = []
    for cfg in configs:
        ms = [m for m in methods if not (m == "TLP" and cfg.initial_belief_mode != "known-start")]
        records += run_config(cfg, ms, runs, master_seed, jobs, progress=progress)
    return records


def summarize(records: list[RunRecord]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.config, r.method), []).append(r)
    out = []
    for (label, method), rs in groups.items():
        out.append({"config": label, "method": method, **metrics(rs)})
    return out


def write_results(records: list[RunRecord], out_dir) -> dict:
    """runs.csv (deterministic), timings.csv and summary.csv under `out_dir`."""
    import csv
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("runs", "timings", "summary")}
    with open(paths["runs"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RunRecord.COLUMNS)
        w.writerows(r.row() for r in records)
    with open(paths["timings"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RunRecord.TIMING_COLUMNS)
        w.writerows(r.timing_row() for r in records)
    with open(paths["summary"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "method", "runs", "success_ratio", "path_cost_mean", "path_cost_std",
                    "relative_error_mean", "relative_error_std", "planning_mean", "planning_std",
                    "init_seconds"])
        for s in summarize(records):
            w.writerow([s["config"], s["method"], s["runs"], f"{s['success_ratio']:.4f}",
                        *(f"{v:.4f}" for v in s["path_cost"]),
                        *(f"{v:.4f}" for v in s["relative_error"]),
                        *(f"{v:.4f}" for v in s["planning_seconds"]), f"{s['init_seconds']:.3f}"])
    return paths
