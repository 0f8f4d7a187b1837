"""0-1 ILP over an auxiliary graph: formulation, exact solver, LP export.

Variables are one binary ``x`` per strategy node and one binary ``b`` per
auxiliary edge. Rows require exactly one strategy per operator, tie edge
selection to node selection through in/out degrees, and bound the summed edge
memory.

The solver works directly on per-operator choices (which already satisfy the
one-strategy and degree rows) with depth-first branch and bound. Lower bounds
come from a min-sum dynamic program on a spanning forest of the unassigned
operators; edges outside the forest are relaxed to column minima.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .auxgraph import AuxiliaryGraph
from .layout import OperatorStrategy

logger = logging.getLogger(__name__)

# relative slack absorbing float reassociation between bounds and leaf sums
_BOUND_SLACK = 1e-13
# assignments within this relative distance of the optimum count as tied
TIE_TOLERANCE = 1e-12
DEFAULT_NODE_BUDGET = 2_000_000
BRUTE_FORCE_LIMIT = 10**7


class InfeasibleError(RuntimeError):
    """No assignment satisfies the memory bound."""


class BudgetExhausted(RuntimeError):
    """The node budget ran out before any feasible assignment was found."""


class ProblemTooLarge(ValueError):
    pass


@dataclass
class Block:
    src: int  # group index
    dst: int
    cost: np.ndarray
    memory: np.ndarray
    label: str = ""


@dataclass
class IlpProblem:
    groups: list[str]
    sizes: list[int]
    blocks: list[Block]
    memory_bound: float  # inclusive
    mode: str = "topology"
    virtual: frozenset[str] = frozenset()
    strategies: dict[str, list[OperatorStrategy]] = field(default_factory=dict)

    @property
    def x_var_count(self) -> int:
        return sum(self.sizes)

    @property
    def b_var_count(self) -> int:
        return sum(b.cost.size for b in self.blocks)

    @property
    def one_strategy_rows(self) -> int:
        return len(self.groups)

    def degrees(self) -> tuple[list[int], list[int]]:
        ins = [0] * len(self.groups)
        outs = [0] * len(self.groups)
        for b in self.blocks:
            outs[b.src] += 1
            ins[b.dst] += 1
        return ins, outs

    @property
    def degree_pair_rows(self) -> int:
        """Nodes carrying an (in, out) degree-coupling pair; isolated operators need none."""
        ins, outs = self.degrees()
        return sum(n for n, i, o in zip(self.sizes, ins, outs) if i or o)

    @property
    def memory_rows(self) -> int:
        return 1

    def row_counts(self) -> dict[str, int]:
        return {"one_strategy": self.one_strategy_rows, "degree_pairs": self.degree_pair_rows,
                "memory": self.memory_rows}

    def evaluate(self, choice: tuple[int, ...]) -> tuple[float, float]:
        """Canonical (cost, memory) of a full assignment: block-order summation."""
        cost = mem = 0.0
        for b in self.blocks:
            cost += float(b.cost[choice[b.src], choice[b.dst]])
            mem += float(b.memory[choice[b.src], choice[b.dst]])
        return cost, mem


@dataclass
class PlanSolution:
    selection: dict[str, int]
    strategies: dict[str, OperatorStrategy]
    cost: float
    memory: float
    status: str = "optimal"  # optimal | budget_exceeded
    nodes: int = 0
    wall_time: float = 0.0
    root_lower_bound: float = 0.0
    gap: float = 0.0

    def choice(self, problem: IlpProblem) -> tuple[int, ...]:
        return tuple(self.selection[g] for g in problem.groups)


def formulate(aux: AuxiliaryGraph, device_memory: float, mode: str | None = None) -> IlpProblem:
    """Build the ILP; the strict memory inequality becomes ``<= device_memory - 1``."""
    mode = mode or aux.mode
    index = {g: i for i, g in enumerate(aux.order)}
    blocks = [Block(index[b.src], index[b.dst], c, b.memory, f"{b.src}->{b.dst}:{b.tensor}")
              for b, c in zip(aux.blocks, aux.weights(mode))]
    return IlpProblem(
        groups=list(aux.order),
        sizes=[len(aux.groups[g]) for g in aux.order],
        blocks=blocks,
        memory_bound=float(device_memory) - 1.0,
        mode=mode,
        virtual=frozenset(aux.virtual),
        strategies={g: [n.strategy for n in aux.groups[g]] for g in aux.order},
    )


# --------------------------------------------------------------------------
# bounds


class _Bounder:
    """Per-depth forest DP lower bounds for one family of edge matrices."""

    def __init__(self, sizes: list[int], blocks: list[tuple[int, int, np.ndarray]]):
        self.sizes = sizes
        g_count = len(sizes)
        pairs: dict[tuple[int, int], np.ndarray] = {}
        for s, d, mat in blocks:
            if s == d:
                raise ValueError("self-loop block")
            a, b = (s, d) if s < d else (d, s)
            m = mat if s < d else mat.T
            pairs[(a, b)] = pairs[(a, b)] + m if (a, b) in pairs else np.asarray(m, dtype=float)
        self.pairs = pairs
        self.plans = [self._plan(k) for k in range(g_count + 1)]

    def _plan(self, k: int):
        n = len(self.sizes)
        adj: dict[int, list[int]] = {g: [] for g in range(k, n)}
        for (a, b) in self.pairs:
            if a >= k:
                adj[a].append(b)
                adj[b].append(a)
        parent: dict[int, int | None] = {}
        order: list[int] = []
        roots: list[int] = []
        for start in range(k, n):
            if start in parent:
                continue
            roots.append(start)
            parent[start] = None
            queue = [start]
            while queue:
                g = queue.pop(0)
                order.append(g)
                for h in sorted(adj[g]):
                    if h not in parent:
                        parent[h] = g
                        queue.append(h)
        tree = {(min(g, p), max(g, p)) for g, p in parent.items() if p is not None}
        static = {g: np.zeros(self.sizes[g]) for g in range(k, n)}
        for (a, b), m in self.pairs.items():
            if a >= k and (a, b) not in tree:
                static[b] += m.min(axis=0)
        boundary = [(a, b, m) for (a, b), m in self.pairs.items() if a < k <= b]
        inner = [(a, b, m) for (a, b), m in self.pairs.items() if b < k]
        post = [(g, parent[g], self.pairs[(min(g, parent[g]), max(g, parent[g]))])
                for g in reversed(order) if parent[g] is not None]
        return static, boundary, inner, post, roots

    def prefix(self, k: int, choice: list[int]) -> float:
        return sum(float(m[choice[a], choice[b]]) for a, b, m in self.plans[k][2])

    def children(self, k: int, choice: list[int]) -> np.ndarray:
        """Lower bound for each value of group ``k`` given ``choice[:k]``."""
        static, boundary, _, post, roots = self.plans[k]
        val = {g: v.copy() for g, v in static.items()}
        for a, b, m in boundary:
            val[b] += m[choice[a]]
        for g, p, m in post:
            if p < g:
                msg = (m + val[g][None, :]).min(axis=1)
            else:
                msg = (m + val[g][:, None]).min(axis=0)
            val[p] += msg
        extra = sum(float(val[r].min()) for r in roots[1:])
        return self.prefix(k, choice) + extra + val[k]


# --------------------------------------------------------------------------
# branch and bound


class _Search:
    def __init__(self, problem: IlpProblem, budget: int):
        self.p = problem
        self.n = len(problem.groups)
        self.budget = budget
        self.nodes = 0
        self.cost_bound = _Bounder(problem.sizes, [(b.src, b.dst, b.cost) for b in problem.blocks])
        mem_max = sum(float(b.memory.max()) for b in problem.blocks if b.memory.size)
        self.memory_active = mem_max > problem.memory_bound
        self.mem_bound = (_Bounder(problem.sizes, [(b.src, b.dst, b.memory) for b in problem.blocks])
                          if self.memory_active else None)
        self.best: tuple[int, ...] | None = None
        self.best_cost = math.inf
        self.exhausted = False

    def _tick(self) -> bool:
        self.nodes += 1
        if self.nodes > self.budget:
            self.exhausted = True
        return self.exhausted

    def _bounds(self, k: int, choice: list[int]) -> tuple[np.ndarray, np.ndarray | None]:
        lb = self.cost_bound.children(k, choice)
        mlb = self.mem_bound.children(k, choice) if self.memory_active else None
        return lb, mlb

    def _mem_ok(self, mlb, s: int) -> bool:
        if mlb is None:
            return True
        bound = self.p.memory_bound
        return mlb[s] <= bound + _BOUND_SLACK * abs(bound) + 1e-9

    def _leaf(self, choice: list[int]) -> tuple[float, bool]:
        cost, mem = self.p.evaluate(tuple(choice))
        return cost, mem <= self.p.memory_bound

    # phase 1: best-first DFS for the optimal value
    def minimize(self, k: int, choice: list[int]) -> None:
        if self.exhausted:
            return
        if k == self.n:
            cost, ok = self._leaf(choice)
            if ok and cost < self.best_cost:
                self.best_cost, self.best = cost, tuple(choice)
            return
        if self._tick():
            return
        lb, mlb = self._bounds(k, choice)
        for s in sorted(range(len(lb)), key=lambda i: (lb[i], i)):
            if math.isfinite(self.best_cost) and lb[s] >= self.best_cost - _BOUND_SLACK * abs(self.best_cost):
                break
            if not self._mem_ok(mlb, s):
                continue
            choice.append(int(s))
            self.minimize(k + 1, choice)
            choice.pop()
            if self.exhausted:
                return

    # phase 2: lexicographically first assignment within the tie threshold
    def first_within(self, k: int, choice: list[int], threshold: float) -> tuple[int, ...] | None:
        if k == self.n:
            cost, ok = self._leaf(choice)
            return tuple(choice) if ok and cost <= threshold else None
        if self._tick():
            return None
        lb, mlb = self._bounds(k, choice)
        limit = threshold + _BOUND_SLACK * abs(threshold)
        for s in range(len(lb)):
            if lb[s] > limit or not self._mem_ok(mlb, s):
                continue
            choice.append(s)
            found = self.first_within(k + 1, choice, threshold)
            choice.pop()
            if found is not None or self.exhausted:
                return found
        return None


def _strategies(problem: IlpProblem, chosen) -> dict[str, OperatorStrategy]:
    return {g: problem.strategies[g][i] for g, i in zip(problem.groups, chosen)
            if g in problem.strategies and g not in problem.virtual}


def tie_threshold(cost: float) -> float:
    return cost + TIE_TOLERANCE * abs(cost)


_WORKER_PROBLEM: IlpProblem | None = None


def _init_worker(problem: IlpProblem) -> None:
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _solve_subtree(args) -> tuple[float, tuple[int, ...] | None, int]:
    prefix, incumbent, budget = args
    search = _Search(_WORKER_PROBLEM, budget)
    search.best_cost = incumbent
    search.minimize(len(prefix), list(prefix))
    return search.best_cost, search.best, search.nodes


def _frontier(search: _Search, target: int) -> list[tuple[int, ...]]:
    """Expand the tree level by level until at least ``target`` open prefixes exist."""
    frontier: list[tuple[int, ...]] = [()]
    while len(frontier) < target and frontier and len(frontier[0]) < search.n:
        nxt = []
        for pre in frontier:
            lb, mlb = search._bounds(len(pre), list(pre))
            nxt.extend(pre + (s,) for s in range(len(lb)) if search._mem_ok(mlb, s))
        frontier = nxt
    return frontier


def solve(problem: IlpProblem, *, node_budget: int = DEFAULT_NODE_BUDGET, workers: int = 1) -> PlanSolution:
    """Exact minimum-cost assignment; ties go to the lexicographically smallest one.

    Raises :class:`InfeasibleError` if no assignment fits the memory bound.
    When ``node_budget`` runs out the best assignment found so far is returned
    with ``status == "budget_exceeded"`` and a relative gap to the root bound.
    """
    t0 = time.perf_counter()
    search = _Search(problem, node_budget)
    root_lb = float(search.cost_bound.children(0, []).min()) if problem.groups else 0.0

    if workers > 1 and search.n > 1:
        tasks = _frontier(search, 4 * workers)
        search.nodes += len(tasks)
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(problem,)) as pool:
            results = list(pool.map(_solve_subtree, [(t, math.inf, node_budget) for t in tasks]))
        for cost, best, nodes in results:
            search.nodes += nodes
            if best is not None and (cost, best) < (search.best_cost, search.best or ()):
                search.best_cost, search.best = cost, best
        search.exhausted = search.nodes > node_budget
    else:
        search.minimize(0, [])

    status = "optimal"
    chosen = search.best
    if search.exhausted:
        status = "budget_exceeded"
        if chosen is None:
            raise BudgetExhausted("node budget exhausted before any feasible assignment was found")
    elif chosen is None:
        raise InfeasibleError("no strategy assignment satisfies the memory bound")
    else:
        # the tie-break pass gets its own budget; on exhaustion the phase-1 optimum stands
        search.exhausted = False
        search.budget = search.nodes + node_budget
        lex = search.first_within(0, [], tie_threshold(search.best_cost))
        if lex is None:
            logger.warning("tie-break pass did not finish; keeping first optimum found")
        chosen = lex if lex is not None else chosen

    cost, mem = problem.evaluate(chosen)
    gap = 0.0 if status == "optimal" or cost == 0 else max(0.0, (cost - root_lb) / cost)
    sol = PlanSolution(
        selection={g: int(i) for g, i in zip(problem.groups, chosen)},
        strategies=_strategies(problem, chosen),
        cost=cost, memory=mem, status=status, nodes=search.nodes,
        wall_time=time.perf_counter() - t0, root_lower_bound=root_lb, gap=gap,
    )
    logger.info("solved %d groups: cost=%.6g status=%s nodes=%d in %.3fs", search.n, cost, status,
                search.nodes, sol.wall_time)
    return sol


def brute_force_solve(problem: IlpProblem) -> PlanSolution:
    """Enumerate every assignment; same canonical sums and tie rule as :func:`solve`."""
    t0 = time.perf_counter()
    total = math.prod(problem.sizes) if problem.sizes else 1
    if total > BRUTE_FORCE_LIMIT:
        raise ProblemTooLarge(f"{total} assignments exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    sizes = tuple(problem.sizes)
    n = len(sizes)

    def expand(b: Block, mat: np.ndarray) -> np.ndarray:
        shape = [1] * n
        shape[b.src] = sizes[b.src]
        shape[b.dst] = sizes[b.dst]
        m = mat if b.src < b.dst else mat.T
        return m.reshape(shape)

    cost = np.zeros(sizes)
    mem = np.zeros(sizes)
    for b in problem.blocks:
        cost = cost + expand(b, b.cost)
        mem = mem + expand(b, b.memory)
    feasible = mem <= problem.memory_bound
    if not feasible.any():
        raise InfeasibleError("no strategy assignment satisfies the memory bound")
    best = float(cost[feasible].min())
    hits = np.flatnonzero((feasible & (cost <= tie_threshold(best))).ravel())
    chosen = tuple(int(i) for i in np.unravel_index(hits[0], sizes)) if n else ()
    c, m = problem.evaluate(chosen)
    return PlanSolution(
        selection={g: i for g, i in zip(problem.groups, chosen)},
        strategies=_strategies(problem, chosen),
        cost=c, memory=m, nodes=total, wall_time=time.perf_counter() - t0,
        root_lower_bound=best,
    )


def solution_vectors(problem: IlpProblem, choice: tuple[int, ...]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Binary x (per group) and b (per block) values implied by an assignment."""
    xs = []
    for g, n in enumerate(problem.sizes):
        x = np.zeros(n, dtype=int)
        x[choice[g]] = 1
        xs.append(x)
    bs = []
    for b in problem.blocks:
        m = np.zeros(b.cost.shape, dtype=int)
        m[choice[b.src], choice[b.dst]] = 1
        bs.append(m)
    return xs, bs


def check_rows(problem: IlpProblem, xs: list[np.ndarray], bs: list[np.ndarray]) -> list[str]:
    """Names of violated rows for explicit binary vectors."""
    bad = []
    ins, outs = problem.degrees()
    for g, x in enumerate(xs):
        if x.sum() != 1:
            bad.append(f"one_{g}")
    in_sum = [np.zeros(n, dtype=int) for n in problem.sizes]
    out_sum = [np.zeros(n, dtype=int) for n in problem.sizes]
    for b, m in zip(problem.blocks, bs):
        in_sum[b.dst] += m.sum(axis=0)
        out_sum[b.src] += m.sum(axis=1)
    for g, x in enumerate(xs):
        for i in range(problem.sizes[g]):
            if in_sum[g][i] != x[i] * ins[g]:
                bad.append(f"in_{g}_{i}")
            if out_sum[g][i] != x[i] * outs[g]:
                bad.append(f"out_{g}_{i}")
    mem = sum(float((b.memory * m).sum()) for b, m in zip(problem.blocks, bs))
    if mem > problem.memory_bound:
        bad.append("mem")
    return bad


# --------------------------------------------------------------------------
# LP text


def _xname(g: int, i: int) -> str:
    return f"x_{g}_{i}"


def _bname(k: int, i: int, j: int) -> str:
    return f"b_{k}_{i}_{j}"


def _wrap(head: str, terms: list[str], tail: str = "", width: int = 200) -> list[str]:
    lines, cur = [], f" {head}"
    for t in terms:
        if len(cur) + len(t) + 1 > width:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    if tail:
        if len(cur) + len(tail) + 1 > width:
            lines.append(cur)
            cur = "   "
        cur += " " + tail
    lines.append(cur)
    return lines


def _coef(c: float) -> str:
    return repr(float(c))


def export_lp(problem: IlpProblem) -> str:
    """CPLEX LP text: ``x_<group>_<strategy>`` nodes and ``b_<block>_<i>_<j>`` edges.

    Output depends only on the problem, so identical inputs give identical text.
    """
    out = ["\\ schema: topoplan.lp/1", f"\\ mode: {problem.mode}"]
    for g, name in enumerate(problem.groups):
        out.append(f"\\ group {g}: {name} ({problem.sizes[g]} strategies)")
    for k, b in enumerate(problem.blocks):
        out.append(f"\\ block {k}: group {b.src} -> group {b.dst} {b.label}")

    obj = []
    for k, b in enumerate(problem.blocks):
        for (i, j), c in np.ndenumerate(b.cost):
            if c != 0:
                obj.append(f"+ {_coef(c)} {_bname(k, i, j)}")
    if not obj:
        obj = [f"0 {_xname(0, 0)}"] if problem.groups else []
    out.append("Minimize")
    out.extend(_wrap("obj:", obj))

    out.append("Subject To")
    for g, n in enumerate(problem.sizes):
        out.extend(_wrap(f"one_{g}:", [f"+ {_xname(g, i)}" for i in range(n)], "= 1"))
    ins, outs = problem.degrees()
    into: dict[int, list[int]] = {g: [] for g in range(len(problem.groups))}
    outof: dict[int, list[int]] = {g: [] for g in range(len(problem.groups))}
    for k, b in enumerate(problem.blocks):
        into[b.dst].append(k)
        outof[b.src].append(k)
    for g, n in enumerate(problem.sizes):
        for i in range(n):
            if ins[g]:
                terms = [f"+ {_bname(k, a, i)}" for k in into[g] for a in range(problem.blocks[k].cost.shape[0])]
                out.extend(_wrap(f"in_{g}_{i}:", terms + [f"- {ins[g]} {_xname(g, i)}"], "= 0"))
            if outs[g]:
                terms = [f"+ {_bname(k, i, c)}" for k in outof[g] for c in range(problem.blocks[k].cost.shape[1])]
                out.extend(_wrap(f"out_{g}_{i}:", terms + [f"- {outs[g]} {_xname(g, i)}"], "= 0"))
    mem = []
    for k, b in enumerate(problem.blocks):
        for (i, j), m in np.ndenumerate(b.memory):
            if m != 0:
                mem.append(f"+ {_coef(m)} {_bname(k, i, j)}")
    if not mem and problem.groups:
        mem = [f"0 {_xname(0, 0)}"]
    if mem:
        out.extend(_wrap("mem:", mem, f"<= {_coef(problem.memory_bound)}"))

    out.append("Binary")
    names = [_xname(g, i) for g, n in enumerate(problem.sizes) for i in range(n)]
    names += [_bname(k, i, j) for k, b in enumerate(problem.blocks)
              for i, j in itertools.product(range(b.cost.shape[0]), range(b.cost.shape[1]))]
    out.extend(_wrap("", names))
    out.append("End")
    return "\n".join(out) + "\n"
