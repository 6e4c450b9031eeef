"""Gateway-level device selection and cloud-level device-gateway association.

Selection is a 0-1 knapsack: maximize utility-per-latency of dispatched
devices subject to the gateway's bandwidth cap on the summed average data
rates. Association is a min-max program: maximize the worst gateway's utility
sum minus phi times the worst bandwidth-utilization ratio, with each device
attached to at most one feasible gateway.

Both problems get an exact solver for small instances (branch and bound /
pruned enumeration), a greedy+local-search heuristic at scale, and a plain
exhaustive oracle for testing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InstanceTooLargeError

EXACT_SELECTION_LIMIT = 25  # branch-and-bound beyond this degrades to greedy
EXACT_ASSOCIATION_N = 12
EXACT_ASSOCIATION_G = 4
BRUTE_SELECTION_LIMIT = 20
BRUTE_ASSOCIATION_LIMIT = 2**22


@dataclass(frozen=True)
class Candidate:
    device_id: int
    u: float  # learning utility
    tau: float  # round-latency estimate, seconds
    rate: float  # average data rate on the link, bytes/s


@dataclass(frozen=True)
class SelectionInstance:
    candidates: list[Candidate]
    bandwidth: float  # gateway cap, bytes/s
    kappa: float = 1.0
    # True: cap the sum of selected rates (knapsack form). False: literal
    # per-device reading where each selected device's rate must fit the cap.
    sum_constraint: bool = True

    def __post_init__(self):
        if self.bandwidth <= 0 or self.kappa < 0:
            raise ConfigurationError("bandwidth must be > 0 and kappa >= 0")
        for c in self.candidates:
            if c.tau <= 0 or c.rate <= 0:
                raise ConfigurationError(f"device {c.device_id}: tau and rate must be > 0")


def _selection_items(inst: SelectionInstance) -> list[tuple[int, float, float]]:
    """(device_id, value, rate) for candidates worth considering, id order."""
    items = []
    for c in sorted(inst.candidates, key=lambda c: c.device_id):
        value = c.u * (1.0 / c.tau) ** inst.kappa
        if value <= 0 or c.rate > inst.bandwidth:
            continue
        items.append((c.device_id, value, c.rate))
    return items


def _better(value, ids, best_value, best_ids):
    if value > best_value:
        return True
    return value == best_value and best_ids is not None and tuple(ids) < tuple(best_ids)


def solve_selection(inst: SelectionInstance) -> set[int]:
    """Choose the dispatch set maximizing total utility-per-latency value."""
    items = _selection_items(inst)
    if not items:
        return set()
    if not inst.sum_constraint:
        # Per-device cap: items are independent, take everything with value.
        return {i for i, _, _ in items}
    if len(items) <= EXACT_SELECTION_LIMIT:
        return _knapsack_branch_and_bound(items, inst.bandwidth)
    return _knapsack_greedy(items, inst.bandwidth)


def _knapsack_greedy(items, capacity) -> set[int]:
    order = sorted(items, key=lambda it: (-it[1] / it[2], it[0]))
    chosen, load = set(), 0.0
    for dev, _, rate in order:
        if load + rate <= capacity:
            chosen.add(dev)
            load += rate
    return chosen


def _knapsack_branch_and_bound(items, capacity) -> set[int]:
    order = sorted(items, key=lambda it: (-it[1] / it[2], it[0]))
    n = len(order)
    # Seed the incumbent with the greedy solution so the fractional bound
    # prunes aggressively from the start.
    greedy_ids = _knapsack_greedy(items, capacity)
    best_value = sum(v for dev, v, _ in items if dev in greedy_ids)
    best_ids = tuple(sorted(greedy_ids))

    def bound(level, load, value):
        # Fractional relaxation from this level on, in density order.
        cap = capacity - load
        out = value
        for k in range(level, n):
            _, v, r = order[k]
            if r <= cap:
                cap -= r
                out += v
            else:
                return out + v * cap / r
        return out

    def walk(level, load, value, ids):
        nonlocal best_value, best_ids
        if _better(value, sorted(ids), best_value, best_ids):
            best_value, best_ids = value, tuple(sorted(ids))
        if level == n or bound(level, load, value) <= best_value:
            return
        dev, v, r = order[level]
        if load + r <= capacity:
            ids.append(dev)
            walk(level + 1, load + r, value + v, ids)
            ids.pop()
        walk(level + 1, load, value, ids)

    walk(0, 0.0, 0.0, [])
    return set(best_ids)


def brute_force_selection(inst: SelectionInstance) -> set[int]:
    """Exhaustive optimum over all candidate subsets; refuses large instances."""
    if len(inst.candidates) > BRUTE_SELECTION_LIMIT:
        raise InstanceTooLargeError(
            f"{len(inst.candidates)} candidates exceeds brute-force limit "
            f"{BRUTE_SELECTION_LIMIT}"
        )
    items = _selection_items(inst)
    best_value, best_ids = 0.0, ()
    for mask in range(1 << len(items)):
        value = load = 0.0
        ids = []
        for k, (dev, v, r) in enumerate(items):
            if mask >> k & 1:
                value += v
                load += r
                ids.append(dev)
        if inst.sum_constraint:
            if load > inst.bandwidth:
                continue
        elif any(r > inst.bandwidth for k, (_, _, r) in enumerate(items) if mask >> k & 1):
            continue
        if _better(value, ids, best_value, best_ids):
            best_value, best_ids = value, tuple(ids)
    return set(best_ids)


@dataclass(frozen=True)
class AssociationInstance:
    feasible: np.ndarray  # [N, G] 0/1
    u: np.ndarray  # [N]
    rates: np.ndarray  # [N, G] bytes/s, used only where feasible
    bandwidth: np.ndarray  # [G] bytes/s
    phi: float = 0.0

    def __post_init__(self):
        n, g = self.feasible.shape
        if self.u.shape != (n,) or self.rates.shape != (n, g) or self.bandwidth.shape != (g,):
            raise ConfigurationError("association instance shapes are inconsistent")
        if np.any(self.bandwidth <= 0) or self.phi < 0:
            raise ConfigurationError("bandwidth must be > 0 and phi >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.feasible.shape


@dataclass(frozen=True)
class Assignment:
    matrix: np.ndarray  # [N, G] 0/1, row sums <= 1, matrix <= feasible
    objective: float
    u_slack: float  # min over gateways of assigned utility sum
    r_slack: float  # max over gateways of assigned rate / bandwidth

    @property
    def gateway_of(self) -> list[int | None]:
        rows = []
        for row in self.matrix:
            j = int(np.argmax(row)) if row.any() else None
            rows.append(j)
        return rows


def _assignment_from_vector(inst: AssociationInstance, assign: list[int | None]) -> Assignment:
    n, g = inst.shape
    matrix = np.zeros((n, g), dtype=np.int8)
    sums_u = np.zeros(g)
    sums_r = np.zeros(g)
    for i, j in enumerate(assign):
        if j is not None:
            matrix[i, j] = 1
            sums_u[j] += inst.u[i]
            sums_r[j] += inst.rates[i, j] / inst.bandwidth[j]
    u_slack = float(sums_u.min())
    r_slack = float(sums_r.max())
    return Assignment(matrix, u_slack - inst.phi * r_slack, u_slack, r_slack)


def _pref_key(assign, g):
    return tuple(g if j is None else j for j in assign)


def solve_association(inst: AssociationInstance) -> Assignment:
    """Assign devices to gateways maximizing min-utility minus phi * max-rate-ratio."""
    n, g = inst.shape
    if n <= EXACT_ASSOCIATION_N and g <= EXACT_ASSOCIATION_G:
        assign = _association_exact(inst)
    else:
        assign = _association_heuristic(inst)
    return _assignment_from_vector(inst, assign)


def _options(inst: AssociationInstance, i: int) -> list[int | None]:
    feas: list[int | None] = [j for j in range(inst.shape[1]) if inst.feasible[i, j]]
    feas.append(None)
    return feas


def _association_exact(inst: AssociationInstance) -> list[int | None]:
    n, g = inst.shape
    # Optimistic utility still placeable at or after device i (positive part).
    pos_suffix = np.zeros((n + 1, g))
    for i in range(n - 1, -1, -1):
        pos_suffix[i] = pos_suffix[i + 1] + np.where(inst.feasible[i] > 0, max(inst.u[i], 0.0), 0.0)

    best_obj = -np.inf
    best_assign: list[int | None] | None = None
    best_key = None
    assign: list[int | None] = [None] * n
    sums_u = np.zeros(g)
    sums_r = np.zeros(g)

    def walk(i: int):
        nonlocal best_obj, best_assign, best_key
        bound = float(np.min(sums_u + pos_suffix[i])) - inst.phi * float(sums_r.max())
        if bound < best_obj:
            return
        if i == n:
            # Fresh summation in device order: leaf value is independent of
            # the DFS path's incremental float updates.
            fresh_u = [0.0] * g
            fresh_r = [0.0] * g
            for dev, j in enumerate(assign):
                if j is not None:
                    fresh_u[j] += float(inst.u[dev])
                    fresh_r[j] += float(inst.rates[dev, j]) / float(inst.bandwidth[j])
            obj = min(fresh_u) - inst.phi * max(fresh_r)
            key = _pref_key(assign, g)
            if obj > best_obj or (obj == best_obj and (best_key is None or key < best_key)):
                best_obj, best_assign, best_key = obj, assign.copy(), key
            return
        for j in _options(inst, i):
            assign[i] = j
            if j is None:
                walk(i + 1)
            else:
                du, dr = inst.u[i], inst.rates[i, j] / inst.bandwidth[j]
                sums_u[j] += du
                sums_r[j] += dr
                walk(i + 1)
                sums_u[j] -= du
                sums_r[j] -= dr
            assign[i] = None

    walk(0)
    assert best_assign is not None
    return best_assign


def _association_heuristic(inst: AssociationInstance) -> list[int | None]:
    n, g = inst.shape
    u = inst.u.tolist()
    ratio = (inst.rates / inst.bandwidth[None, :]).tolist()

    def objective_of(assign) -> float:
        # Fresh summation every time: a given assignment always evaluates to
        # the same float, so strict-improvement search cannot cycle on drift.
        sums_u = [0.0] * g
        sums_r = [0.0] * g
        for i, j in enumerate(assign):
            if j is not None:
                sums_u[j] += u[i]
                sums_r[j] += ratio[i][j]
        return min(sums_u) - inst.phi * max(sums_r)

    # Construction: every device joins the feasible gateway with the lowest
    # bandwidth-normalized load (utility sum as tie-break), giving a
    # bandwidth-proportional starting allocation. The local search below then
    # repairs worst-gateway utility violations from there.
    assign: list[int | None] = [None] * n
    sums_u = [0.0] * g
    sums_r = [0.0] * g
    for i in sorted(range(n), key=lambda i: (-u[i], i)):
        feas = [j for j in range(g) if inst.feasible[i, j]]
        if feas:
            j = min(feas, key=lambda j: (sums_r[j] + ratio[i][j], sums_u[j], j))
            assign[i] = j
            sums_u[j] += u[i]
            sums_r[j] += ratio[i][j]

    # Single-device reassignment until no move improves the objective.
    best = objective_of(assign)
    for _ in range(200):  # safety cap; strict improvement terminates long before
        improved = False
        for i in range(n):
            here = assign[i]
            for j in _options(inst, i):
                if j == here:
                    continue
                assign[i] = j
                cand = objective_of(assign)
                if cand > best:
                    best = cand
                    here = j
                    improved = True
                else:
                    assign[i] = here
        if not improved:
            break
    return assign


def brute_force_association(inst: AssociationInstance) -> Assignment:
    """Exhaustive optimum over every feasible assignment; refuses large instances."""
    n, g = inst.shape
    option_lists = [_options(inst, i) for i in range(n)]
    total = 1
    for opts in option_lists:
        total *= len(opts)
        if total > BRUTE_ASSOCIATION_LIMIT:
            raise InstanceTooLargeError(
                f"assignment space exceeds brute-force limit {BRUTE_ASSOCIATION_LIMIT}"
            )
    u = inst.u.tolist()
    ratio = (inst.rates / inst.bandwidth[None, :]).tolist()
    phi = inst.phi
    best_obj = -float("inf")
    best_combo = best_key = None
    for combo in itertools.product(*option_lists):
        sums_u = [0.0] * g
        sums_r = [0.0] * g
        for i, j in enumerate(combo):
            if j is not None:
                sums_u[j] += u[i]
                sums_r[j] += ratio[i][j]
        obj = min(sums_u) - phi * max(sums_r)
        key = _pref_key(combo, g)
        if obj > best_obj or (obj == best_obj and key < best_key):
            best_obj, best_combo, best_key = obj, combo, key
    assert best_combo is not None
    return _assignment_from_vector(inst, list(best_combo))
