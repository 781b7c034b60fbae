"""Reward-collecting drone routing under a battery budget, solved by best insertion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numba
import numpy as np

from .core import CellId, RegionConfig

# insertion costs at or below this many seconds count as free (collinear cells)
ZERO_COST = 1e-9


@dataclass(frozen=True)
class RoutingInstance:
    depot: CellId
    candidates: Sequence[tuple[CellId, float]]  # (cell, priority)
    speed: float  # m/s
    budget: float  # s
    cell_size: float = 512.0

    def center(self, c: CellId) -> tuple[float, float]:
        return ((c.cx + 0.5) * self.cell_size, (c.cy + 0.5) * self.cell_size)


@dataclass
class Route:
    cells: list[CellId]
    total_time: float
    total_reward: float
    etas: list[float] = field(default_factory=list)  # seconds from take-off

    @property
    def stops(self) -> list[CellId]:
        return self.cells[1:-1]


@numba.njit(cache=True)
def _insertion_kernel(T, depot, cand, reward, budget, zero_cost):  # pragma: no cover - jitted
    m = cand.shape[0]
    route = np.empty(m + 2, dtype=np.int64)
    route[0] = depot
    route[1] = depot
    length = 2
    total = 0.0
    best_cost = np.empty(m)
    best_edge = np.zeros(m, dtype=np.int64)
    active = np.ones(m, dtype=np.bool_)
    for i in range(m):
        c = cand[i]
        best_cost[i] = T[depot, c] + T[c, depot] - T[depot, depot]
    while True:
        pick = -1
        pick_ratio = -1.0
        for i in range(m):
            if not active[i]:
                continue
            cost = best_cost[i]
            if not (total + cost <= budget):
                continue
            if cost <= zero_cost:
                ratio = np.inf
            else:
                ratio = reward[i] / cost
            if ratio > pick_ratio:
                pick = i
                pick_ratio = ratio
        if pick < 0:
            break
        e = best_edge[pick]
        j = cand[pick]
        for k in range(length, e + 1, -1):
            route[k] = route[k - 1]
        route[e + 1] = j
        length += 1
        total += best_cost[pick]
        active[pick] = False
        a = route[e]
        b = route[e + 2]
        for i in range(m):
            if not active[i]:
                continue
            c = cand[i]
            if best_edge[i] == e:
                bc = np.inf
                be = 0
                for q in range(length - 1):
                    u = route[q]
                    w = route[q + 1]
                    cost = T[u, c] + T[c, w] - T[u, w]
                    if cost < bc:
                        bc = cost
                        be = q
                best_cost[i] = bc
                best_edge[i] = be
                continue
            if best_edge[i] > e:
                best_edge[i] += 1
            c1 = T[a, c] + T[c, j] - T[a, j]
            if c1 < best_cost[i] or (c1 == best_cost[i] and e < best_edge[i]):
                best_cost[i] = c1
                best_edge[i] = e
            c2 = T[j, c] + T[c, b] - T[j, b]
            if c2 < best_cost[i] or (c2 == best_cost[i] and e + 1 < best_edge[i]):
                best_cost[i] = c2
                best_edge[i] = e + 1
    return route[:length], total


def solve_indices(T: np.ndarray, depot: int, cand: np.ndarray, reward: np.ndarray,
                  budget: float) -> tuple[np.ndarray, float]:
    """Best insertion over node indices of a travel-time matrix.

    ``cand`` must be ordered by tie-break priority (lower first).  Returns
    the closed tour (depot first and last) and its travel time.
    """
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    reward = np.ascontiguousarray(reward, dtype=np.float64)
    if cand.size == 0 or not budget > 0:
        return np.array([depot, depot], dtype=np.int64), 0.0
    route, total = _insertion_kernel(np.ascontiguousarray(T, dtype=np.float64), int(depot), cand,
                                     reward, float(budget), ZERO_COST)
    return route, float(total)


def travel_matrix(centers: np.ndarray, speed: float) -> np.ndarray:
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    if speed <= 0:
        return np.where(dist > 0, np.inf, 0.0)
    return dist / speed


def best_insertion(inst: RoutingInstance) -> Route:
    """Greedy reward-per-added-second insertion until no candidate fits the budget.

    Ties go to the lower cell, then the earlier position; cells with
    non-positive priority and the depot itself are not candidates.
    """
    cands = sorted((c, float(p)) for c, p in inst.candidates if p > 0 and c != inst.depot)
    nodes = [inst.depot] + [c for c, _ in cands]
    centers = np.array([inst.center(c) for c in nodes], dtype=float)
    T = travel_matrix(centers, inst.speed)
    idx, total = solve_indices(T, 0, np.arange(1, len(nodes)), np.array([p for _, p in cands]),
                               inst.budget)
    return _route_from(idx, nodes, T, {i + 1: p for i, (_, p) in enumerate(cands)})


def _route_from(idx: np.ndarray, nodes: Sequence[CellId], T: np.ndarray,
                reward_of: Mapping[int, float]) -> Route:
    etas = [0.0]
    for a, b in zip(idx[:-1], idx[1:]):
        etas.append(etas[-1] + float(T[a, b]))
    return Route([nodes[i] for i in idx], etas[-1], float(sum(reward_of[i] for i in idx[1:-1])), etas)


def route_time(inst: RoutingInstance, cells: Sequence[CellId]) -> float:
    total = 0.0
    for a, b in zip(cells[:-1], cells[1:]):
        (ax, ay), (bx, by) = inst.center(a), inst.center(b)
        d = math.hypot(bx - ax, by - ay)
        total += 0.0 if d == 0 else (math.inf if inst.speed <= 0 else d / inst.speed)
    return total


class FleetPlanner:
    """Per-idle-drone route assignment with planned-cell exclusion.

    Cells on an in-flight route are withheld from other drones until the
    cell is visited or that drone's route is completed.
    """

    def __init__(self, region: RegionConfig, depot: CellId, speed: float, budget: float):
        self.region = region
        self.depot = depot
        self.speed = speed
        self.budget = budget
        self.planned: dict[CellId, int] = {}

    def assign(self, priorities: Mapping[CellId, float], drone: int) -> Route:
        frozen = {c: float(p) for c, p in priorities.items()}  # snapshot at planning time
        cands = [(c, p) for c, p in frozen.items() if p > 0 and c not in self.planned]
        inst = RoutingInstance(self.depot, cands, self.speed, self.budget, self.region.cell_size_m)
        route = best_insertion(inst)
        for c in route.stops:
            self.planned[c] = drone
        return route

    def visited(self, cell: CellId) -> None:
        self.planned.pop(cell, None)

    def complete(self, drone: int) -> None:
        for c in [c for c, d in self.planned.items() if d == drone]:
            del self.planned[c]


def assign_route(priorities: Mapping[CellId, float], drone: int, planner: FleetPlanner) -> Route:
    return planner.assign(priorities, drone)


class PriorityFormatError(ValueError):
    pass


def read_priorities_csv(path) -> list[tuple[CellId, float]]:
    """Read ``cell_x,cell_y,priority`` rows (header required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["cell_x", "cell_y", "priority"]:
            raise PriorityFormatError(f"{path}:1: expected header cell_x,cell_y,priority")
        out = []
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            try:
                cx, cy, p = row
                cell, prio = CellId(int(cx), int(cy)), float(p)
            except ValueError as e:
                raise PriorityFormatError(f"{path}:{lineno}: malformed row ({e})") from None
            if not (math.isfinite(prio) and prio >= 0):
                raise PriorityFormatError(f"{path}:{lineno}: priority must be finite and >= 0")
            out.append((cell, prio))
    return out


def write_route_csv(path, route: Route) -> None:
    with open(path, "w") as fh:
        fh.write("cell_x,cell_y,eta_s\n")
        for c, eta in zip(route.cells, route.etas):
            fh.write(f"{c.cx},{c.cy},{eta!r}\n")
