"""Reference policies and the single-slot exhaustive oracle.

Every policy maps a :class:`SlotSnapshot` (plus an rng where needed) to one
:class:`HybridAction` per vehicle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from premig.env import NO_MIGRATE, HybridAction, SlotSnapshot
from premig.numerics import ContractViolation

DEFAULT_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))

ORACLE_MAX_VEHICLES = 4
ORACLE_MAX_CANDIDATES = 3
ORACLE_MAX_GRID = 11


@dataclass
class PolicySpec:
    kind: str
    fraction_grid: tuple = field(default=DEFAULT_GRID)

    def __post_init__(self):
        g = tuple(float(x) for x in self.fraction_grid)
        if list(g) != sorted(g) or g[0] != 0.0 or g[-1] != 1.0:
            raise ContractViolation("fraction grid must be sorted and contain 0 and 1")
        if self.kind not in POLICIES and self.kind != "oracle":
            raise ContractViolation(f"unknown policy {self.kind!r}")
        self.fraction_grid = g


def npm_policy(obs=None) -> HybridAction:
    return NO_MIGRATE


def fpm_policy(obs, candidates) -> HybridAction:
    return HybridAction(1, 1.0) if candidates else NO_MIGRATE


def random_policy(obs, candidates, rng: np.random.Generator) -> HybridAction:
    k = int(rng.integers(0, len(candidates) + 1))
    f = float(rng.uniform(0.0, 1.0))
    return HybridAction(k, f if k > 0 else 0.0)


def _options(n_cand: int, grid) -> list[HybridAction]:
    """(no-migrate, 0) first, then candidates in order with each grid fraction."""
    opts = [NO_MIGRATE]
    for k in range(1, n_cand + 1):
        opts.extend(HybridAction(k, float(f)) for f in grid)
    return opts


def greedy_policy(obs, snap: SlotSnapshot, v: int, grid=DEFAULT_GRID) -> HybridAction:
    """Best single-vehicle action against the slot-start workloads.

    Other vehicles' same-slot arrivals are not visible. Ties go to the smaller
    discrete index, then the smaller fraction.
    """
    best, best_t = NO_MIGRATE, None
    for a in _options(len(snap.candidates[v]), grid):
        a_f, _ = snap.enforce(v, a)
        t = snap.price(v, a_f).total
        if best_t is None or t < best_t:
            best, best_t = a_f, t
    return best


def exhaustive_slot_oracle(snap: SlotSnapshot, grid=DEFAULT_GRID,
                           refine: bool = False) -> tuple[list[HybridAction], float]:
    """Joint action minimizing the summed latency of the slot, by full enumeration.

    With ``refine`` the winning joint action's fractions are then polished on
    the continuum, one vehicle at a time, so the result also bounds policies
    whose fractions fall between grid points.
    """
    V = snap.n_vehicles
    if V > ORACLE_MAX_VEHICLES:
        raise ContractViolation(f"oracle bound: at most {ORACLE_MAX_VEHICLES} vehicles, got {V}")
    if any(len(c) > ORACLE_MAX_CANDIDATES for c in snap.candidates):
        raise ContractViolation(f"oracle bound: at most {ORACLE_MAX_CANDIDATES} candidates per vehicle")
    if len(grid) > ORACLE_MAX_GRID:
        raise ContractViolation(f"oracle bound: fraction grid of at most {ORACLE_MAX_GRID} points")
    per_vehicle = [_options(len(snap.candidates[v]), grid) for v in range(V)]
    best: list = [None, float("inf")]

    # depth-first over vehicles in arrival order; latencies are >= 0, so a
    # partial sum already at the incumbent cannot improve on it
    def search(v, W, partial, chosen):
        if v == V:
            if partial < best[1]:
                best[0], best[1] = list(chosen), partial
            return
        for a in per_vehicle[v]:
            a_f, b, _, W2 = snap.advance(v, a, W)
            t = partial + b.total
            if t < best[1]:
                chosen.append(a_f)
                search(v + 1, W2, t, chosen)
                chosen.pop()

    search(0, dict(snap.workloads), 0.0, [])
    if refine:
        return _refine_fractions(snap, best[0], best[1])
    return best[0], best[1]


def _refine_fractions(snap: SlotSnapshot, joint: list[HybridAction], total: float, rounds: int = 2):
    """Coordinate descent on the fractions of migrating vehicles.

    For fixed discrete choices the slot total is piecewise linear in each
    fraction, so a fine scan followed by a bounded scalar search around the
    best scan point lands on the kink that minimizes it.
    """
    def joint_total(acts):
        _, bds, _, _ = snap.play(acts)
        return sum(b.total for b in bds)

    joint = list(joint)
    fine = np.linspace(0.0, 1.0, 51)
    for _ in range(rounds):
        improved = False
        for v, a in enumerate(joint):
            if a.discrete == 0:
                continue

            def g(f, v=v, k=a.discrete):
                trial = joint[:v] + [HybridAction(k, float(f))] + joint[v + 1:]
                return joint_total(trial)
            vals = [g(f) for f in fine]
            i = int(np.argmin(vals))
            lo, hi = fine[max(i - 1, 0)], fine[min(i + 1, len(fine) - 1)]
            res = optimize.minimize_scalar(g, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
            f_best, t_best = (res.x, res.fun) if res.fun < vals[i] else (fine[i], vals[i])
            if t_best < total * (1 - 1e-15):
                joint[v] = snap.enforce(v, HybridAction(a.discrete, float(f_best)))[0]
                total = joint_total(joint)
                improved = True
        if not improved:
            break
    return snap.play(joint)[0], total


POLICIES = ("greedy", "random", "fpm", "npm")


def baseline_actions(kind: str, snap: SlotSnapshot, obs=None, rng: np.random.Generator | None = None,
                     grid=DEFAULT_GRID) -> list[HybridAction]:
    """One action per vehicle for a named baseline."""
    V = snap.n_vehicles
    obs = [None] * V if obs is None else obs
    if kind == "npm":
        return [npm_policy(o) for o in obs]
    if kind == "fpm":
        return [fpm_policy(obs[v], snap.candidates[v]) for v in range(V)]
    if kind == "random":
        if rng is None:
            raise ContractViolation("random policy needs an rng")
        return [random_policy(obs[v], snap.candidates[v], rng) for v in range(V)]
    if kind == "greedy":
        return [greedy_policy(obs[v], snap, v, grid) for v in range(V)]
    if kind == "oracle":
        return exhaustive_slot_oracle(snap, grid)[0]
    raise ContractViolation(f"unknown policy {kind!r}")
