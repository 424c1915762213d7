"""Interval branch-and-bound falsifier.

A query asks whether some point of a box satisfies every feasibility
constraint (``c(z) <= 0``) and makes at least one violation expression
strictly positive. Boxes in which interval bounds show every violation is
``<= 0``, or some constraint is ``> 0``, are discarded. Box midpoints are
checked in plain floating point for genuine counterexamples. Everything else
is bisected along its widest dimension, measured relative to the region.

Only the UNSAT answer carries a guarantee: it means the interval bounds
discharged every box. A counterexample is reported only when the violation
exceeds ``delta / 2`` at a feasible point. Violations smaller than that stay
undecided and end up as ``depth_exhausted``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, InputError
from . import interval as iv
from .evaluate import Encloser, Program
from .expr import Expr, const, esum, square, topological, variables

UNSAT = "unsat"
COUNTEREXAMPLE = "counterexample"
DEPTH_EXHAUSTED = "depth_exhausted"

MAX_TREE_DEPTH = 62


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise InputError(f"box bounds differ in length: {lo.size} vs {hi.size}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InputError("box bounds must be finite")
        if np.any(lo > hi):
            raise InputError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, dims: int, radius: float) -> "Box":
        return cls(np.full(dims, -float(radius)), np.full(dims, float(radius)))

    @property
    def dims(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(self.lower <= p) and np.all(p <= self.upper))

    def bisect(self, axis: int):
        mid = 0.5 * (self.lower[axis] + self.upper[axis])
        hi_left = self.upper.copy()
        hi_left[axis] = mid
        lo_right = self.lower.copy()
        lo_right[axis] = mid
        return Box(self.lower, hi_left), Box(lo_right, self.upper)


@dataclass
class FalsifyQuery:
    """Search for a feasible point where some violation expression is positive.

    Parameters
    ----------
    variables : list of str
        Names of the variables; variable ``k`` of the expressions is dimension
        ``k`` of ``region``.
    region : Box
    violations : dict
        Maps a condition name to an expression; a value ``> 0`` violates it.
    constraints : list of Expr
        Feasibility constraints, each satisfied when ``<= 0``.
    exclusion_radius : float
        Points with ``sum of z_i**2 < exclusion_radius**2`` over
        ``exclusion_vars`` are excluded from the search.
    exclusion_vars : sequence of int, optional
        Dimensions measured by the exclusion ball; default all.
    delta : float
        Counterexamples must exceed ``delta / 2``.
    """

    variables: list
    region: Box
    violations: dict
    constraints: list = field(default_factory=list)
    exclusion_radius: float = 0.0
    exclusion_vars: tuple = None
    delta: float = 1e-4

    def __post_init__(self):
        self.variables = [str(v) for v in self.variables]
        if len(self.variables) != self.region.dims:
            raise InputError(f"{len(self.variables)} variables for a {self.region.dims}-d box")
        if not self.violations:
            raise InputError("query has no violation conditions")
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if self.exclusion_radius < 0:
            raise ConfigurationError("exclusion radius must be nonnegative")
        if self.exclusion_vars is None:
            self.exclusion_vars = tuple(range(self.region.dims))
        self.exclusion_vars = tuple(int(i) for i in self.exclusion_vars)
        roots = list(self.violations.values()) + list(self.constraints)
        for index, name in variables(roots):
            if not 0 <= index < self.region.dims:
                raise InputError(f"variable {name} is not a dimension of the region")
            if name != self.variables[index]:
                raise InputError(f"variable {index} is named {name!r}, "
                                 f"declared {self.variables[index]!r}")

    def var(self, k: int) -> Expr:
        return Expr("var", value=(k, self.variables[k]))

    def all_constraints(self):
        """Declared constraints plus the exclusion ball, if any."""
        out = list(self.constraints)
        if self.exclusion_radius > 0:
            zs = [self.var(k) for k in self.exclusion_vars]
            out.append(const(self.exclusion_radius ** 2) - esum(square(z) for z in zs))
        return out


@dataclass
class FalsifyResult:
    status: str
    point: np.ndarray = None
    condition: str = None
    value: float = None
    stats: dict = field(default_factory=dict)

    @property
    def unsat(self) -> bool:
        return self.status == UNSAT


def interval_eval(expr: Expr, box: Box, mean_value: bool = True) -> iv.Interval:
    """Sound enclosure of the range of ``expr`` over ``box``."""
    nvars = box.dims
    for index, name in variables([expr]):
        if index >= nvars:
            raise InputError(f"variable {name} is not a dimension of the box")
    enc = Encloser([expr], nvars, mean_value=mean_value)
    lo, hi = enc(box.lower[:, None], box.upper[:, None])[0]
    return iv.Interval(float(lo[0]), float(hi[0]))


def falsify(query: FalsifyQuery, max_boxes: int = 1_000_000, max_depth: int = 60,
            batch: int = 2048, mean_value: bool = True) -> FalsifyResult:
    """Branch-and-bound search for a counterexample.

    Boxes are processed breadth-first in batches. When a batch yields
    counterexamples the one from the box with the smallest id wins; ids
    number the bisection tree breadth-first, so the choice does not depend
    on the batch size.

    Returns
    -------
    FalsifyResult
        ``status`` is ``"unsat"``, ``"counterexample"`` or
        ``"depth_exhausted"``. ``stats`` holds ``boxes`` (processed),
        ``max_depth`` (deepest box seen), ``discharged``, ``infeasible``,
        ``undecided``, ``open`` (queued when the budget ran out),
        ``open_by_condition`` (open boxes where each condition is still
        live) and ``seconds``.
    """
    if not 1 <= max_depth <= MAX_TREE_DEPTH:
        raise ConfigurationError(f"max_depth must lie in [1, {MAX_TREE_DEPTH}]")
    start = time.perf_counter()
    d = query.region.dims
    names = list(query.violations)
    roots = [query.violations[n] for n in names] + query.all_constraints()
    nv, nr = len(names), len(roots)
    enclosers = [Encloser([r], d, mean_value=mean_value) for r in roots]
    point_eval = Program(roots, d)
    depends = np.zeros((nr, d), dtype=bool)
    for j, r in enumerate(roots):
        for index, _ in variables([r]):
            depends[j, index] = True
    region_w = query.region.widths
    scale = np.where(region_w > 0, region_w, 1.0)
    half_delta = 0.5 * query.delta

    # Per box: bounds, "root still matters" flags (violation not yet
    # discharged, constraint not yet known to hold), depth and tree id.
    lo = query.region.lower[None, :].copy()
    hi = query.region.upper[None, :].copy()
    rlo = np.full((1, nr), -np.inf)
    rhi = np.full((1, nr), np.inf)
    live = np.ones((1, nr), dtype=bool)
    depth = np.zeros(1, dtype=np.int64)
    ident = np.ones(1, dtype=np.int64)
    stats = dict(boxes=0, max_depth=0, discharged=0, infeasible=0, undecided=0)
    best = None

    while lo.shape[0] and best is None:
        room = max_boxes - stats["boxes"]
        if room <= 0:
            break
        take = min(batch, lo.shape[0], room)
        b = slice(0, take)
        blo, bhi, brlo, brhi, blive, bdep, bid = (lo[b], hi[b], rlo[b], rhi[b], live[b],
                                                 depth[b], ident[b])
        rest = slice(take, None)
        lo, hi, rlo, rhi, live, depth, ident = (lo[rest], hi[rest], rlo[rest], rhi[rest],
                                                live[rest], depth[rest], ident[rest])
        stats["boxes"] += take
        stats["max_depth"] = max(stats["max_depth"], int(bdep.max()))

        brlo, brhi, blive = brlo.copy(), brhi.copy(), blive.copy()
        for j in range(nr):
            rows = np.flatnonzero(blive[:, j])
            if not rows.size:
                continue
            (elo, ehi), = enclosers[j](blo[rows].T, bhi[rows].T)
            # A sub-box's range lies inside its parent's enclosure.
            brlo[rows, j] = np.maximum(brlo[rows, j], elo)
            brhi[rows, j] = np.minimum(brhi[rows, j], ehi)
            # NaN bounds leave the root live, which is the safe side.
            blive[rows, j] = ~(brhi[rows, j] <= 0)
        infeasible = np.zeros(take, dtype=bool)
        for j in range(nv, nr):
            infeasible |= brlo[:, j] > 0
        discharged = ~infeasible & ~blive[:, :nv].any(axis=1)
        stats["infeasible"] += int(infeasible.sum())
        stats["discharged"] += int(discharged.sum())
        keep = ~infeasible & ~discharged
        if not keep.any():
            continue
        blo, bhi, brlo, brhi, blive, bdep, bid = (blo[keep], bhi[keep], brlo[keep], brhi[keep],
                                                 blive[keep], bdep[keep], bid[keep])

        mid = 0.5 * (blo + bhi)
        vals = point_eval.points(mid.T)
        feasible = np.ones(mid.shape[0], dtype=bool)
        for j in range(nv, nr):
            feasible &= vals[j] <= 0
        hit = np.zeros((mid.shape[0], nv), dtype=bool)
        for k in range(nv):
            hit[:, k] = feasible & blive[:, k] & (vals[k] > half_delta)
        rows = np.flatnonzero(hit.any(axis=1))
        if rows.size:
            r = rows[np.argmin(bid[rows])]
            k = int(np.flatnonzero(hit[r])[0])
            best = (mid[r].copy(), names[k], float(vals[k][r]))
            break

        can_split = bdep < max_depth
        stats["undecided"] += int((~can_split).sum())
        blo, bhi, brlo, brhi, blive, bdep, bid = (blo[can_split], bhi[can_split],
                                                 brlo[can_split], brhi[can_split],
                                                 blive[can_split], bdep[can_split],
                                                 bid[can_split])
        if not blo.shape[0]:
            continue
        # Only dimensions that a live root depends on are worth splitting.
        relevant = (blive.astype(np.int64) @ depends.astype(np.int64)) > 0
        relevant[~relevant.any(axis=1)] = True
        width = np.where(relevant, (bhi - blo) / scale, -1.0)
        axis = np.argmax(width, axis=1)
        rows = np.arange(blo.shape[0])
        cut = 0.5 * (blo[rows, axis] + bhi[rows, axis])
        left_hi = bhi.copy()
        left_hi[rows, axis] = cut
        right_lo = blo.copy()
        right_lo[rows, axis] = cut

        def pair(a, b_):
            # Interleave children so the queue stays in breadth-first id order.
            return np.stack([a, b_], axis=1).reshape((-1,) + a.shape[1:])

        lo = np.concatenate([lo, pair(blo, right_lo)])
        hi = np.concatenate([hi, pair(left_hi, bhi)])
        rlo = np.concatenate([rlo, pair(brlo, brlo)])
        rhi = np.concatenate([rhi, pair(brhi, brhi)])
        live = np.concatenate([live, pair(blive, blive)])
        depth = np.concatenate([depth, np.repeat(bdep + 1, 2)])
        ident = np.concatenate([ident, pair(2 * bid, 2 * bid + 1)])

    stats["open"] = int(lo.shape[0])
    stats["open_by_condition"] = {n: int(live[:, k].sum()) for k, n in enumerate(names)}
    stats["seconds"] = time.perf_counter() - start
    if best is not None:
        point, name, value = best
        return FalsifyResult(COUNTEREXAMPLE, point=point, condition=name, value=value,
                             stats=stats)
    if stats["undecided"] or lo.shape[0]:
        return FalsifyResult(DEPTH_EXHAUSTED, stats=stats)
    return FalsifyResult(UNSAT, stats=stats)


def check_point(query: FalsifyQuery, point):
    """Violation values and feasibility of one point in plain floating point."""
    names = list(query.violations)
    cons = query.all_constraints()
    prog = Program([query.violations[n] for n in names] + cons, query.region.dims)
    vals = prog.points(np.asarray(point, dtype=float).reshape(-1, 1))
    feasible = query.region.contains(point) and all(v[0] <= 0 for v in vals[len(names):])
    return {n: float(v[0]) for n, v in zip(names, vals)}, feasible


def node_count(query: FalsifyQuery) -> int:
    return len(topological(list(query.violations.values()) + query.all_constraints()))


def dense_grid_violations(query: FalsifyQuery, points_per_axis: int, chunk: int = 200_000,
                          slack: float = 0.0):
    """Count feasible grid points where some violation exceeds ``slack``.

    The grid has ``points_per_axis`` points per dimension, endpoints included.
    Returns ``(count, worst_value, worst_point)``.
    """
    d = query.region.dims
    axes = [np.linspace(query.region.lower[k], query.region.upper[k], points_per_axis)
            for k in range(d)]
    names = list(query.violations)
    cons = query.all_constraints()
    prog = Program([query.violations[n] for n in names] + cons, d)
    total = points_per_axis ** d
    count, worst, worst_point = 0, -math.inf, None
    for s in range(0, total, chunk):
        flat = np.arange(s, min(total, s + chunk))
        idx = np.unravel_index(flat, (points_per_axis,) * d)
        Z = np.stack([axes[k][idx[k]] for k in range(d)])
        vals = prog.points(Z)
        feasible = np.ones(Z.shape[1], dtype=bool)
        for v in vals[len(names):]:
            feasible &= v <= 0
        m = np.max(np.stack(vals[:len(names)]), axis=0)
        m = np.where(feasible, m, -math.inf)
        count += int(np.sum(m > slack))
        j = int(np.argmax(m))
        if m[j] > worst:
            worst, worst_point = float(m[j]), Z[:, j].copy()
    return count, worst, worst_point
