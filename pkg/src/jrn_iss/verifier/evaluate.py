"""Vectorized evaluation of expression DAGs over points and boxes.

A :class:`Program` linearizes a set of roots once. It then evaluates them
over ``K`` points or boxes per call, with one column per point/box in the
``(d, K)`` input arrays.
"""

from __future__ import annotations

import numpy as np

from . import interval as iv
from .expr import topological

_POINT_UNARY = {
    "neg": np.negative,
    "sq": np.square,
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
}


class Program:
    def __init__(self, roots, nvars: int):
        self.roots = list(roots)
        self.nvars = nvars
        self.nodes = topological(self.roots)
        index = {id(n): k for k, n in enumerate(self.nodes)}
        self.arg_index = [[index[id(a)] for a in n.args] for n in self.nodes]
        self.root_index = [index[id(r)] for r in self.roots]
        last = list(range(len(self.nodes)))
        for k, args in enumerate(self.arg_index):
            for a in args:
                last[a] = max(last[a], k)
        keep = set(self.root_index)
        self.release = [[] for _ in self.nodes]
        for a, k in enumerate(last):
            if a not in keep:
                self.release[k].append(a)
        for n in self.nodes:
            if n.op == "var" and not 0 <= n.value[0] < nvars:
                raise ValueError(f"variable {n.value[1]} outside the declared {nvars} dims")

    # -- points ---------------------------------------------------------------

    def points(self, X):
        """Evaluate every root at the columns of ``X`` (shape ``(d, K)``)."""
        X = np.asarray(X, dtype=float)
        vals = [None] * len(self.nodes)
        for k, node in enumerate(self.nodes):
            op, args = node.op, self.arg_index[k]
            if op == "var":
                v = X[node.value[0]]
            elif op == "const":
                v = np.full(X.shape[1], node.value)
            elif op == "add":
                v = vals[args[0]]
                for a in args[1:]:
                    v = v + vals[a]
            elif op == "sub":
                v = vals[args[0]] - vals[args[1]]
            elif op == "mul":
                v = vals[args[0]] * vals[args[1]]
            elif op == "norm":
                s = vals[args[0]] ** 2
                for a in args[1:]:
                    s = s + vals[a] ** 2
                v = np.sqrt(s)
            else:
                v = _POINT_UNARY[op](vals[args[0]])
            vals[k] = v
            for r in self.release[k]:
                vals[r] = None
        return [vals[r] for r in self.root_index]

    # -- boxes ----------------------------------------------------------------

    def intervals(self, lo, hi, gradients: bool = False):
        """Natural interval extension over the boxes ``[lo, hi]``.

        With ``gradients`` also returns, for each root, an interval enclosure
        of its (generalized) gradient over the box as ``(glo, ghi)`` arrays of
        shape ``(d, K)``.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d, K = lo.shape
        vals = [None] * len(self.nodes)
        grads = [None] * len(self.nodes)
        for k, node in enumerate(self.nodes):
            op, args = node.op, self.arg_index[k]
            g = None
            if op == "var":
                i = node.value[0]
                v = (lo[i], hi[i])
                if gradients:
                    e = np.zeros((d, K))
                    e[i] = 1.0
                    g = (e, e)
            elif op == "const":
                v = (np.full(K, node.value), np.full(K, node.value))
            elif op == "add":
                v = vals[args[0]]
                for a in args[1:]:
                    v = iv.add(v, vals[a])
                if gradients:
                    g = _gsum([grads[a] for a in args])
            elif op == "sub":
                v = iv.sub(vals[args[0]], vals[args[1]])
                if gradients:
                    ga, gb = grads[args[0]], grads[args[1]]
                    g = _gsum([ga, None if gb is None else iv.neg(gb)])
            elif op == "mul":
                ca, cb = node.args[0], node.args[1]
                a, b = vals[args[0]], vals[args[1]]
                if ca.op == "const":
                    v = iv.scale(ca.value, b)
                    if gradients and grads[args[1]] is not None:
                        g = iv.scale(ca.value, grads[args[1]])
                elif cb.op == "const":
                    v = iv.scale(cb.value, a)
                    if gradients and grads[args[0]] is not None:
                        g = iv.scale(cb.value, grads[args[0]])
                else:
                    v = iv.mul(a, b)
                    if gradients:
                        ga, gb = grads[args[0]], grads[args[1]]
                        g = _gsum([None if ga is None else iv.mul(b, ga),
                                   None if gb is None else iv.mul(a, gb)])
            elif op == "neg":
                v = iv.neg(vals[args[0]])
                if gradients and grads[args[0]] is not None:
                    g = iv.neg(grads[args[0]])
            elif op == "sq":
                a = vals[args[0]]
                v = iv.square(a)
                if gradients and grads[args[0]] is not None:
                    g = iv.mul(iv.scale(2.0, a), grads[args[0]])
            elif op == "tanh":
                v = iv.tanh(vals[args[0]])
                if gradients and grads[args[0]] is not None:
                    t2 = iv.square(v)
                    deriv = iv.widen(1.0 - t2[1], 1.0 - t2[0])
                    g = iv.mul((np.maximum(deriv[0], 0.0), np.minimum(deriv[1], 1.0)),
                               grads[args[0]])
            elif op == "sin":
                a = vals[args[0]]
                v = iv.sin(a)
                if gradients and grads[args[0]] is not None:
                    g = iv.mul(iv.cos(a), grads[args[0]])
            elif op == "cos":
                a = vals[args[0]]
                v = iv.cos(a)
                if gradients and grads[args[0]] is not None:
                    g = iv.mul(iv.neg(iv.sin(a)), grads[args[0]])
            elif op == "abs":
                a = vals[args[0]]
                v = iv.absolute(a)
                if gradients and grads[args[0]] is not None:
                    s_lo = np.where(a[0] >= 0, 1.0, -1.0)
                    s_hi = np.where(a[1] <= 0, -1.0, 1.0)
                    g = iv.mul((s_lo, s_hi), grads[args[0]])
            elif op == "norm":
                parts = [vals[a] for a in args]
                s = iv.square(parts[0])
                for p in parts[1:]:
                    s = iv.add(s, iv.square(p))
                v = iv.sqrt(s)
                if gradients:
                    positive = v[0] > 0
                    safe = (np.where(positive, v[0], 1.0), np.where(positive, v[1], 1.0))
                    inv = iv.reciprocal_positive(safe)
                    terms = []
                    for a, p in zip(args, parts):
                        if grads[a] is None:
                            continue
                        q = iv.mul(p, inv)
                        q = (np.where(positive, np.maximum(q[0], -1.0), -1.0),
                             np.where(positive, np.minimum(q[1], 1.0), 1.0))
                        terms.append(iv.mul(q, grads[a]))
                    g = _gsum(terms)
            else:  # pragma: no cover - guarded by Expr construction
                raise ValueError(f"unsupported node kind {op!r}")
            vals[k] = v
            grads[k] = g
            for r in self.release[k]:
                vals[r] = None
                grads[r] = None
        out = [vals[r] for r in self.root_index]
        if gradients:
            zero = np.zeros((d, K))
            return out, [grads[r] if grads[r] is not None else (zero, zero)
                         for r in self.root_index]
        return out


def _gsum(gs):
    gs = [g for g in gs if g is not None]
    if not gs:
        return None
    out = gs[0]
    for g in gs[1:]:
        out = iv.add(out, g)
    return out


class Encloser:
    """Tight range bounds for a list of root expressions over boxes.

    Each root is split into its top-level summands. Every summand gets the
    intersection of its natural extension and its mean-value form
    ``f(c) + G·([lo, hi] - c)``, and the summand bounds are added. Splitting
    keeps nonsmooth terms such as ``-gamma * |x|`` out of the mean-value form
    of the smooth part.
    """

    def __init__(self, roots, nvars: int, mean_value: bool = True):
        self.roots = list(roots)
        self.parts = [list(r.args) if r.op == "add" else [r] for r in self.roots]
        flat = [p for ps in self.parts for p in ps]
        self.program = Program(flat, nvars)
        self.mean_value = mean_value

    def __call__(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if self.mean_value:
            nat, grads = self.program.intervals(lo, hi, gradients=True)
            c = 0.5 * (lo + hi)
            fc = self.program.intervals(c, c)
            rad = iv.up(np.maximum(hi - c, c - lo))
            bounds = []
            for (vlo, vhi), (glo, ghi), (clo, chi) in zip(nat, grads, fc):
                gmax = np.maximum(np.abs(glo), np.abs(ghi))
                spread = iv.up(np.sum(iv.up(gmax * rad), axis=0))
                mv = (iv.down(clo - spread), iv.up(chi + spread))
                bounds.append(iv.intersect((vlo, vhi), mv))
        else:
            bounds = self.program.intervals(lo, hi)
        out, k = [], 0
        for ps in self.parts:
            acc = bounds[k]
            for j in range(1, len(ps)):
                acc = iv.add(acc, bounds[k + j])
            k += len(ps)
            out.append(acc)
        return out
