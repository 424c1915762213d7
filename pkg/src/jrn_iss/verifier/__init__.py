"""Interval branch-and-bound falsifier for Lyapunov conditions."""

from .bnb import (COUNTEREXAMPLE, DEPTH_EXHAUSTED, UNSAT, Box, FalsifyQuery, FalsifyResult,
                  check_point, dense_grid_violations, falsify, interval_eval)
from .interval import Interval
from .smtlib import export_smtlib, parse_smtlib

__all__ = [
    "Box", "COUNTEREXAMPLE", "DEPTH_EXHAUSTED", "FalsifyQuery", "FalsifyResult", "Interval",
    "UNSAT", "check_point", "dense_grid_violations", "export_smtlib", "falsify",
    "interval_eval", "parse_smtlib",
]
