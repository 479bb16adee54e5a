"""Conic program containers for the embedded solver.

A ConicProgram is a linear objective over n variables with linear
equalities, linear inequalities, box bounds, and two-dimensional unit-ball
constraints x_i^2 + x_j^2 <= 1 on disjoint index pairs. There is no
modeling sugar here: absolute values and max(0, .) terms must be
pre-linearized by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


def _as_csr(mat, n_cols: int) -> sp.csr_matrix:
    if mat is None:
        return sp.csr_matrix((0, n_cols))
    if sp.issparse(mat):
        out = mat.tocsr().astype(float)
    else:
        out = sp.csr_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))
    if out.shape[1] != n_cols:
        raise ValueError(f"matrix has {out.shape[1]} columns, expected {n_cols}")
    return out


@dataclass
class ConicProgram:
    """min c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub, balls."""

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    balls: tuple[tuple[int, int], ...] = ()

    @classmethod
    def build(
        cls,
        c,
        A_eq=None,
        b_eq=None,
        A_in=None,
        b_in=None,
        lb=None,
        ub=None,
        balls: Iterable[Sequence[int]] = (),
    ) -> "ConicProgram":
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        prog = cls(
            c=c,
            A_eq=_as_csr(A_eq, n),
            b_eq=np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel(),
            A_in=_as_csr(A_in, n),
            b_in=np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel(),
            lb=np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).ravel(),
            ub=np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).ravel(),
            balls=tuple((int(i), int(j)) for i, j in balls),
        )
        prog.validate()
        return prog

    @property
    def n(self) -> int:
        return self.c.size

    def validate(self) -> None:
        n = self.n
        if self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("A_eq rows != b_eq length")
        if self.A_in.shape[0] != self.b_in.size:
            raise ValueError("A_in rows != b_in length")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound vectors must have length n")
        seen: set[int] = set()
        for i, j in self.balls:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"bad ball index pair ({i}, {j})")
            if i in seen or j in seen:
                raise ValueError(f"ball index pairs must be disjoint; ({i}, {j}) reuses a variable")
            seen.update((i, j))

    def fix_variables(self, fixed: Mapping[int, float]):
        """Substitute fixed variables; returns (reduced, keep_indices, cost_offset).

        Ball pairs with one fixed member become box bounds on the survivor;
        a fully fixed pair that violates its ball is encoded as an
        unsatisfiable inequality so the solver reports infeasibility.
        """
        fixed = {int(k): float(v) for k, v in fixed.items()}
        keep = np.array([k for k in range(self.n) if k not in fixed], dtype=int)
        vals = np.zeros(self.n)
        for k, v in fixed.items():
            vals[k] = v
        old_to_new = {int(o): m for m, o in enumerate(keep)}

        c = self.c[keep]
        offset = float(np.dot(self.c, vals))
        A_eq = self.A_eq[:, keep]
        b_eq = self.b_eq - self.A_eq @ vals
        in_rows = [self.A_in[:, keep]]
        in_rhs = [self.b_in - self.A_in @ vals]
        lb, ub = self.lb[keep].copy(), self.ub[keep].copy()

        balls = []
        for i, j in self.balls:
            fi, fj = i in fixed, j in fixed
            if not fi and not fj:
                balls.append((old_to_new[i], old_to_new[j]))
            elif fi and fj:
                if fixed[i] ** 2 + fixed[j] ** 2 > 1.0 + 1e-12:
                    row = sp.csr_matrix((1, keep.size))
                    in_rows.append(row)
                    in_rhs.append(np.array([-1.0]))
            else:
                fixed_val = fixed[i] if fi else fixed[j]
                free_new = old_to_new[j] if fi else old_to_new[i]
                slack = 1.0 - fixed_val * fixed_val
                if slack < -1e-12:
                    row = sp.csr_matrix((1, keep.size))
                    in_rows.append(row)
                    in_rhs.append(np.array([-1.0]))
                else:
                    r = math.sqrt(max(slack, 0.0))
                    lb[free_new] = max(lb[free_new], -r)
                    ub[free_new] = min(ub[free_new], r)

        reduced = ConicProgram(
            c=c,
            A_eq=A_eq.tocsr(),
            b_eq=b_eq,
            A_in=sp.vstack(in_rows).tocsr() if len(in_rows) > 1 else in_rows[0].tocsr(),
            b_in=np.concatenate(in_rhs),
            lb=lb,
            ub=ub,
            balls=tuple(balls),
        )
        return reduced, keep, offset


@dataclass
class MixedBinaryProgram:
    """Conic program plus a set of variable indices restricted to {0, 1}."""

    base: ConicProgram
    binary_indices: tuple[int, ...] = ()

    def __post_init__(self):
        self.binary_indices = tuple(int(i) for i in self.binary_indices)
        for i in self.binary_indices:
            if not 0 <= i < self.base.n:
                raise ValueError(f"binary index {i} out of range")
            if self.base.lb[i] != 0.0 or self.base.ub[i] != 1.0:
                raise ValueError(f"binary variable {i} must carry box bounds [0, 1]")

    @property
    def n_binaries(self) -> int:
        return len(self.binary_indices)


@dataclass
class Solution:
    """Solver output; status 'optimal' certifies the KKT residuals <= tol."""

    x: np.ndarray
    objective: float
    status: str  # optimal | infeasible | unbounded | tolerance_not_met
    kkt_residuals: tuple[float, float, float]  # (primal, dual, gap)
    solve_time: float
    iterations: int = 0
    dual_objective: float | None = None
    binary_values: tuple[float, ...] | None = None
    node_count: int | None = None


def check_feasibility(prog: ConicProgram, x: np.ndarray, include_equalities: bool = True) -> float:
    """Largest constraint violation of x, replayed independently of any solver."""
    x = np.asarray(x, dtype=float)
    worst = 0.0
    if include_equalities and prog.b_eq.size:
        worst = max(worst, float(np.max(np.abs(prog.A_eq @ x - prog.b_eq))))
    if prog.b_in.size:
        worst = max(worst, float(np.max(prog.A_in @ x - prog.b_in, initial=0.0)))
    finite_lb = np.isfinite(prog.lb)
    if finite_lb.any():
        worst = max(worst, float(np.max(prog.lb[finite_lb] - x[finite_lb], initial=0.0)))
    finite_ub = np.isfinite(prog.ub)
    if finite_ub.any():
        worst = max(worst, float(np.max(x[finite_ub] - prog.ub[finite_ub], initial=0.0)))
    for i, j in prog.balls:
        worst = max(worst, x[i] * x[i] + x[j] * x[j] - 1.0)
    return worst


def dump(prog: ConicProgram) -> str:
    """Plain-text rendering of a program, for debugging.

    Format: header line, 'minimize' expression, one line per equality and
    inequality row, one line per ball pair, then bounds.
    """

    def expr(row: sp.csr_matrix) -> str:
        row = row.tocoo()
        if row.nnz == 0:
            return "0"
        return " + ".join(f"{v:.12g} x{c}" for c, v in zip(row.col, row.data))

    lines = [
        f"conic program: {prog.n} vars, {prog.b_eq.size} eq, "
        f"{prog.b_in.size} ineq, {len(prog.balls)} balls"
    ]
    lines.append("minimize: " + " + ".join(f"{v:.12g} x{k}" for k, v in enumerate(prog.c) if v != 0.0))
    for r in range(prog.b_eq.size):
        lines.append(f"  eq[{r}]: {expr(prog.A_eq.getrow(r))} = {prog.b_eq[r]:.12g}")
    for r in range(prog.b_in.size):
        lines.append(f"  in[{r}]: {expr(prog.A_in.getrow(r))} <= {prog.b_in[r]:.12g}")
    for k, (i, j) in enumerate(prog.balls):
        lines.append(f"  ball[{k}]: x{i}^2 + x{j}^2 <= 1")
    bounds = []
    for k in range(prog.n):
        lo, hi = prog.lb[k], prog.ub[k]
        if np.isneginf(lo) and np.isposinf(hi):
            continue
        bounds.append(f"{lo:.12g} <= x{k} <= {hi:.12g}")
    lines.append("bounds: " + ("; ".join(bounds) if bounds else "all free"))
    return "\n".join(lines)
