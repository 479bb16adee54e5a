"""Single-step optimal power flow variants over one solver stack.

Four variants share a lifted-variable program layout [alpha | phi | p_e |
p_g] with per-pair unit-ball constraints on the (cos, sin) entries of phi:

* reference      -- known line coefficients, flows linear in phi, explicit
                    nodal coupling; no alpha block.
* dd             -- order-1 Hankel representation of (phi, p_e) plus explicit
                    nodal coupling; solved through the relaxation and then
                    projected back onto the circles (the nonconvex target).
* dd-convex      -- same program, relaxation kept as-is (balls <= 1) with the
                    cosine-maximizing objective term.
* dd-generalized -- all-pairs lift with an extra injection Hankel block and
                    no explicit coupling (topology-agnostic).

The relaxation adds -beta * sum(cos entries) to the cost so the balls bind
at the optimum; tightness is always verified, never assumed.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .behavior import DataDrivenLineModel, cos_indices, sin_indices
from .conic import ConicProgram, MixedBinaryProgram, Solution
from .errors import DimensionMismatch, ModelNotPE, ProjectionInfeasible
from .grid import Grid, all_node_pairs
from .ipm import solve_convex
from .physics import edge_coeff_arrays, injection_matrix

logger = logging.getLogger(__name__)

VARIANTS = ("reference", "dd", "dd-convex", "dd-generalized")


@dataclass
class OpfLayout:
    """Column layout of the lifted OPF variable vector."""

    variant: str
    n: int
    alpha: slice
    phi: slice
    p_e: slice
    p_g: slice
    pairs: tuple[tuple[int, int], ...]
    edges: tuple[tuple[int, int], ...]
    nodes: tuple[int, ...]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def ball_pairs(self) -> tuple[tuple[int, int], ...]:
        base = self.phi.start
        return tuple(
            (base + 1 + 2 * k, base + 2 + 2 * k) for k in range(self.n_pairs)
        )

    def cos_cols(self) -> np.ndarray:
        return self.phi.start + cos_indices(self.n_pairs)

    def sin_cols(self) -> np.ndarray:
        return self.phi.start + sin_indices(self.n_pairs)


@dataclass
class LinearObjective:
    """f(p) = c_pe . p_e + c_pg . p_g; defaults to total transmission losses."""

    c_pe: np.ndarray | None = None
    c_pg: np.ndarray | None = None

    def vector(self, layout: OpfLayout) -> np.ndarray:
        c = np.zeros(layout.n)
        if self.c_pe is not None:
            pe = np.asarray(self.c_pe, dtype=float)
            if pe.size != layout.p_e.stop - layout.p_e.start:
                raise DimensionMismatch("c_pe length does not match the directional flow block")
            c[layout.p_e] = pe
        if self.c_pg is not None:
            pg = np.asarray(self.c_pg, dtype=float)
            if pg.size != layout.p_g.stop - layout.p_g.start:
                raise DimensionMismatch("c_pg length does not match the injection block")
            c[layout.p_g] = pg
        return c

    def value(self, p_e: np.ndarray, p_g: np.ndarray) -> float:
        out = 0.0
        if self.c_pe is not None:
            out += float(np.dot(self.c_pe, p_e))
        if self.c_pg is not None:
            out += float(np.dot(self.c_pg, p_g))
        return out


def losses_objective(grid: Grid) -> LinearObjective:
    return LinearObjective(c_pg=np.ones(grid.n_nodes))


class AppConstraints:
    """Application-dependent linear hooks over the (phi, p_e, p_g) blocks.

    Rows are sparse term maps {block: {index: coeff}}; equality rows read
    sum(terms) = rhs and inequality rows sum(terms) <= rhs.
    """

    BLOCKS = ("phi", "p_e", "p_g")

    def __init__(self):
        self.eq_rows: list[tuple[dict, float]] = []
        self.ineq_rows: list[tuple[dict, float]] = []

    def add_eq(self, terms: Mapping[str, Mapping[int, float]], rhs: float) -> "AppConstraints":
        self._check(terms)
        self.eq_rows.append((dict(terms), float(rhs)))
        return self

    def add_ineq(self, terms: Mapping[str, Mapping[int, float]], rhs: float) -> "AppConstraints":
        self._check(terms)
        self.ineq_rows.append((dict(terms), float(rhs)))
        return self

    def _check(self, terms):
        for block in terms:
            if block not in self.BLOCKS:
                raise ValueError(f"unknown app-constraint block {block!r}")

    # convenience builders -------------------------------------------------

    def fix_injection(self, grid: Grid, node: int, value: float) -> "AppConstraints":
        return self.add_eq({"p_g": {grid.node_index(node): 1.0}}, value)

    def bound_injection(
        self, grid: Grid, node: int, lo: float | None = None, hi: float | None = None
    ) -> "AppConstraints":
        k = grid.node_index(node)
        if hi is not None:
            self.add_ineq({"p_g": {k: 1.0}}, hi)
        if lo is not None:
            self.add_ineq({"p_g": {k: -1.0}}, -lo)
        return self

    def bound_flows(self, grid: Grid, limit: float) -> "AppConstraints":
        for k in range(2 * grid.n_edges):
            self.add_ineq({"p_e": {k: 1.0}}, limit)
            self.add_ineq({"p_e": {k: -1.0}}, limit)
        return self

    def fix_phi(self, values: Sequence[float]) -> "AppConstraints":
        for k, v in enumerate(values):
            self.add_eq({"phi": {k: 1.0}}, float(v))
        return self

    # materialization -------------------------------------------------------

    def _rows(self, rows, layout: OpfLayout):
        offsets = {"phi": layout.phi.start, "p_e": layout.p_e.start, "p_g": layout.p_g.start}
        widths = {
            "phi": layout.phi.stop - layout.phi.start,
            "p_e": layout.p_e.stop - layout.p_e.start,
            "p_g": layout.p_g.stop - layout.p_g.start,
        }
        r_idx, c_idx, vals, rhs = [], [], [], []
        for r, (terms, b) in enumerate(rows):
            for block, coeffs in terms.items():
                for k, v in coeffs.items():
                    if not 0 <= int(k) < widths[block]:
                        raise DimensionMismatch(
                            f"app constraint touches {block}[{k}], width {widths[block]}"
                        )
                    r_idx.append(r)
                    c_idx.append(offsets[block] + int(k))
                    vals.append(float(v))
            rhs.append(b)
        mat = sp.csr_matrix((vals, (r_idx, c_idx)), shape=(len(rows), layout.n))
        return mat, np.asarray(rhs, dtype=float)

    def materialize(self, layout: OpfLayout):
        A_eq, b_eq = self._rows(self.eq_rows, layout)
        A_in, b_in = self._rows(self.ineq_rows, layout)
        return A_eq, b_eq, A_in, b_in

    def max_violation(self, phi: np.ndarray, p_e: np.ndarray, p_g: np.ndarray) -> float:
        vals = {"phi": phi, "p_e": p_e, "p_g": p_g}

        def row_value(terms):
            return sum(v * vals[block][int(k)] for block, coeffs in terms.items() for k, v in coeffs.items())

        worst = 0.0
        for terms, rhs in self.eq_rows:
            worst = max(worst, abs(row_value(terms) - rhs))
        for terms, rhs in self.ineq_rows:
            worst = max(worst, row_value(terms) - rhs)
        return worst


# --- power-flow constraint templates ------------------------------------------


@dataclass
class PfTemplate:
    """Per-step power-flow block shared by the OPF builders and the MPC."""

    variant: str
    layout: OpfLayout
    eq: sp.csr_matrix
    eq_rhs: np.ndarray
    model: DataDrivenLineModel | None


def _make_layout(variant: str, grid: Grid, n_alpha: int, pairs) -> OpfLayout:
    n_phi = 2 * len(pairs) + 1
    n_pe = 2 * grid.n_edges
    n_pg = grid.n_nodes
    a0 = 0
    p0 = n_alpha
    e0 = p0 + n_phi
    g0 = e0 + n_pe
    return OpfLayout(
        variant=variant,
        n=g0 + n_pg,
        alpha=slice(a0, n_alpha),
        phi=slice(p0, p0 + n_phi),
        p_e=slice(e0, e0 + n_pe),
        p_g=slice(g0, g0 + n_pg),
        pairs=tuple(pairs),
        edges=tuple(grid.edges),
        nodes=tuple(grid.nodes),
    )


def _check_model(model: DataDrivenLineModel | None, n_phi: int, n_pe: int, need_pg: int | None):
    if model is None:
        raise ModelNotPE("data-driven variants need a persistently exciting model")
    if model.pe_report is None or not model.pe_report.pe:
        raise ModelNotPE("model lifted block is not certified persistently exciting")
    if model.H_phi.shape[0] != n_phi:
        raise DimensionMismatch(
            f"model lifted dimension {model.H_phi.shape[0]}, grid needs {n_phi}"
        )
    if model.H_pe.shape[0] != n_pe:
        raise DimensionMismatch(f"model has {model.H_pe.shape[0]} flow rows, grid needs {n_pe}")
    if need_pg is not None:
        if model.H_pg is None:
            raise DimensionMismatch("topology-agnostic variant needs the injection Hankel block")
        if model.H_pg.shape[0] != need_pg:
            raise DimensionMismatch(
                f"model has {model.H_pg.shape[0]} injection rows, grid needs {need_pg}"
            )


def pf_template(
    grid: Grid,
    variant: str,
    model: DataDrivenLineModel | None = None,
) -> PfTemplate:
    """Equality rows tying [alpha | phi | p_e | p_g] together for one time step."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    n_pe = 2 * grid.n_edges
    n_pg = grid.n_nodes
    m_inj = injection_matrix(grid)

    if variant == "reference":
        pairs = tuple(grid.edges)
        layout = _make_layout(variant, grid, 0, pairs)
        n_phi = 2 * len(pairs) + 1
        cf, ct, cc, sc = edge_coeff_arrays(grid)
        rows = sp.lil_matrix((n_pe + n_pg + 1, layout.n))
        rhs = np.zeros(n_pe + n_pg + 1)
        for l in range(grid.n_edges):
            c_col = layout.phi.start + 1 + 2 * l
            s_col = layout.phi.start + 2 + 2 * l
            for d, (const, s_sign) in enumerate(((cf[l], 1.0), (ct[l], -1.0))):
                r = 2 * l + d
                rows[r, layout.p_e.start + r] = 1.0
                rows[r, layout.phi.start] = -const
                rows[r, c_col] = cc[l]
                rows[r, s_col] = s_sign * sc[l]
        _coupling_rows(rows, n_pe, m_inj, layout)
        rows[n_pe + n_pg, layout.phi.start] = 1.0
        rhs[n_pe + n_pg] = 1.0
        return PfTemplate(variant, layout, rows.tocsr(), rhs, None)

    if variant in ("dd", "dd-convex"):
        pairs = tuple(grid.edges)
        n_phi = 2 * len(pairs) + 1
        _check_model(model, n_phi, n_pe, None)
        n_alpha = model.n_columns
        layout = _make_layout(variant, grid, n_alpha, pairs)
        hank = sp.lil_matrix((n_phi + n_pe + n_pg + 1, layout.n))
        rhs = np.zeros(n_phi + n_pe + n_pg + 1)
        hank[:n_phi, layout.alpha] = model.H_phi
        hank[n_phi : n_phi + n_pe, layout.alpha] = model.H_pe
        for k in range(n_phi):
            hank[k, layout.phi.start + k] = -1.0
        for k in range(n_pe):
            hank[n_phi + k, layout.p_e.start + k] = -1.0
        _coupling_rows(hank, n_phi + n_pe, m_inj, layout)
        hank[n_phi + n_pe + n_pg, layout.phi.start] = 1.0
        rhs[n_phi + n_pe + n_pg] = 1.0
        return PfTemplate(variant, layout, hank.tocsr(), rhs, model)

    # dd-generalized
    pairs = tuple(all_node_pairs(grid))
    n_phi = 2 * len(pairs) + 1
    _check_model(model, n_phi, n_pe, n_pg)
    n_alpha = model.n_columns
    layout = _make_layout(variant, grid, n_alpha, pairs)
    hank = sp.lil_matrix((n_phi + n_pe + n_pg + 1, layout.n))
    rhs = np.zeros(n_phi + n_pe + n_pg + 1)
    hank[:n_phi, layout.alpha] = model.H_phi
    hank[n_phi : n_phi + n_pe, layout.alpha] = model.H_pe
    hank[n_phi + n_pe : n_phi + n_pe + n_pg, layout.alpha] = model.H_pg
    for k in range(n_phi):
        hank[k, layout.phi.start + k] = -1.0
    for k in range(n_pe):
        hank[n_phi + k, layout.p_e.start + k] = -1.0
    for k in range(n_pg):
        hank[n_phi + n_pe + k, layout.p_g.start + k] = -1.0
    hank[n_phi + n_pe + n_pg, layout.phi.start] = 1.0
    rhs[n_phi + n_pe + n_pg] = 1.0
    return PfTemplate(variant, layout, hank.tocsr(), rhs, model)


def _coupling_rows(mat, row0: int, m_inj: np.ndarray, layout: OpfLayout):
    n_pg, n_pe = m_inj.shape
    for i in range(n_pg):
        mat[row0 + i, layout.p_g.start + i] = 1.0
        for k in range(n_pe):
            if m_inj[i, k]:
                mat[row0 + i, layout.p_e.start + k] = -m_inj[i, k]


# --- program builders ----------------------------------------------------------


def _assemble(
    template: PfTemplate,
    app: AppConstraints | None,
    objective: LinearObjective,
    beta: float,
) -> tuple[MixedBinaryProgram, OpfLayout]:
    layout = template.layout
    c = objective.vector(layout)
    c[layout.cos_cols()] -= beta
    eq_mats, eq_rhs = [template.eq], [template.eq_rhs]
    in_mats, in_rhs = [], []
    if app is not None:
        a_eq, b_eq, a_in, b_in = app.materialize(layout)
        if b_eq.size:
            eq_mats.append(a_eq)
            eq_rhs.append(b_eq)
        if b_in.size:
            in_mats.append(a_in)
            in_rhs.append(b_in)
    prog = ConicProgram.build(
        c=c,
        A_eq=sp.vstack(eq_mats).tocsr(),
        b_eq=np.concatenate(eq_rhs),
        A_in=sp.vstack(in_mats).tocsr() if in_mats else None,
        b_in=np.concatenate(in_rhs) if in_rhs else None,
        balls=layout.ball_pairs(),
    )
    return MixedBinaryProgram(prog, ()), layout


def build_reference_opf(
    grid: Grid,
    app: AppConstraints | None = None,
    objective: LinearObjective | None = None,
    beta: float = 1.0,
) -> tuple[MixedBinaryProgram, OpfLayout]:
    objective = objective or losses_objective(grid)
    return _assemble(pf_template(grid, "reference"), app, objective, beta)


def build_dd_opf(
    grid: Grid,
    model: DataDrivenLineModel,
    app: AppConstraints | None = None,
    objective: LinearObjective | None = None,
    relaxed: bool = True,
    beta: float = 1.0,
) -> tuple[MixedBinaryProgram, OpfLayout]:
    """Hankel-represented OPF; relaxed=False marks the circle-equality target,
    solved as the same relaxed program followed by projection."""
    objective = objective or losses_objective(grid)
    variant = "dd-convex" if relaxed else "dd"
    return _assemble(pf_template(grid, variant, model), app, objective, beta)


def build_generalized_dd_opf(
    grid: Grid,
    model: DataDrivenLineModel,
    app: AppConstraints | None = None,
    objective: LinearObjective | None = None,
    beta: float = 1.0,
) -> tuple[MixedBinaryProgram, OpfLayout]:
    objective = objective or losses_objective(grid)
    return _assemble(pf_template(grid, "dd-generalized", model), app, objective, beta)


# --- solutions, tightness, restoration ---------------------------------------


@dataclass
class TightnessReport:
    residuals: np.ndarray  # per pair: 1 - (cos^2 + sin^2)
    max_residual: float
    tol: float
    passed: bool


def tightness_report(phi: np.ndarray, n_pairs: int, tol: float = 1e-6) -> TightnessReport:
    c = phi[cos_indices(n_pairs)]
    s = phi[sin_indices(n_pairs)]
    residuals = 1.0 - (c * c + s * s)
    worst = float(np.max(np.abs(residuals))) if n_pairs else 0.0
    return TightnessReport(residuals=residuals, max_residual=worst, tol=tol, passed=worst <= tol)


@dataclass
class OpfSolution:
    variant: str
    p_e: np.ndarray
    p_g: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray | None
    objective: float
    solver_objective: float
    status: str
    tightness: TightnessReport
    solve_time: float
    grid: Grid = field(repr=False, default=None)
    model: DataDrivenLineModel | None = field(repr=False, default=None)
    app: AppConstraints | None = field(repr=False, default=None)
    objective_spec: LinearObjective | None = field(repr=False, default=None)
    layout: OpfLayout | None = field(repr=False, default=None)
    raw: Solution | None = field(repr=False, default=None)
    restored: bool = False


def check_tightness(sol: OpfSolution, tol: float = 1e-6) -> TightnessReport:
    return tightness_report(sol.phi, len(sol.layout.pairs), tol)


def _recover_theta(phi: np.ndarray, n_pairs: int) -> np.ndarray:
    c = phi[cos_indices(n_pairs)]
    s = phi[sin_indices(n_pairs)]
    return np.arctan2(s, c)


def solve_opf(
    grid: Grid,
    variant: str,
    model: DataDrivenLineModel | None = None,
    app: AppConstraints | None = None,
    objective: LinearObjective | None = None,
    beta: float = 1.0,
    tol: float = 1e-8,
    tight_tol: float = 1e-6,
) -> OpfSolution:
    """Build, solve, and post-process one OPF instance.

    The 'dd' variant (circle equalities) runs the relaxation and then
    projects onto the circles, re-deriving alpha, p_e and p_g.
    """
    objective = objective or losses_objective(grid)
    if variant == "reference":
        prog, layout = build_reference_opf(grid, app, objective, beta)
    elif variant in ("dd", "dd-convex"):
        prog, layout = build_dd_opf(grid, model, app, objective, relaxed=variant == "dd-convex", beta=beta)
    elif variant == "dd-generalized":
        prog, layout = build_generalized_dd_opf(grid, model, app, objective, beta)
    else:
        raise ValueError(f"unknown variant {variant!r}")

    raw = solve_convex(prog.base, tol=tol)
    n_pairs = len(layout.pairs)
    if raw.status != "optimal":
        empty = np.zeros(0)
        return OpfSolution(
            variant=variant,
            p_e=empty,
            p_g=empty,
            theta=empty,
            phi=empty,
            alpha=None,
            objective=math.nan,
            solver_objective=raw.objective,
            status=raw.status,
            tightness=TightnessReport(np.zeros(n_pairs), math.inf, tight_tol, False),
            solve_time=raw.solve_time,
            grid=grid,
            model=model,
            app=app,
            objective_spec=objective,
            layout=layout,
            raw=raw,
        )

    phi = raw.x[layout.phi]
    p_e = raw.x[layout.p_e]
    p_g = raw.x[layout.p_g]
    alpha = raw.x[layout.alpha] if layout.alpha.stop > layout.alpha.start else None
    sol = OpfSolution(
        variant=variant,
        p_e=p_e,
        p_g=p_g,
        theta=_recover_theta(phi, n_pairs),
        phi=phi,
        alpha=alpha,
        objective=objective.value(p_e, p_g),
        solver_objective=raw.objective,
        status=raw.status,
        tightness=tightness_report(phi, n_pairs, tight_tol),
        solve_time=raw.solve_time,
        grid=grid,
        model=model,
        app=app,
        objective_spec=objective,
        layout=layout,
        raw=raw,
    )
    if variant == "dd":
        sol = restore_tightness(sol)
    return sol


def restore_tightness(sol: OpfSolution, feas_tol: float = 1e-6) -> OpfSolution:
    """Project the (cos, sin) pairs onto their circles and re-derive the rest.

    alpha is re-solved minimum-norm for the projected phi; p_e and p_g follow
    from the variant's representation. Raises ProjectionInfeasible when the
    projected point violates the application constraints beyond feas_tol.
    """
    t0 = time.perf_counter()
    layout = sol.layout
    n_pairs = len(layout.pairs)
    phi = sol.phi.copy()
    ci, si = cos_indices(n_pairs), sin_indices(n_pairs)
    radius = np.hypot(phi[ci], phi[si])
    degenerate = radius < 1e-12
    if np.any(degenerate):
        logger.warning(
            "projection hit %d degenerate (0, 0) pairs; mapping them to angle 0",
            int(np.sum(degenerate)),
        )
        phi[ci[degenerate]] = 1.0
        phi[si[degenerate]] = 0.0
    ok = ~degenerate
    phi[ci[ok]] /= radius[ok]
    phi[si[ok]] /= radius[ok]
    phi[0] = 1.0

    model = sol.model
    if sol.variant == "reference":
        cf, ct, cc, sc = edge_coeff_arrays(sol.grid)
        c, s = phi[ci], phi[si]
        p_e = np.empty(2 * sol.grid.n_edges)
        p_e[0::2] = cf - cc * c - sc * s
        p_e[1::2] = ct - cc * c + sc * s
        p_g = injection_matrix(sol.grid) @ p_e
        alpha = None
    else:
        alpha = model.phi_pinv() @ phi
        p_e = model.H_pe @ alpha
        if sol.variant == "dd-generalized":
            p_g = model.H_pg @ alpha
        else:
            p_g = injection_matrix(sol.grid) @ p_e

    if sol.app is not None:
        violation = sol.app.max_violation(phi, p_e, p_g)
        if violation > feas_tol:
            raise ProjectionInfeasible(
                f"projected point violates application constraints by {violation:.3e}"
            )

    return OpfSolution(
        variant=sol.variant,
        p_e=p_e,
        p_g=p_g,
        theta=_recover_theta(phi, n_pairs),
        phi=phi,
        alpha=alpha,
        objective=sol.objective_spec.value(p_e, p_g) if sol.objective_spec else math.nan,
        solver_objective=sol.solver_objective,
        status=sol.status,
        tightness=tightness_report(phi, n_pairs, sol.tightness.tol),
        solve_time=sol.solve_time + (time.perf_counter() - t0),
        grid=sol.grid,
        model=model,
        app=sol.app,
        objective_spec=sol.objective_spec,
        layout=layout,
        raw=sol.raw,
        restored=True,
    )


def demand_instance(
    grid: Grid,
    demands: Mapping[int, float],
    source_cap: float = 1.0,
    source_costs: Mapping[int, float] | None = None,
) -> tuple[AppConstraints, LinearObjective]:
    """Serve fixed demands from capped injections elsewhere, minimizing losses
    plus optional per-node supply costs."""
    app = AppConstraints()
    for node, value in demands.items():
        app.fix_injection(grid, node, -abs(float(value)))
    for node in grid.nodes:
        if node not in demands:
            app.bound_injection(grid, node, lo=0.0, hi=source_cap)
    c_pg = np.ones(grid.n_nodes)
    if source_costs:
        for node, cost in source_costs.items():
            c_pg[grid.node_index(node)] += float(cost)
    return app, LinearObjective(c_pg=c_pg)
