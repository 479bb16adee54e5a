"""Primal-dual interior-point solver for the package's conic programs.

The method runs Mehrotra-style predictor-corrector steps on the homogeneous
self-dual embedding of

    min c'x  s.t.  A x = b,  G x + s = h,  s in K,

where K is a product of a nonnegative orthant and small second-order cones
(one 3-dimensional cone per unit-ball constraint). Nesterov-Todd scaling
keeps the linearized complementarity symmetric; each iteration factors one
quasidefinite KKT matrix (dense for small programs, sparse LU otherwise)
and recovers the embedding variables (tau, kappa) from two extra solves.

Feasibility, optimality and infeasibility certificates follow the usual
self-dual classification: tau -> positive gives an optimal pair, kappa ->
positive gives a primal or dual infeasibility certificate.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conic import ConicProgram, Solution
from .errors import NumericalBreakdown

_STEP = 0.99
_DENSE_LIMIT = 260


class ConeDims:
    """Cone layout of the inequality block: leading orthant, then SOC sizes."""

    __slots__ = ("orthant", "socs", "total", "degree", "uniform_q", "n_socs")

    def __init__(self, orthant: int, socs: tuple[int, ...]):
        self.orthant = orthant
        self.socs = tuple(socs)
        self.total = orthant + sum(self.socs)
        self.degree = orthant + len(self.socs)
        self.n_socs = len(self.socs)
        # common SOC dimension when all blocks match (enables vector paths)
        self.uniform_q = self.socs[0] if self.socs and len(set(self.socs)) == 1 else None

    def soc_slices(self):
        start = self.orthant
        for q in self.socs:
            yield slice(start, start + q)
            start += q

    def soc_view(self, v: np.ndarray) -> np.ndarray:
        """(n_blocks, q) view of the SOC region for uniform block sizes."""
        return v[self.orthant :].reshape(self.n_socs, self.uniform_q)


@dataclass
class StandardForm:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    dims: ConeDims


def standard_form(prog: ConicProgram) -> StandardForm:
    """Rewrite a ConicProgram with bounds and balls as cone rows."""
    n = prog.n
    rows = [prog.A_in]
    rhs = [prog.b_in]

    finite_ub = np.flatnonzero(np.isfinite(prog.ub))
    if finite_ub.size:
        data = np.ones(finite_ub.size)
        rows.append(
            sp.csr_matrix((data, (np.arange(finite_ub.size), finite_ub)), shape=(finite_ub.size, n))
        )
        rhs.append(prog.ub[finite_ub])
    finite_lb = np.flatnonzero(np.isfinite(prog.lb))
    if finite_lb.size:
        data = -np.ones(finite_lb.size)
        rows.append(
            sp.csr_matrix((data, (np.arange(finite_lb.size), finite_lb)), shape=(finite_lb.size, n))
        )
        rhs.append(-prog.lb[finite_lb])

    orthant = sum(r.shape[0] for r in rows)
    if orthant == 0 and not prog.balls:
        # keep the cone block nonempty so the embedding stays uniform
        rows.append(sp.csr_matrix((1, n)))
        rhs.append(np.array([1.0]))
        orthant = 1

    socs = []
    for i, j in prog.balls:
        block = sp.csr_matrix(
            (np.array([-1.0, -1.0]), (np.array([1, 2]), np.array([i, j]))), shape=(3, n)
        )
        rows.append(block)
        rhs.append(np.array([1.0, 0.0, 0.0]))
        socs.append(3)

    G = sp.vstack(rows).tocsr() if len(rows) > 1 else rows[0].tocsr()
    return StandardForm(
        c=prog.c.astype(float),
        A=prog.A_eq.tocsr(),
        b=prog.b_eq.astype(float),
        G=G,
        h=np.concatenate(rhs) if rhs else np.zeros(0),
        dims=ConeDims(orthant=orthant, socs=tuple(socs)),
    )


# --- Jordan-algebra helpers on cone-partitioned vectors ----------------------


def cone_e(dims: ConeDims) -> np.ndarray:
    e = np.zeros(dims.total)
    e[: dims.orthant] = 1.0
    for sl in dims.soc_slices():
        e[sl.start] = 1.0
    return e


def jprod(dims: ConeDims, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    l = dims.orthant
    out[:l] = u[:l] * v[:l]
    if not dims.socs:
        return out
    if dims.uniform_q is not None:
        ub, vb = dims.soc_view(u), dims.soc_view(v)
        ob = dims.soc_view(out)
        ob[:, 0] = np.einsum("ij,ij->i", ub, vb)
        ob[:, 1:] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out
    for sl in dims.soc_slices():
        u0, u1 = u[sl.start], u[sl.start + 1 : sl.stop]
        v0, v1 = v[sl.start], v[sl.start + 1 : sl.stop]
        out[sl.start] = u0 * v0 + u1 @ v1
        out[sl.start + 1 : sl.stop] = u0 * v1 + v0 * u1
    return out


def jdiv(dims: ConeDims, lam: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Solve lam o x = w blockwise (lam interior; determinant clamped)."""
    out = np.empty_like(w)
    l = dims.orthant
    out[:l] = w[:l] / lam[:l]
    if not dims.socs:
        return out
    if dims.uniform_q is not None:
        lb, wb = dims.soc_view(lam), dims.soc_view(w)
        ob = dims.soc_view(out)
        n1 = np.linalg.norm(lb[:, 1:], axis=1)
        det = np.maximum(lb[:, 0] - n1, 1e-15 * np.maximum(lb[:, 0], 1e-30)) * (lb[:, 0] + n1)
        x0 = (lb[:, 0] * wb[:, 0] - np.einsum("ij,ij->i", lb[:, 1:], wb[:, 1:])) / det
        ob[:, 0] = x0
        ob[:, 1:] = (wb[:, 1:] - x0[:, None] * lb[:, 1:]) / lb[:, :1]
        return out
    for sl in dims.soc_slices():
        l0, l1 = lam[sl.start], lam[sl.start + 1 : sl.stop]
        w0, w1 = w[sl.start], w[sl.start + 1 : sl.stop]
        n1 = float(np.linalg.norm(l1))
        det = max(l0 - n1, 1e-15 * max(l0, 1e-30)) * (l0 + n1)
        x0 = (l0 * w0 - l1 @ w1) / det
        out[sl.start] = x0
        out[sl.start + 1 : sl.stop] = (w1 - x0 * l1) / l0
    return out


def jmineig(dims: ConeDims, u: np.ndarray) -> float:
    vals = []
    if dims.orthant:
        vals.append(float(np.min(u[: dims.orthant])))
    if dims.socs:
        if dims.uniform_q is not None:
            ub = dims.soc_view(u)
            vals.append(float(np.min(ub[:, 0] - np.linalg.norm(ub[:, 1:], axis=1))))
        else:
            for sl in dims.soc_slices():
                vals.append(float(u[sl.start] - np.linalg.norm(u[sl.start + 1 : sl.stop])))
    return min(vals) if vals else math.inf


def _soc_steps(u: np.ndarray, du: np.ndarray) -> float:
    """Max step for stacked (B, q) SOC blocks."""
    a = du[:, 0] ** 2 - np.einsum("ij,ij->i", du[:, 1:], du[:, 1:])
    b = 2.0 * (u[:, 0] * du[:, 0] - np.einsum("ij,ij->i", u[:, 1:], du[:, 1:]))
    c = u[:, 0] ** 2 - np.einsum("ij,ij->i", u[:, 1:], u[:, 1:])
    alpha = math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = np.abs(a) > 1e-300
        disc = b * b - 4.0 * a * c
        ok = quad & (disc >= 0.0)
        if np.any(ok):
            r = np.sqrt(disc[ok])
            for roots in ((-b[ok] - r) / (2.0 * a[ok]), (-b[ok] + r) / (2.0 * a[ok])):
                head = u[ok, 0] + roots * du[ok, 0]
                valid = (roots > 0.0) & (head >= -1e-14)
                if np.any(valid):
                    alpha = min(alpha, float(np.min(roots[valid])))
        lin = (~quad) & (b < 0.0)
        if np.any(lin):
            roots = -c[lin] / b[lin]
            head = u[lin, 0] + roots * du[lin, 0]
            valid = (roots > 0.0) & (head >= -1e-14)
            if np.any(valid):
                alpha = min(alpha, float(np.min(roots[valid])))
    return alpha


def max_step(dims: ConeDims, u: np.ndarray, du: np.ndarray) -> float:
    """Largest alpha with u + alpha*du still in the cone (u interior)."""
    alpha = math.inf
    l = dims.orthant
    if l:
        neg = du[:l] < 0.0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-u[:l][neg] / du[:l][neg])))
    if not dims.socs:
        return alpha
    if dims.uniform_q is not None:
        return min(alpha, _soc_steps(dims.soc_view(u), dims.soc_view(du)))
    for sl in dims.soc_slices():
        blk_u = u[sl][None, :]
        blk_d = du[sl][None, :]
        alpha = min(alpha, _soc_steps(blk_u, blk_d))
    return alpha


class NTScaling:
    """Nesterov-Todd scaling W with lambda = W z = W^{-T} s.

    SOC blocks are held stacked (one row per block) so the scaling applies
    to all of them at once; the scaled point lambda uses the cancellation-
    free closed form, which stays strictly interior even when the iterate
    grazes the cone boundary.
    """

    def __init__(self, dims: ConeDims, s: np.ndarray, z: np.ndarray):
        if dims.socs and dims.uniform_q is None:
            raise ValueError("NTScaling requires uniform SOC block sizes")
        self.dims = dims
        l = dims.orthant
        self.w2_orth = s[:l] / z[:l]
        self.w_orth = np.sqrt(self.w2_orth)
        lam = np.empty_like(s)
        lam[:l] = np.sqrt(s[:l] * z[:l])

        if dims.socs:
            sb = dims.soc_view(s)
            zb = dims.soc_view(z)

            def jdet_sqrt(u):
                # u0^2 - |u1|^2 via the difference form; clamp roundoff
                # negatives so near-boundary iterates keep a finite scaling
                n1 = np.linalg.norm(u[:, 1:], axis=1)
                d = np.maximum(u[:, 0] - n1, 1e-15 * np.maximum(u[:, 0], 1e-30))
                return np.sqrt(d * (u[:, 0] + n1))

            a_s = jdet_sqrt(sb)
            a_z = jdet_sqrt(zb)
            sbar = sb / a_s[:, None]
            zbar = zb / a_z[:, None]
            gamma = np.sqrt((1.0 + np.einsum("ij,ij->i", sbar, zbar)) / 2.0)
            jz = zbar.copy()
            jz[:, 1:] *= -1.0
            self.soc_wbar = (sbar + jz) / (2.0 * gamma[:, None])
            self.soc_eta = np.sqrt(a_s / a_z)
            scale = np.sqrt(a_s * a_z)
            lam_soc = dims.soc_view(lam)
            lam_soc[:, 0] = scale * gamma
            denom = sbar[:, 0] + zbar[:, 0] + 2.0 * gamma
            lam_soc[:, 1:] = (scale / denom)[:, None] * (
                (gamma + zbar[:, 0])[:, None] * sbar[:, 1:]
                + (gamma + sbar[:, 0])[:, None] * zbar[:, 1:]
            )
        else:
            self.soc_wbar = np.zeros((0, 0))
            self.soc_eta = np.zeros(0)
        self.lam = lam

    @staticmethod
    def _m_apply_stack(wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
        w0 = wbar[:, 0]
        dot = np.einsum("ij,ij->i", wbar[:, 1:], v[:, 1:])
        out = np.empty_like(v)
        out[:, 0] = w0 * v[:, 0] + dot
        out[:, 1:] = v[:, 1:] + (v[:, 0] + dot / (1.0 + w0))[:, None] * wbar[:, 1:]
        return out

    def apply_W(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        l = self.dims.orthant
        out[:l] = self.w_orth * v[:l]
        if self.dims.socs:
            vb = self.dims.soc_view(v)
            self.dims.soc_view(out)[:] = self.soc_eta[:, None] * self._m_apply_stack(
                self.soc_wbar, vb
            )
        return out

    def apply_Winv(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        l = self.dims.orthant
        out[:l] = v[:l] / self.w_orth
        if self.dims.socs:
            jw = self.soc_wbar.copy()
            jw[:, 1:] *= -1.0
            vb = self.dims.soc_view(v)
            self.dims.soc_view(out)[:] = self._m_apply_stack(jw, vb) / self.soc_eta[:, None]
        return out

    def apply_W2(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        l = self.dims.orthant
        out[:l] = self.w2_orth * v[:l]
        if self.dims.socs:
            vb = self.dims.soc_view(v)
            dot = np.einsum("ij,ij->i", self.soc_wbar, vb)
            jv = vb.copy()
            jv[:, 1:] *= -1.0
            self.dims.soc_view(out)[:] = (self.soc_eta**2)[:, None] * (
                2.0 * dot[:, None] * self.soc_wbar - jv
            )
        return out

    def w2_soc_stack(self) -> np.ndarray:
        """Stacked dense W^2 blocks, shape (n_blocks, q, q)."""
        if not self.dims.socs:
            return np.zeros((0, 0, 0))
        q = self.dims.uniform_q
        j = np.diag(np.concatenate(([1.0], -np.ones(q - 1))))
        outer = self.soc_wbar[:, :, None] * self.soc_wbar[:, None, :]
        return (self.soc_eta**2)[:, None, None] * (2.0 * outer - j)

    def w2_soc_blocks(self):
        """Dense W^2 matrices of the SOC blocks (eta^2 * (2 wbar wbar' - J))."""
        return list(self.w2_soc_stack())


# --- KKT factorization -------------------------------------------------------


class KktSolver:
    """Factor/solve of the 3x3 block system [0 A' G'; A 0 0; G 0 -W^2].

    Static regularization (+reg on the x block, -reg on y and z) keeps the
    factorization stable; one round of iterative refinement against the
    unregularized operator removes its effect.
    """

    _REG_MAX = 1e-4

    def __init__(self, form: StandardForm, reg: float = 1e-10):
        self.form = form
        self.reg = reg
        n, p, m = form.c.size, form.b.size, form.h.size
        self.n, self.p, self.m = n, p, m
        self.dim = n + p + m
        self.dense = self.dim <= _DENSE_LIMIT

        if self.dense:
            # tiny systems: numpy matvecs beat scipy.sparse call overhead
            self.mat_A = form.A.toarray()
            self.mat_G = form.G.toarray()
            self.A_T = self.mat_A.T.copy()
            self.G_T = self.mat_G.T.copy()
        else:
            self.mat_A = form.A
            self.mat_G = form.G
            self.A_T = form.A.T.tocsr()
            self.G_T = form.G.T.tocsr()
        A, G = form.A.tocoo(), form.G.tocoo()
        rows = [A.row + n, A.col, G.row + n + p, G.col]
        cols = [A.col, A.row + n, G.col, G.row + n + p]
        vals = [A.data, A.data, G.data, G.data]
        fixed_rows = np.concatenate(rows).astype(np.int64)
        fixed_cols = np.concatenate(cols).astype(np.int64)
        self._fixed_vals = np.concatenate(vals)

        # variable entries: regularized x/y diagonals plus the -W^2 block
        w_rows = [np.arange(n + p)]
        w_cols = [np.arange(n + p)]
        l = form.dims.orthant
        w_rows.append(np.arange(n + p, n + p + l))
        w_cols.append(np.arange(n + p, n + p + l))
        for sl in form.dims.soc_slices():
            q = sl.stop - sl.start
            base = n + p + sl.start
            rr, cc = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
            w_rows.append(base + rr.ravel())
            w_cols.append(base + cc.ravel())
        w_rows = np.concatenate(w_rows).astype(np.int64)
        w_cols = np.concatenate(w_cols).astype(np.int64)

        if self.dense:
            self._base = np.zeros((self.dim, self.dim))
            np.add.at(self._base, (fixed_rows, fixed_cols), self._fixed_vals)
            self._w_rows, self._w_cols = w_rows, w_cols
            self._lu = None
        else:
            all_rows = np.concatenate([fixed_rows, w_rows])
            all_cols = np.concatenate([fixed_cols, w_cols])
            order = np.lexsort((all_rows, all_cols))
            indices = all_rows[order].astype(np.int32)
            indptr = np.searchsorted(all_cols[order], np.arange(self.dim + 1)).astype(np.int32)
            self._order = order
            self._mat = sp.csc_matrix(
                (np.zeros(all_rows.size), indices, indptr), shape=(self.dim, self.dim)
            )
            self._splu = None

    def _w_values(self, scaling: NTScaling, reg: float) -> np.ndarray:
        n, p = self.n, self.p
        parts = [np.full(n, reg)]
        if p:
            parts.append(np.full(p, -reg))
        parts.append(-(scaling.w2_orth + reg))
        if self.form.dims.socs:
            stack = -scaling.w2_soc_stack()
            q = self.form.dims.uniform_q
            stack[:, np.arange(q), np.arange(q)] -= reg
            parts.append(stack.ravel())
        return np.concatenate(parts)

    def _factor_at(self, reg: float) -> None:
        w_vals = self._w_values(self.scaling, reg)
        if self.dense:
            mat = self._base.copy()
            mat[self._w_rows, self._w_cols] += w_vals
            with warnings.catch_warnings():
                # singular factorizations are detected and retried in solve()
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self._lu = sla.lu_factor(mat, check_finite=False)
        else:
            raw = np.concatenate([self._fixed_vals, w_vals])
            self._mat.data[:] = raw[self._order]
            self._splu = spla.splu(self._mat)

    def factor(self, scaling: NTScaling) -> None:
        self.scaling = scaling
        self._current_reg = self.reg
        self._factor_at(self._current_reg)

    def _raw_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.dense:
            return sla.lu_solve(self._lu, rhs, check_finite=False)
        return self._splu.solve(rhs)

    def _exact_matvec(self, sol: np.ndarray) -> np.ndarray:
        n, p = self.n, self.p
        x, y, z = sol[:n], sol[n : n + p], sol[n + p :]
        out = np.empty_like(sol)
        out[:n] = self.A_T @ y + self.G_T @ z
        out[n : n + p] = self.mat_A @ x
        out[n + p :] = self.mat_G @ x - self.scaling.apply_W2(z)
        return out

    def solve(self, rx: np.ndarray, ry: np.ndarray, rz: np.ndarray):
        """Solve against the exact operator via the regularized factorization.

        A singular or non-finite factorization bumps the regularization and
        refactors; iterative refinement then removes the perturbation.
        """
        rhs = np.concatenate([rx, ry, rz])
        scale = max(1.0, float(np.max(np.abs(rhs))))
        sol = self._raw_solve(rhs)
        while not np.all(np.isfinite(sol)):
            if self._current_reg >= self._REG_MAX:
                raise FloatingPointError("KKT factorization unusable at maximum regularization")
            self._current_reg *= 1e3
            self._factor_at(self._current_reg)
            sol = self._raw_solve(rhs)
        best_resid = math.inf
        for _ in range(4):
            resid = rhs - self._exact_matvec(sol)
            err = float(np.max(np.abs(resid)))
            if err <= 1e-12 * scale or err >= best_resid:
                break
            best_resid = err
            sol = sol + self._raw_solve(resid)
        n, p = self.n, self.p
        return sol[:n], sol[n : n + p], sol[n + p :]


# --- main loop ---------------------------------------------------------------


def _initial_point(kkt: KktSolver, form: StandardForm):
    dims = form.dims
    eye = NTScaling(dims, cone_e(dims) * 2.0, cone_e(dims) * 2.0)  # W = I
    kkt.factor(eye)
    x, _, z_p = kkt.solve(np.zeros(form.c.size), form.b, form.h)
    s = -z_p
    shift = -jmineig(dims, s)
    if shift >= -1e-8:
        s = s + (1.0 + shift) * cone_e(dims)
    _, y, z = kkt.solve(-form.c, np.zeros(form.b.size), np.zeros(form.h.size))
    shift = -jmineig(dims, z)
    if shift >= -1e-8:
        z = z + (1.0 + shift) * cone_e(dims)
    return x, y, z, s


def solve_convex(
    prog: ConicProgram,
    tol: float = 1e-8,
    max_iter: int = 100,
    reg: float = 1e-10,
) -> Solution:
    """Solve the conic program; see Solution.status for the outcome class.

    status 'optimal' guarantees primal/dual residuals and relative gap at or
    below tol. 'infeasible' / 'unbounded' carry a certificate verified to the
    same tolerance. 'tolerance_not_met' returns the best iterate found.
    Raises NumericalBreakdown when steps collapse far from any certificate.
    """
    t0 = time.perf_counter()
    prog.validate()
    form = standard_form(prog)
    dims = form.dims
    n, p, m = form.c.size, form.b.size, form.h.size
    nu = dims.degree + 1

    kkt = KktSolver(form, reg=reg)
    x, y, z, s = _initial_point(kkt, form)
    tau, kappa = 1.0, 1.0

    A_T, G_T = kkt.A_T, kkt.G_T
    A_op, G_op = kkt.mat_A, kkt.mat_G
    norm_b = 1.0 + np.linalg.norm(form.b)
    norm_h = 1.0 + np.linalg.norm(form.h)
    norm_c = 1.0 + np.linalg.norm(form.c)

    best = None
    best_score = math.inf
    tiny_steps = 0

    def package(status, xs, metrics, iters):
        pres, dres, relgap, pcost, dcost = metrics
        if status == "infeasible":
            obj = math.nan
        elif status == "unbounded":
            obj = -math.inf
        else:
            obj = pcost
        return Solution(
            x=xs,
            objective=obj,
            status=status,
            kkt_residuals=(pres, dres, relgap),
            solve_time=time.perf_counter() - t0,
            iterations=iters,
            dual_objective=dcost,
        )

    for it in range(max_iter + 1):
        r1 = A_T @ y + G_T @ z + form.c * tau
        r2 = A_op @ x - form.b * tau
        r3 = G_op @ x + s - form.h * tau
        r4 = form.c @ x + form.b @ y + form.h @ z + kappa
        mu = (s @ z + tau * kappa) / nu

        pcost = form.c @ x / tau
        dcost = -(form.b @ y + form.h @ z) / tau
        pres = max(
            np.linalg.norm(r2) / norm_b,
            np.linalg.norm(r3) / norm_h,
        ) / tau
        dres = np.linalg.norm(r1) / norm_c / tau
        gap = s @ z / (tau * tau)
        relgap = gap / max(1.0, abs(pcost))
        score = max(pres, dres, relgap)
        metrics = (pres, dres, relgap, pcost, dcost)
        if score < best_score:
            best_score = score
            best = (x / tau, metrics, it)

        if pres <= tol and dres <= tol and relgap <= tol:
            return package("optimal", x / tau, metrics, it)

        # certificates (checked on the raw embedding variables)
        by_hz = -(form.b @ y + form.h @ z)
        if by_hz > tol:
            pinf_res = np.linalg.norm(A_T @ y + G_T @ z) / by_hz / norm_c
            if pinf_res <= tol:
                return package("infeasible", x / tau, metrics, it)
        neg_cx = -(form.c @ x)
        if neg_cx > tol:
            dinf_res = max(
                np.linalg.norm(A_op @ x) / norm_b,
                np.linalg.norm(G_op @ x + s) / norm_h,
            ) / neg_cx
            if dinf_res <= tol:
                return package("unbounded", x / neg_cx, metrics, it)

        if it == max_iter:
            xs, met, its = best
            return package("tolerance_not_met", xs, met, its)

        scaling = NTScaling(dims, s, z)
        lam = scaling.lam

        def fallback(detail: str):
            if best_score <= 1e3 * tol:
                xs, met, its = best
                return package("tolerance_not_met", xs, met, its)
            raise NumericalBreakdown(it, detail)

        try:
            kkt.factor(scaling)
            x1, y1, z1 = kkt.solve(-form.c, form.b, form.h)
        except (FloatingPointError, RuntimeError) as exc:
            return fallback(str(exc))
        denom = form.c @ x1 + form.b @ y1 + form.h @ z1 - kappa / tau

        def direction(sigma, gamma_corr, tk_corr):
            ds_rhs = jprod(dims, lam, lam) - sigma * mu * cone_e(dims) + gamma_corr
            g = jdiv(dims, lam, -ds_rhs)
            fac = 1.0 - sigma
            dx0, dy0, dz0 = kkt.solve(
                -fac * r1, -fac * r2, -fac * r3 - scaling.apply_W(g)
            )
            rhs_kappa = -tau * kappa + sigma * mu - tk_corr
            num = (
                -fac * r4
                - form.c @ dx0
                - form.b @ dy0
                - form.h @ dz0
                - rhs_kappa / tau
            )
            dtau = num / denom
            dx = dx0 + dtau * x1
            dy = dy0 + dtau * y1
            dz = dz0 + dtau * z1
            ds = scaling.apply_W(g) - scaling.apply_W2(dz)
            dkappa = (rhs_kappa - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        try:
            # predictor
            dxa, dya, dza, dsa, dta, dka = direction(0.0, np.zeros(m), 0.0)
            alpha = min(max_step(dims, s, dsa), max_step(dims, z, dza))
            if dta < 0.0:
                alpha = min(alpha, -tau / dta)
            if dka < 0.0:
                alpha = min(alpha, -kappa / dka)
            alpha = min(1.0, alpha)
            mu_aff = (
                (s + alpha * dsa) @ (z + alpha * dza)
                + (tau + alpha * dta) * (kappa + alpha * dka)
            ) / nu
            sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

            # corrector
            gamma_corr = jprod(dims, scaling.apply_Winv(dsa), scaling.apply_W(dza))
            dx, dy, dz, ds, dtau, dkappa = direction(sigma, gamma_corr, dta * dka)
        except (FloatingPointError, RuntimeError) as exc:
            return fallback(str(exc))
        finite = all(
            np.all(np.isfinite(v)) for v in (dx, dy, dz, ds)
        ) and math.isfinite(dtau) and math.isfinite(dkappa)
        if not finite:
            return fallback("non-finite search direction")
        alpha = min(max_step(dims, s, ds), max_step(dims, z, dz))
        if dtau < 0.0:
            alpha = min(alpha, -tau / dtau)
        if dkappa < 0.0:
            alpha = min(alpha, -kappa / dkappa)
        step = min(1.0, _STEP * alpha)
        if step <= 1e-10:
            tiny_steps += 1
            if tiny_steps >= 3:
                if best_score <= 1e3 * tol:
                    xs, met, its = best
                    return package("tolerance_not_met", xs, met, its)
                raise NumericalBreakdown(it, f"step length collapsed ({step:.2e})")
            step = max(step, 1e-10)
        else:
            tiny_steps = 0

        # roundoff can overshoot the boundary at very small complementarity;
        # back off until the new iterate is strictly inside the cone
        for _ in range(40):
            s_new = s + step * ds
            z_new = z + step * dz
            tau_new = tau + step * dtau
            kappa_new = kappa + step * dkappa
            if (
                jmineig(dims, s_new) > 0.0
                and jmineig(dims, z_new) > 0.0
                and tau_new > 0.0
                and kappa_new > 0.0
            ):
                break
            step *= 0.5
        else:
            return fallback("cannot keep the iterate interior")
        x = x + step * dx
        y = y + step * dy
        z, s = z_new, s_new
        tau, kappa = tau_new, kappa_new

    raise NumericalBreakdown(max_iter, "iteration limit fell through")
