"""Solver-agnostic second-order cone programs.

Problem form::

    minimise    cᵀx + c0 + Σₖ c2ₖ Σⱼ (aₖⱼᵀx + bₖⱼ)²
    subject to  aᵢᵀx  = bᵢ                 (equalities)
                aⱼᵀx ≤ bⱼ                  (inequalities)
                ‖U x + u‖₂ ≤ tᵀx + t0      (second-order cones)

Dual sign convention (fixed for the whole package): the Lagrangian is

    L = obj(x) − Σ λᵢ (aᵢᵀx − bᵢ) + Σ λⱼ (aⱼᵀx − bⱼ) + Σ λₖ (‖U x + u‖ − tᵀx − t0)

with λⱼ, λₖ ≥ 0.  A cone multiplier is the scalar part z₀ of the conic
dual, which equals the multiplier of the scalar constraint ‖·‖ − t ≤ 0
whenever the norm is nonzero.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import Infeasible, NegativeCurvature, NumericalFailure, Unbounded

log = logging.getLogger(__name__)

SOLVER_TOL = 1e-12  # cone complementarity converges like √gap; prices need the headroom
ACCEPT_TOL = 1e-6
ZERO_DUAL = 1e-7


class Affine:
    """Sparse affine expression Σ coef·x[idx] + const."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms or {})
        self.const = float(const)

    @classmethod
    def var(cls, idx, coef=1.0):
        return cls({int(idx): float(coef)})

    @classmethod
    def lin(cls, idx, coef, const=0.0):
        out = cls(const=const)
        for i, c in zip(np.ravel(idx), np.ravel(coef)):
            if c != 0.0:
                out.terms[int(i)] = out.terms.get(int(i), 0.0) + float(c)
        return out

    def copy(self):
        return Affine(self.terms, self.const)

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, Affine):
            for i, c in other.terms.items():
                out.terms[i] = out.terms.get(i, 0.0) + c
            out.const += other.const
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __neg__(self):
        return Affine({i: -c for i, c in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Affine) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, k):
        k = float(k)
        return Affine({i: c * k for i, c in self.terms.items()}, self.const * k)

    __rmul__ = __mul__

    def value(self, x):
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def dense(self, n):
        row = np.zeros(n)
        for i, c in self.terms.items():
            row[i] += c
        return row


@dataclass
class _Cone:
    tag: object
    t: Affine
    u: list  # list[Affine]


@dataclass
class ConicProgram:
    names: list = field(default_factory=list)
    blocks: dict = field(default_factory=dict)
    objective: Affine = field(default_factory=Affine)
    quads: list = field(default_factory=list)  # (tag, c2, [Affine]) meaning c2·Σ e²
    eqs: list = field(default_factory=list)  # (tag, Affine) meaning expr == 0
    ineqs: list = field(default_factory=list)  # (tag, Affine) meaning expr <= 0
    cones: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.names)

    def add_var(self, name, shape=(), lb=None, ub=None):
        """Add a block of variables; returns an index array of ``shape``."""
        size = int(np.prod(shape)) if shape else 1
        start = len(self.names)
        idx = np.arange(start, start + size)
        for k in range(size):
            self.names.append(f"{name}[{k}]" if shape else name)
        idx = idx.reshape(shape) if shape else idx[0]
        self.blocks[name] = idx
        for k, i in enumerate(np.ravel(idx)):
            if lb is not None:
                lo = float(np.ravel(np.broadcast_to(lb, np.shape(idx) or (1,)))[k])
                self.add_ineq(("lb", name, k), lo - Affine.var(i))
            if ub is not None:
                hi = float(np.ravel(np.broadcast_to(ub, np.shape(idx) or (1,)))[k])
                self.add_ineq(("ub", name, k), Affine.var(i) - hi)
        return idx

    def add_objective(self, expr):
        self.objective = self.objective + expr

    def add_quadratic(self, tag, c2, exprs):
        """Add ``c2 · Σ exprs²`` to the objective (kept symbolic until solve)."""
        if c2 < 0:
            raise NegativeCurvature(f"{tag}: quadratic coefficient {c2} < 0")
        if c2 > 0:
            self.quads.append((tag, float(c2), list(exprs)))

    def lowered(self):
        """Copy with every quadratic term replaced by its cone epigraph."""
        out = ConicProgram(list(self.names), dict(self.blocks), self.objective.copy(), [],
                           list(self.eqs), list(self.ineqs), list(self.cones))
        for tag, c2, exprs in self.quads:
            epigraph_quadratic(out, c2, exprs, tag)
        return out

    def add_eq(self, tag, lhs, rhs=0.0):
        """lhs == rhs; multiplier enters L as −λ(lhs − rhs)."""
        self.eqs.append((tag, lhs - rhs))

    def add_ineq(self, tag, lhs, rhs=0.0):
        """lhs <= rhs; multiplier λ ≥ 0 enters L as +λ(lhs − rhs)."""
        self.ineqs.append((tag, lhs - rhs))

    def add_soc(self, tag, u, t):
        """‖u‖₂ ≤ t for a list of affine ``u`` and affine ``t``."""
        t = t if isinstance(t, Affine) else Affine(const=t)
        self.cones.append(_Cone(tag, t, [x if isinstance(x, Affine) else Affine(const=x) for x in u]))

    def tags(self):
        return [t for t, _ in self.eqs] + [t for t, _ in self.ineqs] + [c.tag for c in self.cones]

    def validate(self):
        tags = self.tags()
        if len(set(tags)) != len(tags):
            seen, dup = set(), []
            for t in tags:
                if t in seen:
                    dup.append(t)
                seen.add(t)
            raise ValueError(f"duplicate constraint tags: {dup[:5]}")
        n = self.n
        for _, e in self.eqs + self.ineqs:
            if e.terms and max(e.terms) >= n:
                raise ValueError("constraint references an unknown variable")


def epigraph_quadratic(prog: ConicProgram, c2, exprs, tag="epi"):
    """Add ``c2 · Σ exprs²`` to the objective through a rotated-cone epigraph.

    Emits one auxiliary variable s with s ≥ Σ eₖ² written as
    ‖(2e₁, …, 2eₘ, s − 1)‖ ≤ s + 1, and adds ``c2·s`` to the objective.
    Returns the index of s, or None when c2 == 0.
    """
    if c2 < 0:
        raise NegativeCurvature(f"{tag}: quadratic coefficient {c2} < 0")
    if c2 == 0:
        return None
    s = prog.add_var(f"{tag}:s")
    sv = Affine.var(s)
    prog.add_soc(tag, [2.0 * e for e in exprs] + [sv - 1.0], sv + 1.0)
    prog.add_objective(c2 * sv)
    return s


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    duals: dict
    cone_duals: dict
    objective: float
    dual_objective: float
    residuals: dict
    iterations: int = 0

    def value(self, idx):
        return self.x[idx]

    def dual(self, tag, default=0.0):
        return self.duals.get(tag, default)


def _assemble(prog):
    n = prog.n
    rows, cols, vals, b = [], [], [], []
    r = 0

    def put(expr, sign=1.0):
        nonlocal r
        for j, c in expr.terms.items():
            rows.append(r)
            cols.append(j)
            vals.append(sign * c)
        b.append(-sign * expr.const)
        r += 1

    for _, e in prog.eqs:
        put(e)  # a x − b = 0  ->  A = a, rhs = b
    for _, e in prog.ineqs:
        put(e)  # a x + s = b, s ≥ 0
    dims = []
    for cone in prog.cones:
        put(cone.t, -1.0)
        for u in cone.u:
            put(u, -1.0)
        dims.append(1 + len(cone.u))
    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))
    return A, np.asarray(b, dtype=float), dims


def _residuals(prog, A, b, c, x, z, dims, P=None):
    s = b - A @ x
    n_eq, n_in = len(prog.eqs), len(prog.ineqs)
    viol = np.zeros_like(s)
    viol[:n_eq] = s[:n_eq]
    viol[n_eq:n_eq + n_in] = np.minimum(s[n_eq:n_eq + n_in], 0.0)
    k = n_eq + n_in
    for d in dims:
        blk = s[k:k + d]
        viol[k] = min(blk[0] - np.linalg.norm(blk[1:]), 0.0)
        k += d
    Px = P @ x if P is not None else np.zeros_like(x)
    pobj = float(c @ x + 0.5 * x @ Px)
    dobj = float(-b @ z - 0.5 * x @ Px)
    grad = c + Px
    # s∘z = 0 in the cone algebra, per unit of slack so it reads in dual units
    s_in, z_in = s[n_eq:n_eq + n_in], z[n_eq:n_eq + n_in]
    comp = (np.abs(s_in * z_in) / (1.0 + np.abs(s_in))).tolist()
    k = n_eq + n_in
    for d in dims:
        sb, zb = s[k:k + d], z[k:k + d]
        scale = 1.0 + float(np.linalg.norm(sb))
        comp.append(abs(float(sb @ zb)) / scale)
        comp.append(float(np.linalg.norm(sb[0] * zb[1:] + zb[0] * sb[1:])) / scale)
        k += d
    return {
        "primal": float(np.max(np.abs(viol), initial=0.0) / (1.0 + np.max(np.abs(b), initial=0.0))),
        "dual": float(np.max(np.abs(grad + A.T @ z), initial=0.0) / (1.0 + np.max(np.abs(grad), initial=0.0))),
        "gap": abs(pobj - dobj) / (1.0 + abs(pobj)),
        "compl": float(max(comp, default=0.0) / (1.0 + np.max(np.abs(grad), initial=0.0))),
    }


def _polish_duals(prog, A, b, grad, x, z, dims, act_tol=1e-7):
    """Re-fit duals on the active set so stationarity holds to roundoff.

    Interior-point iterates stop with cone duals slightly out of line with
    their primal blocks.  Holding the active set fixed, every active cone
    dual is forced onto the complementary ray z0·(1, -s1/|s1|), inactive
    duals are zeroed, and the minimum-norm correction solving
    Aᵀz = -grad is applied.  Returns None if the fit breaks a sign.
    """
    s = b - A @ x
    n_eq, n_in = len(prog.eqs), len(prog.ineqs)
    cols = []  # z-space basis, one entry per unknown
    y0 = []
    for i in range(n_eq):
        cols.append(([i], [1.0]))
        y0.append(z[i])
    kind = []
    for i in range(n_eq, n_eq + n_in):
        if s[i] <= act_tol * (1.0 + abs(b[i])):
            cols.append(([i], [1.0]))
            y0.append(z[i])
            kind.append(len(cols) - 1)
    k = n_eq + n_in
    rays = []
    for d in dims:
        blk = s[k:k + d]
        tail = float(np.linalg.norm(blk[1:]))
        if blk[0] - tail <= act_tol * (1.0 + abs(blk[0])):
            if tail > act_tol:
                ray = np.concatenate([[1.0], -blk[1:] / tail])
                cols.append((list(range(k, k + d)), list(ray)))
                y0.append(z[k])
                rays.append(len(cols) - 1)
            else:  # apex: no direction to pin, leave the block free
                for j in range(d):
                    cols.append(([k + j], [1.0]))
                    y0.append(z[k + j])
        k += d
    rows, cc, vals = [], [], []
    for j, (idx, v) in enumerate(cols):
        rows += idx
        cc += [j] * len(idx)
        vals += v
    B = sp.csc_matrix((vals, (rows, cc)), shape=(len(z), len(cols)))
    M = (A.T @ B).toarray()
    y0 = np.array(y0)
    dy, *_ = np.linalg.lstsq(M, -grad - M @ y0, rcond=None)
    y = y0 + dy
    if any(y[j] < -1e-9 for j in kind + rays):
        return None
    return np.asarray(B @ y).ravel()


def _quadratic_parts(prog):
    """P (for ½xᵀPx), linear and constant contributions of the quadratic terms."""
    n = prog.n
    rows, cols, vals = [], [], []
    q = np.zeros(n)
    const = 0.0
    for _, c2, exprs in prog.quads:
        for e in exprs:
            idx = np.fromiter(e.terms.keys(), dtype=int, count=len(e.terms))
            co = np.fromiter(e.terms.values(), dtype=float, count=len(e.terms))
            ii, jj = np.meshgrid(idx, idx, indexing="ij")
            rows.append(ii.ravel())
            cols.append(jj.ravel())
            vals.append((2.0 * c2 * np.outer(co, co)).ravel())
            q[idx] += 2.0 * c2 * e.const * co
            const += c2 * e.const**2
    if rows:
        P = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        P = sp.csc_matrix((n, n))
    return P, q, const


def _clarabel_run(clarabel, P, q, A, b, cones, tol):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = 1e-7
    settings.max_iter = 200
    return clarabel.DefaultSolver(sp.triu(P, format="csc"), q, A, b, cones, settings).solve()


def solve(prog: ConicProgram, tol=SOLVER_TOL, quadratic="native", polish=True) -> ConicSolution:
    """Solve with the embedded interior-point engine (Clarabel).

    ``quadratic='native'`` passes the quadratic objective terms to the
    engine directly; ``'epigraph'`` lowers them to cones first.  Both give
    the same optimum; the native route has tighter duals.  ``polish``
    re-fits the duals on the solver's active set; the fit is kept when it
    tightens complementarity without pushing stationarity above 1e-8.
    """
    import clarabel

    if quadratic == "epigraph" and prog.quads:
        prog = prog.lowered()
    prog.validate()
    n = prog.n
    c = prog.objective.dense(n)
    P, qlin, qconst = _quadratic_parts(prog)
    if n == 0 and not prog.eqs and not prog.ineqs and not prog.cones:
        return ConicSolution("Optimal", np.zeros(0), {}, {}, prog.objective.const + qconst,
                             prog.objective.const + qconst, {"primal": 0.0, "dual": 0.0, "gap": 0.0, "compl": 0.0})
    A, b, dims = _assemble(prog)
    cones = []
    if prog.eqs:
        cones.append(clarabel.ZeroConeT(len(prog.eqs)))
    if prog.ineqs:
        cones.append(clarabel.NonnegativeConeT(len(prog.ineqs)))
    cones += [clarabel.SecondOrderConeT(d) for d in dims]
    best = None
    # an early stop near the tight target leaves cone duals misaligned by
    # ~sqrt(gap); polishing repairs that, else a looser target may finish cleanly
    for attempt in (tol, 10 * tol, 100 * tol):
        res = _clarabel_run(clarabel, P, c + qlin, A, b, cones, attempt)
        status = str(res.status)
        if "PrimalInfeasible" in status:
            raise Infeasible("problem is primal infeasible", {"status": status})
        if "DualInfeasible" in status:
            raise Unbounded("problem is unbounded (dual infeasible)", {"status": status})
        x = np.asarray(res.x, dtype=float)
        z = np.asarray(res.z, dtype=float)
        resid = _residuals(prog, A, b, c + qlin, x, z, dims, P)
        polished = False
        if polish and (prog.ineqs or prog.cones):
            zp = _polish_duals(prog, A, b, c + qlin + P @ x, x, z, dims)
            if zp is not None:
                rp = _residuals(prog, A, b, c + qlin, x, zp, dims, P)
                # exact complementarity is worth a stationarity error far below acceptance
                if max(rp["primal"], rp["dual"], rp["gap"]) <= 1e-2 * ACCEPT_TOL and rp["compl"] < resid["compl"]:
                    z, resid, polished = zp, rp, True
        worst = max(resid["primal"], resid["dual"], resid["gap"])
        if best is None or worst < best[0]:
            best = (worst, res, x, z, resid, status)
        if polished or status in ("Solved", "SolverStatus.Solved"):
            best = (worst, res, x, z, resid, status)
            break
    worst, res, x, z, resid, status = best
    if status not in ("Solved", "SolverStatus.Solved"):
        # compl only steers the polish; acceptance is the usual triple
        if worst > ACCEPT_TOL:
            raise NumericalFailure(f"solver stopped with status {status}", resid)
        level = logging.INFO if worst <= 1e-2 * ACCEPT_TOL else logging.WARNING
        log.log(level, "solver status %s accepted (residuals %s)", status, resid)

    duals = {}
    k = 0
    for tag, _ in prog.eqs:
        duals[tag] = -float(z[k])
        k += 1
    for tag, _ in prog.ineqs:
        duals[tag] = float(z[k])
        k += 1
    cone_duals = {}
    for cone, d in zip(prog.cones, dims):
        cone_duals[cone.tag] = z[k:k + d].copy()
        duals[cone.tag] = float(z[k])
        k += d
    px = P @ x
    const = prog.objective.const + qconst
    sol = ConicSolution("Optimal", x, duals, cone_duals, float((c + qlin) @ x + 0.5 * x @ px) + const,
                        float(-b @ z - 0.5 * x @ px) + const, resid, int(res.iterations))
    if os.environ.get("DLRM_DEBUG"):
        assert resid["dual"] <= ACCEPT_TOL, f"stationarity self-test failed: {resid}"
    return sol


def write_cbf(prog: ConicProgram, path):
    """Dump the program in Conic Benchmark Format (CBF v3).

    Quadratic objective terms are written through their cone epigraphs.
    """
    prog = prog.lowered() if prog.quads else prog
    n = prog.n
    A, b, dims = _assemble(prog)
    n_eq, n_in = len(prog.eqs), len(prog.ineqs)
    # CBF wants  F x + g ∈ K.  Equalities: a x − b ∈ L=; inequalities: b − a x ∈ L+;
    # cones: the (t, u) rows are already −A x + b.
    sign = np.ones(A.shape[0])
    sign[:n_eq] = -1.0
    F = (-sp.diags(sign) @ A).tocoo() if A.shape[0] else sp.coo_matrix((0, n))
    g = sign * b
    c = prog.objective.dense(n)
    lines = ["VER", "3", "", "OBJSENSE", "MIN", "", "VAR", f"{n} 1", f"F {n}", ""]
    groups = []
    if n_eq:
        groups.append(f"L= {n_eq}")
    if n_in:
        groups.append(f"L+ {n_in}")
    groups += [f"Q {d}" for d in dims]
    lines += ["CON", f"{A.shape[0]} {len(groups)}", *groups, ""]
    nz = [(j, v) for j, v in enumerate(c) if v != 0.0]
    lines += ["OBJACOORD", str(len(nz)), *[f"{j} {v!r}" for j, v in nz], ""]
    if prog.objective.const:
        lines += ["OBJBCOORD", repr(prog.objective.const), ""]
    lines += ["ACOORD", str(F.nnz), *[f"{i} {j} {v!r}" for i, j, v in zip(F.row, F.col, F.data)], ""]
    gz = [(i, v) for i, v in enumerate(g) if v != 0.0]
    lines += ["BCOORD", str(len(gz)), *[f"{i} {v!r}" for i, v in gz], ""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def constant_sensitivity(base: ConicProgram, perturbed: ConicProgram, sol: ConicSolution):
    """∂L/∂θ for a data change that only moves constraint constants.

    ``perturbed`` must be the same program rebuilt with θ → θ + 1 (same tags,
    same variables).  Computed directly from the raw multipliers, without any
    knowledge of what the constraints mean.
    """
    if base.tags() != perturbed.tags():
        raise ValueError("programs differ in constraint structure")
    total = perturbed.objective.const - base.objective.const
    for (tag, e0), (_, e1) in zip(base.eqs, perturbed.eqs):
        total -= sol.duals[tag] * (e1.const - e0.const)
    for (tag, e0), (_, e1) in zip(base.ineqs, perturbed.ineqs):
        total += sol.duals[tag] * (e1.const - e0.const)
    for c0, c1 in zip(base.cones, perturbed.cones):
        z = sol.cone_duals[c0.tag]
        total -= z[0] * (c1.t.const - c0.t.const)
        total -= sum(zk * (u1.const - u0.const) for zk, u0, u1 in zip(z[1:], c0.u, c1.u))
    return float(total)
