"""Second-order cone program container and solver.

The optimizer only talks to :class:`ConicProblem` and :func:`solve`; the
interior-point backend (Clarabel) is an implementation detail.

Problem form::

    minimize    c @ x
    subject to  A_eq x == b_eq
                A_in x <= b_in
                ||x[v]|| <= x[t]      for every cone (t, v1, v2, ...)
                lb <= x <= ub
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
NUMERICAL_ERROR = "numerical_error"


@dataclass
class ConicProblem:
    n_vars: int = 0
    c: list[float] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    eq: list[tuple[list[int], list[float], float]] = field(default_factory=list)
    ineq: list[tuple[list[int], list[float], float]] = field(default_factory=list)
    cones: list[tuple[int, ...]] = field(default_factory=list)

    def new_vars(self, count: int = 1, lb: float = -np.inf, ub: float = np.inf, cost: float = 0.0) -> np.ndarray:
        idx = np.arange(self.n_vars, self.n_vars + count)
        self.n_vars += count
        self.c.extend([cost] * count)
        self.lb.extend([lb] * count)
        self.ub.extend([ub] * count)
        return idx

    def _row(self, idx, vals) -> tuple[list[int], list[float]]:
        idx = [int(i) for i in np.atleast_1d(idx)]
        vals = [float(v) for v in np.broadcast_to(np.atleast_1d(np.asarray(vals, dtype=float)), (len(idx),))]
        bad = [i for i in idx if not 0 <= i < self.n_vars]
        if bad:
            raise IndexError(f"variable indices out of range: {bad}")
        return idx, vals

    def add_eq(self, idx, vals, rhs: float) -> None:
        """sum(vals * x[idx]) == rhs"""
        i, v = self._row(idx, vals)
        self.eq.append((i, v, float(rhs)))

    def add_le(self, idx, vals, rhs: float) -> None:
        """sum(vals * x[idx]) <= rhs"""
        i, v = self._row(idx, vals)
        self.ineq.append((i, v, float(rhs)))

    def add_cone(self, t: int, v) -> None:
        cone = (int(t),) + tuple(int(i) for i in np.atleast_1d(v))
        self._row(cone, 0.0)
        if len(cone) < 2:
            raise ValueError("a cone needs a bound variable and at least one member")
        self.cones.append(cone)

    def add_cost(self, idx, vals) -> None:
        i, v = self._row(idx, vals)
        for ii, vv in zip(i, v):
            self.c[ii] += vv

    def matrices(self):
        """Canonical sparse ``(A_eq, b_eq, A_in, b_in)``; duplicate entries are summed."""
        return (*_stack(self.eq, self.n_vars), *_stack(self.ineq, self.n_vars))

    # --- debug dump ---------------------------------------------------------
    def to_json(self) -> dict:
        def fin(x):
            return [None if not np.isfinite(v) else v for v in x]

        return {
            "format": "driftsafe.conic/1",
            "n_vars": self.n_vars,
            "objective": list(self.c),
            "lb": fin(self.lb),
            "ub": fin(self.ub),
            "equalities": [{"idx": i, "val": v, "rhs": b} for i, v, b in self.eq],
            "inequalities": [{"idx": i, "val": v, "rhs": b} for i, v, b in self.ineq],
            "cones": [list(c) for c in self.cones],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ConicProblem":
        def unfin(x, default):
            return [default if v is None else float(v) for v in x]

        p = cls(
            n_vars=int(data["n_vars"]),
            c=[float(v) for v in data["objective"]],
            lb=unfin(data["lb"], -np.inf),
            ub=unfin(data["ub"], np.inf),
        )
        p.eq = [(list(r["idx"]), list(r["val"]), float(r["rhs"])) for r in data["equalities"]]
        p.ineq = [(list(r["idx"]), list(r["val"]), float(r["rhs"])) for r in data["inequalities"]]
        p.cones = [tuple(c) for c in data["cones"]]
        return p

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def _stack(rows, n):
    ri, ci, vi, b = [], [], [], []
    for r, (idx, vals, rhs) in enumerate(rows):
        ri.extend([r] * len(idx))
        ci.extend(idx)
        vi.extend(vals)
        b.append(rhs)
    A = sp.coo_matrix((vi, (ri, ci)), shape=(len(rows), n)).tocsr()
    A.sum_duplicates()
    return A, np.asarray(b, dtype=float)


def add_epigraph_norm(problem: ConicProblem, vector_var_indices, cost: float = 0.0) -> int:
    """Append t >= ||x[indices]|| and return the index of t."""
    t = int(problem.new_vars(1, lb=0.0, cost=cost)[0])
    problem.add_cone(t, vector_var_indices)
    return t


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    objective: float
    residual: float
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def residual(problem: ConicProblem, x) -> float:
    """Largest violation of any constraint at ``x``."""
    x = np.asarray(x, dtype=float)
    A_eq, b_eq, A_in, b_in = problem.matrices()
    parts = [0.0]
    if A_eq.shape[0]:
        parts.append(np.abs(A_eq @ x - b_eq).max())
    if A_in.shape[0]:
        parts.append(np.max(A_in @ x - b_in, initial=0.0))
    lb, ub = np.asarray(problem.lb), np.asarray(problem.ub)
    parts.append(np.max(lb - x, initial=0.0))
    parts.append(np.max(x - ub, initial=0.0))
    for cone in problem.cones:
        parts.append(max(np.linalg.norm(x[list(cone[1:])]) - x[cone[0]], 0.0))
    return float(max(parts))


def solve(problem: ConicProblem, tol: float = 1e-8, max_iter: int = 200) -> ConicSolution:
    """Solve with the Clarabel interior-point method."""
    import clarabel

    n = problem.n_vars
    A_eq, b_eq, A_in, b_in = problem.matrices()
    lb, ub = np.asarray(problem.lb, dtype=float), np.asarray(problem.ub, dtype=float)
    blocks, rhs, cones = [], [], []
    if A_eq.shape[0]:
        blocks.append(A_eq)
        rhs.append(b_eq)
        cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
    # all linear inequalities, bounds included, go in one nonnegative cone
    lin, lin_b = [A_in] if A_in.shape[0] else [], [b_in] if A_in.shape[0] else []
    fin_lb = np.flatnonzero(np.isfinite(lb))
    fin_ub = np.flatnonzero(np.isfinite(ub))
    if fin_lb.size:
        lin.append(sp.csr_matrix((-np.ones(fin_lb.size), (np.arange(fin_lb.size), fin_lb)), shape=(fin_lb.size, n)))
        lin_b.append(-lb[fin_lb])
    if fin_ub.size:
        lin.append(sp.csr_matrix((np.ones(fin_ub.size), (np.arange(fin_ub.size), fin_ub)), shape=(fin_ub.size, n)))
        lin_b.append(ub[fin_ub])
    if lin:
        L = sp.vstack(lin)
        blocks.append(L)
        rhs.append(np.concatenate(lin_b))
        cones.append(clarabel.NonnegativeConeT(L.shape[0]))
    for cone in problem.cones:
        d = len(cone)
        blocks.append(sp.csr_matrix((-np.ones(d), (np.arange(d), list(cone))), shape=(d, n)))
        rhs.append(np.zeros(d))
        cones.append(clarabel.SecondOrderConeT(d))
    if not blocks:
        raise ValueError("problem has no constraints")
    A = sp.vstack(blocks).tocsc()
    b = np.concatenate(rhs)

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = int(max_iter)
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_infeas_abs = tol
    settings.tol_infeas_rel = tol
    solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), np.asarray(problem.c, dtype=float), A, b, cones, settings)
    out = solver.solve()
    x = np.asarray(out.x, dtype=float)
    status = _STATUS.get(str(out.status), NUMERICAL_ERROR)
    res = residual(problem, x) if x.size == n else np.inf
    obj = float(np.dot(problem.c, x)) if x.size == n else np.nan
    return ConicSolution(status, x, obj, res, int(out.iterations))


_STATUS = {
    "Solved": OPTIMAL,
    "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": NUMERICAL_ERROR,  # unbounded objective
    "AlmostDualInfeasible": NUMERICAL_ERROR,
    "MaxIterations": MAX_ITER,
    "MaxTime": MAX_ITER,
    "NumericalError": NUMERICAL_ERROR,
    "InsufficientProgress": NUMERICAL_ERROR,
}
