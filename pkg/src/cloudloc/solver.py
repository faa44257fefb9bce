"""Damped Gauss-Newton over small factor graphs.

Variables live in a dict keyed by hashable labels; `Pose` values use the
right retraction from `se3`, ndarray values are additive.  Keys listed in
`eliminated` (3-dof points) are removed from the normal equations by a
Schur complement before the dense solve and recovered by back-substitution,
which keeps the per-iteration cost quadratic in the number of poses rather
than points.  Damping is multiplicative on the diagonal: x10 on a rejected
step, x0.5 on an accepted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SolverDiverged
from .factors import huber
from .se3 import Pose


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 20
    rel_decrease: float = 1e-6
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e8
    cost_floor: float = 1e-13
    step_tol: float = 1e-8  # accepted step with max|delta| below this converges


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int = 0
    accepted: int = 0
    converged: bool = False
    reason: str = ""


def _dim_of(value) -> int:
    return 6 if isinstance(value, Pose) else int(np.asarray(value).size)


def _retract(value, delta):
    if isinstance(value, Pose):
        return value.retract(delta)
    return value + delta


def total_cost(factors, values) -> float:
    return float(sum(f.cost(values) for f in factors))


def assemble_normal_matrix(factors, values, fixed=frozenset()):
    """Undamped H = sum w J^T W J and b = -sum w J^T W r over all free keys.

    Returns (H, b, index) where index maps each free key to its slice.
    Used by the solver tests and by the cloud's marginal-information
    extraction; robust weights are applied exactly as in the solve loop.
    """
    keys = [k for k in values if k not in fixed]
    index, off = {}, 0
    for k in keys:
        d = _dim_of(values[k])
        index[k] = slice(off, off + d)
        off += d
    H = np.zeros((off, off))
    b = np.zeros(off)
    for f in factors:
        for blk in f.blocks(values):
            w = huber(blk.squared_error(), blk.robust)[1]
            items = [(k, j) for k, j in blk.jacobians.items() if k not in fixed]
            winfo = w * blk.info
            for k1, j1 in items:
                jw = j1.T @ winfo
                b[index[k1]] -= jw @ blk.residual
                for k2, j2 in items:
                    H[index[k1], index[k2]] += jw @ j2
    return H, b, index


def solve(values, factors, fixed=frozenset(), eliminated=frozenset(), options: SolveOptions | None = None):
    """Minimize sum of robustified factor costs; returns (new_values, report).

    `values` is not mutated.  Keys in `fixed` are gauge-locked (bitwise
    unchanged); keys in `eliminated` must be 3-vectors that never share a
    factor block with another eliminated key.
    """
    opts = options or SolveOptions()
    vals = dict(values)
    fixed = frozenset(fixed)
    eliminated = frozenset(k for k in eliminated if k not in fixed)

    dense_keys = [k for k in vals if k not in fixed and k not in eliminated]
    index, off = {}, 0
    for k in dense_keys:
        d = _dim_of(vals[k])
        index[k] = slice(off, off + d)
        off += d
    nd = off

    cost = total_cost(factors, vals)
    report = SolveReport(initial_cost=cost, final_cost=cost)
    if not np.isfinite(cost):
        raise SolverDiverged(f"non-finite initial cost {cost}")
    if cost < opts.cost_floor:
        report.converged = True
        report.reason = "cost_floor"
        return vals, report

    lam = opts.init_lambda
    for it in range(opts.max_iterations):
        report.iterations = it + 1
        H = np.zeros((nd, nd))
        b = np.zeros(nd)
        elim: dict = {}  # key -> [Hpp, bp, {dense_key: Hdp}]
        for f in factors:
            for blk in f.blocks(vals):
                w = huber(blk.squared_error(), blk.robust)[1]
                winfo = w * blk.info
                dense = [(k, j) for k, j in blk.jacobians.items() if k in index]
                elims = [(k, j) for k, j in blk.jacobians.items() if k in eliminated]
                assert len(elims) <= 1, "factor couples two eliminated variables"
                for k1, j1 in dense:
                    jw = j1.T @ winfo
                    b[index[k1]] -= jw @ blk.residual
                    for k2, j2 in dense:
                        H[index[k1], index[k2]] += jw @ j2
                for kp, jp in elims:
                    ent = elim.get(kp)
                    if ent is None:
                        ent = [np.zeros((3, 3)), np.zeros(3), {}]
                        elim[kp] = ent
                    jw = jp.T @ winfo
                    ent[0] += jw @ jp
                    ent[1] -= jw @ blk.residual
                    for k1, j1 in dense:
                        cross = ent[2].get(k1)
                        contrib = (j1.T @ winfo) @ jp
                        if cross is None:
                            ent[2][k1] = contrib
                        else:
                            cross += contrib

        d_H = np.maximum(np.diag(H), 1e-12)

        accepted_step = False
        while True:
            S = H.copy()
            S[np.diag_indices(nd)] += lam * d_H
            bs = b.copy()
            elim_cache = {}
            ok = True
            for kp, (Hpp, bp, cross) in elim.items():
                Hpp_d = Hpp + lam * np.diag(np.maximum(np.diag(Hpp), 1e-12))
                try:
                    Hpp_inv = np.linalg.inv(Hpp_d)
                except np.linalg.LinAlgError:
                    ok = False
                    break
                elim_cache[kp] = (Hpp_inv, bp, cross)
                items = list(cross.items())
                for k1, c1 in items:
                    bs[index[k1]] -= c1 @ (Hpp_inv @ bp)
                    for k2, c2 in items:
                        S[index[k1], index[k2]] -= c1 @ Hpp_inv @ c2.T
            delta = None
            if ok:
                try:
                    delta = np.linalg.solve(S, bs) if nd else np.zeros(0)
                except np.linalg.LinAlgError:
                    ok = False
            if ok:
                trial = dict(vals)
                for k in dense_keys:
                    trial[k] = _retract(vals[k], delta[index[k]])
                for kp, (Hpp_inv, bp, cross) in elim_cache.items():
                    rhs = bp.copy()
                    for k1, c1 in cross.items():
                        rhs -= c1.T @ delta[index[k1]]
                    trial[kp] = _retract(vals[kp], Hpp_inv @ rhs)
                new_cost = total_cost(factors, trial)
                if np.isfinite(new_cost) and new_cost <= cost:
                    vals = trial
                    lam = max(lam * opts.lambda_down, 1e-12)
                    report.accepted += 1
                    accepted_step = True
                    break
            lam *= opts.lambda_up
            if lam > opts.lambda_max:
                raise SolverDiverged(
                    f"damping {lam:.2e} exceeded ceiling at cost {cost:.6e}"
                )

        decrease = cost - new_cost
        cost = new_cost
        step_norm = float(np.max(np.abs(delta))) if nd else 0.0
        if decrease <= opts.rel_decrease * max(cost, opts.cost_floor) or cost < opts.cost_floor:
            report.converged = True
            report.reason = "rel_decrease" if cost >= opts.cost_floor else "cost_floor"
            break
        if step_norm < opts.step_tol:
            report.converged = True
            report.reason = "step_tol"
            break
        if not accepted_step:  # pragma: no cover - loop above either accepts or raises
            break

    report.final_cost = cost
    return vals, report
