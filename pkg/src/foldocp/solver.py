"""Newton and marching solvers for the discrete stationarity system.

Unknowns live in a knot-major flat vector (per knot: attitude chart increment,
momentum, fold angle, rotor commands; per interval: the two multipliers); the
attitude block is re-centered every Newton iterate so increments stay small.
The Jacobian is central finite differences evaluated in structurally
independent column groups and factored sparse; a dense single-column sweep is
kept as the correctness reference.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from . import liealg, ocp, plant, varint

# chart radius for attitude increments; Newton trials beyond this are
# rejected and backtracked rather than trusted
CHART_RADIUS = np.pi - 0.1

_KNOT_WIDTH = 11  # 3 attitude + 3 momentum + 1 fold + 4 rotors
_PAIR_WIDTH = 17  # knot block + interval multipliers (3 + 3)


class SingularJacobian(RuntimeError):
    """The stationarity Jacobian cannot be factored (e.g. c1 = 0)."""


class SingularBlock(RuntimeError):
    """One interface block of the marching map is singular."""


@dataclass(frozen=True)
class SolverConfig:
    tol_residual: float = 1e-9
    tol_step: float = 1e-10
    max_iter: int = 100
    fd_epsilon: float = 1e-6  # relative central-difference step
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-8
    mode: str = "full_newton"

    def __post_init__(self):
        for name in ("tol_residual", "tol_step", "fd_epsilon", "min_step"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be a positive real")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "max_iter", int(self.max_iter))
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.mode not in ("full_newton", "marching", "shooting"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


_BC_FIELDS = {
    "fixed_endpoints": (
        ("g0", "Pi0", "u0", "gN", "PiN", "uN"),
        ("u_dot0", "p_Pi0", "p_xi0"),
    ),
    "free_terminal": (
        ("g0", "Pi0", "u0"),
        ("gN", "PiN", "uN", "u_dot0", "p_Pi0", "p_xi0"),
    ),
    "initial_costate": (
        ("g0", "Pi0", "u0", "u_dot0", "p_Pi0", "p_xi0"),
        ("gN", "PiN", "uN"),
    ),
}


@dataclass(frozen=True)
class BoundaryConditions:
    """One of three closures of the discrete system.

    fixed_endpoints pins (g, Pi, u) at both ends and drops their stationarity
    rows; free_terminal pins the initial triple only, leaving the terminal
    rows as natural conditions; initial_costate pins the initial triple plus
    the fold rate and both costates (multiplier pins replace the initial
    stationarity rows, the terminal rows are dropped).
    """

    mode: str
    g0: Any = None
    Pi0: Any = None
    u0: Any = None
    gN: Any = None
    PiN: Any = None
    uN: Any = None
    u_dot0: Any = None
    p_Pi0: Any = None
    p_xi0: Any = None

    def __post_init__(self):
        if self.mode not in _BC_FIELDS:
            raise ValueError(f"unknown boundary mode {self.mode!r}")
        required, forbidden = _BC_FIELDS[self.mode]
        for name in required:
            if getattr(self, name) is None:
                raise ValueError(f"{self.mode} requires {name}")
        for name in forbidden:
            if getattr(self, name) is not None:
                raise ValueError(f"{name} does not apply to {self.mode}")
        for name in ("g0", "gN"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                liealg.require_rotation(value)
                object.__setattr__(self, name, value)
        for name in ("Pi0", "PiN", "p_Pi0", "p_xi0"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape != (3,) or not np.isfinite(value).all():
                    raise ValueError(f"{name} must be a finite 3-vector")
                object.__setattr__(self, name, value)
        for name in ("u0", "uN", "u_dot0"):
            value = getattr(self, name)
            if value is not None:
                value = float(value)
                if not np.isfinite(value):
                    raise ValueError(f"{name} must be finite")
                object.__setattr__(self, name, value)


@dataclass(frozen=True)
class Problem:
    """Weights, reference, plant models, and grid bundled for the solver."""

    w: ocp.CostWeights
    ref: ocp.Reference
    model: plant.InertiaModel
    act: plant.ActuationModel
    grid: varint.GridSpec


# ---------------------------------------------------------------------------
# flat packing and charts


def _total_size(n):
    return _PAIR_WIDTH * n + _KNOT_WIDTH


def pack(traj):
    """Flatten a trajectory; attitude slots hold zero chart increments."""
    n = traj.grid.n
    v = np.zeros(_total_size(n))
    for k, knot in enumerate(traj.knots):
        b = _PAIR_WIDTH * k
        v[b + 3:b + 6] = knot.Pi
        v[b + 6] = knot.u
        v[b + 7:b + 11] = knot.tau
    for k, m in enumerate(traj.multipliers):
        b = _PAIR_WIDTH * k + _KNOT_WIDTH
        v[b:b + 3] = m.lam
        v[b + 3:b + 6] = m.mu
    return v


def unpack(base_traj, v, method="cay"):
    """Rebuild a trajectory from a flat vector around base_traj's attitudes.

    g_k <- g_k retract(delta_k); all other fields are taken verbatim.
    Raises OutOfChart when an attitude increment approaches the chart radius.
    """
    n = base_traj.grid.n
    v = np.asarray(v, dtype=float)
    if v.shape != (_total_size(n),):
        raise ValueError(f"expected a flat vector of length {_total_size(n)}")
    knots = []
    for k, knot in enumerate(base_traj.knots):
        b = _PAIR_WIDTH * k
        delta = v[b:b + 3]
        if np.linalg.norm(delta) >= CHART_RADIUS:
            raise liealg.OutOfChart(
                f"attitude increment {np.linalg.norm(delta):.3f} at knot {k} "
                "leaves the chart"
            )
        knots.append(
            varint.DiscreteKnot(
                g=knot.g @ liealg.retract(delta, method),
                Pi=v[b + 3:b + 6],
                u=float(v[b + 6]),
                tau=v[b + 7:b + 11],
            )
        )
    mults = []
    for k in range(n):
        b = _PAIR_WIDTH * k + _KNOT_WIDTH
        mults.append(varint.Multipliers(lam=v[b:b + 3], mu=v[b + 3:b + 6]))
    return varint.DiscreteTrajectory(base_traj.grid, knots, mults)


def _masks(grid, bc):
    """Boolean (rows, cols) masks carving the square system out of the
    full stationarity + feasibility stack."""
    n = grid.n
    rows = np.ones(_total_size(n), dtype=bool)
    cols = np.ones(_total_size(n), dtype=bool)
    if bc.mode == "fixed_endpoints":
        for k in (0, n):
            b = _PAIR_WIDTH * k
            rows[b:b + 7] = False
            cols[b:b + 7] = False
    elif bc.mode == "free_terminal":
        rows[0:7] = False
        cols[0:7] = False
    else:  # initial_costate: pins replace the initial rows, terminal dropped
        cols[0:7] = False
        b = _PAIR_WIDTH * n
        rows[b:b + 7] = False
    return rows, cols


def _full_residual(prob, traj, bc, method="cay", ref_table=None):
    out = varint.kkt_residuals_exact(
        prob.w, prob.ref, prob.model, prob.act, traj, method,
        ref_table=ref_table,
    )
    n = prob.grid.n
    r = np.empty(_total_size(n))
    for k in range(n + 1):
        b = _PAIR_WIDTH * k
        r[b:b + 3] = out["d_g"][k]
        r[b + 3:b + 6] = out["d_Pi"][k]
        r[b + 6] = out["d_u"][k]
        r[b + 7:b + 11] = out["d_tau"][k]
    for k in range(n):
        b = _PAIR_WIDTH * k + _KNOT_WIDTH
        r[b:b + 3] = out["phi123"][k]
        r[b + 3:b + 6] = out["phi4"][k]
    if bc.mode == "initial_costate":
        h = prob.grid.h
        r[0:3] = traj.multipliers[0].mu - bc.p_xi0
        r[3:6] = traj.multipliers[0].lam - h * bc.p_Pi0
        r[6] = (traj.knots[1].u - traj.knots[0].u) / h - bc.u_dot0
    return r


def assemble_residual(prob, traj, bc, method="cay"):
    """Square residual under the boundary closure; zero iff the discrete
    necessary conditions hold."""
    rows, _ = _masks(prob.grid, bc)
    return _full_residual(prob, traj, bc, method)[rows]


# ---------------------------------------------------------------------------
# finite-difference Jacobian (colored sparse default, dense reference)


def _col_block(j):
    q, r = divmod(j, _PAIR_WIDTH)
    if r < _KNOT_WIDTH:
        return "knot", q, r
    return "interval", q, r - _KNOT_WIDTH


def _rows_for_knot(n, k):
    idx = []
    for kk in range(max(0, k - 1), min(n, k + 1) + 1):
        b = _PAIR_WIDTH * kk
        idx.extend(range(b, b + _KNOT_WIDTH))
    for kk in range(max(0, k - 1), min(n - 1, k) + 1):
        b = _PAIR_WIDTH * kk + _KNOT_WIDTH
        idx.extend(range(b, b + 6))
    return idx


def _rows_for_interval(n, k):
    idx = []
    for kk in (k, k + 1):
        b = _PAIR_WIDTH * kk
        idx.extend(range(b, b + _KNOT_WIDTH))
    return idx


def _pattern_rows(n, j):
    kind, k, _ = _col_block(j)
    if kind == "knot":
        return _rows_for_knot(n, k)
    return _rows_for_interval(n, k)


def jacobian_fd(prob, base, bc, cfg=None, method="cay", colored=True,
                ref_table=None):
    """Central-difference Jacobian of the square residual at base.

    Columns are perturbed in structurally independent groups (knots three
    apart, intervals two apart, one coordinate slot at a time), so a full
    Jacobian costs 90 residual sweeps regardless of the grid size. The
    number of concurrent column workers is capped by FOLDOCP_THREADS
    (default 1). colored=False evaluates one column at a time and returns a
    dense array -- the reference path.
    """
    cfg = cfg or SolverConfig()
    n = prob.grid.n
    rows_mask, cols_mask = _masks(prob.grid, bc)
    m = int(rows_mask.sum())
    row_pos = -np.ones(_total_size(n), dtype=int)
    row_pos[rows_mask] = np.arange(m)
    free_cols = np.flatnonzero(cols_mask)
    col_pos = {int(j): i for i, j in enumerate(free_cols)}
    v0 = pack(base)
    eps = cfg.fd_epsilon * (1.0 + np.abs(v0))

    def column_diff(cols):
        vp = v0.copy()
        vm = v0.copy()
        for j in cols:
            vp[j] += eps[j]
            vm[j] -= eps[j]
        rp = _full_residual(prob, unpack(base, vp, method), bc, method, ref_table)
        rm = _full_residual(prob, unpack(base, vm, method), bc, method, ref_table)
        return rp - rm

    if not colored:
        dense = np.zeros((m, m))
        for j in free_cols:
            d = column_diff([j])
            dense[:, col_pos[j]] = d[rows_mask] / (2.0 * eps[j])
        return dense

    groups = {}
    for j in free_cols:
        kind, k, slot = _col_block(j)
        stride = 3 if kind == "knot" else 2
        groups.setdefault((kind, k % stride, slot), []).append(int(j))

    def eval_group(cols):
        d = column_diff(cols)
        entries = []
        for j in cols:
            scale = 2.0 * eps[j]
            for r_full in _pattern_rows(n, j):
                r_red = row_pos[r_full]
                if r_red >= 0:
                    entries.append((r_red, col_pos[j], d[r_full] / scale))
        return entries

    workers = int(os.environ.get("FOLDOCP_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_group = list(pool.map(eval_group, groups.values()))
    else:
        per_group = [eval_group(cols) for cols in groups.values()]
    rows_idx, cols_idx, data = [], [], []
    for entries in per_group:
        for r, c, value in entries:
            rows_idx.append(r)
            cols_idx.append(c)
            data.append(value)
    return coo_matrix((data, (rows_idx, cols_idx)), shape=(m, m)).tocsc()


def _condition_estimate(matrix, lu):
    m = matrix.shape[0]
    if m <= 8:
        return float(np.linalg.cond(matrix.toarray(), 1))
    op = LinearOperator(
        (m, m),
        matvec=lambda b: lu.solve(b),
        rmatvec=lambda b: lu.solve(b, trans="T"),
    )
    try:
        return float(onenormest(matrix) * onenormest(op))
    except Exception:
        return float("nan")


# ---------------------------------------------------------------------------
# global damped Newton


def _project_bc(traj, bc, grid):
    # overwrite the pinned endpoint fields so the masked system never has to
    # move them
    knots = list(traj.knots)

    def replace(k, g, Pi, u):
        knots[k] = varint.DiscreteKnot(g=g, Pi=Pi, u=u, tau=knots[k].tau)

    replace(0, bc.g0, bc.Pi0, bc.u0)
    if bc.mode == "fixed_endpoints":
        replace(grid.n, bc.gN, bc.PiN, bc.uN)
    return varint.DiscreteTrajectory(grid, knots, traj.multipliers)


def newton_solve(prob, traj0, bc, cfg=None, method="cay"):
    """Damped Newton on the square stationarity system.

    Returns (trajectory, report); the report carries the iteration count,
    the residual-norm history, per-iterate step norms, and a 1-norm
    condition estimate of the last factored Jacobian. Raises
    SingularJacobian when c1 = 0 (the fold-coupling block c1/h vanishes) or
    when factorization fails, NoConvergence when the iteration budget or the
    line search is exhausted.
    """
    cfg = cfg or SolverConfig()
    if prob.w.c1 == 0.0:
        raise SingularJacobian(
            "c1 = 0 zeroes the fold-coupling block c1/h; the system is singular"
        )
    rows_mask, cols_mask = _masks(prob.grid, bc)
    table = varint.reference_table(prob.ref, prob.grid)
    base = _project_bc(traj0, bc, prob.grid)
    r = _full_residual(prob, base, bc, method, table)[rows_mask]
    residuals = [float(np.abs(r).max())]
    step_norms = []
    condition = float("nan")
    iterations = 0
    while residuals[-1] > cfg.tol_residual:
        if iterations >= cfg.max_iter:
            raise varint.NoConvergence(
                f"residual {residuals[-1]:.3e} after {cfg.max_iter} iterations"
            )
        jac = jacobian_fd(prob, base, bc, cfg, method, ref_table=table)
        try:
            lu = splu(jac)
        except RuntimeError as exc:
            raise SingularJacobian(f"failed to factor the Jacobian: {exc}")
        direction = lu.solve(-r)
        if not np.isfinite(direction).all():
            raise SingularJacobian("Newton direction is not finite")
        condition = _condition_estimate(jac, lu)
        v0 = pack(base)
        dv = np.zeros(v0.size)
        dv[cols_mask] = direction
        merit0 = 0.5 * float(r @ r)
        t = 1.0
        while True:
            try:
                trial = unpack(base, v0 + t * dv, method)
                r_t = _full_residual(prob, trial, bc, method, table)[rows_mask]
                if 0.5 * float(r_t @ r_t) <= merit0 * (
                    1.0 - 2.0 * cfg.armijo_c * t
                ):
                    break
            except liealg.OutOfChart:
                pass
            t *= cfg.backtrack
            if t < cfg.min_step:
                raise varint.NoConvergence("line search stalled below min step")
        base = trial
        r = r_t
        residuals.append(float(np.abs(r).max()))
        step_norms.append(float(np.abs(t * direction).max()))
        iterations += 1
        if step_norms[-1] < cfg.tol_step and residuals[-1] > cfg.tol_residual:
            raise varint.NoConvergence(
                "step size collapsed before the residual tolerance was met"
            )
    report = {
        "mode": bc.mode,
        "iterations": iterations,
        "residuals": residuals,
        "step_norms": step_norms,
        "condition": condition,
        "unknowns": int(cols_mask.sum()),
    }
    return base, report


def initial_guess(bc, ref, grid):
    """Retraction-geodesic attitude sweep with zero controls and multipliers.

    fixed_endpoints interpolates between the two pinned states (endpoints
    exact); the other modes sweep from the initial state to the reference at
    the final time with the fold angle held at its initial value.
    """
    n = grid.n
    if bc.mode == "fixed_endpoints":
        g_a, g_b = bc.g0, bc.gN
        Pi_a, Pi_b = bc.Pi0, bc.PiN
        u_a, u_b = bc.u0, bc.uN
    else:
        g_a, g_b = bc.g0, np.asarray(ref.g_d(grid.t_final), dtype=float)
        Pi_a = bc.Pi0
        Pi_b = np.asarray(ref.Pi_d(grid.t_final), dtype=float)
        u_a = u_b = bc.u0
    x = liealg.retract_inv(g_a.T @ g_b)
    knots = []
    for k in range(n + 1):
        s = k / n
        if k == 0:
            g = g_a
        elif k == n:
            g = g_b
        else:
            g = g_a @ liealg.retract(s * x)
        knots.append(
            varint.DiscreteKnot(
                g=g,
                Pi=(1.0 - s) * Pi_a + s * Pi_b,
                u=(1.0 - s) * u_a + s * u_b,
                tau=np.zeros(4),
            )
        )
    mults = [
        varint.Multipliers(lam=np.zeros(3), mu=np.zeros(3)) for _ in range(n)
    ]
    return varint.DiscreteTrajectory(grid, knots, mults)


def _blend_bc(bc, s, g_ref, Pi_ref, method):
    x = liealg.retract_inv(g_ref.T @ bc.g0, method)
    changes = {
        "g0": g_ref @ liealg.retract(s * x, method),
        "Pi0": (1.0 - s) * Pi_ref + s * bc.Pi0,
    }
    if bc.mode == "initial_costate":
        changes["p_Pi0"] = s * bc.p_Pi0
        changes["p_xi0"] = s * bc.p_xi0
        changes["u_dot0"] = s * bc.u_dot0
    return replace(bc, **changes)


def continuation_solve(prob, bc, cfg=None, method="cay", stages=4, guess=None):
    """newton_solve driven along a blend from the reference state to bc.

    Strongly tilted initial states can push plain Newton through a
    near-singular fold of the stationarity system; here the initial attitude
    and momentum (and, in initial_costate mode, the costates) are swept from
    the reference state at t = 0 toward the requested values, each stage
    warm-starting from the last. A failed stage bisects toward the previous
    success until the blend gap falls below 1/64. Returns (trajectory,
    report) of the final stage, with the stage schedule appended to the
    report.
    """
    cfg = cfg or SolverConfig()
    if isinstance(stages, int):
        if stages < 1:
            raise ValueError("stages must be at least 1")
        queue = list(np.linspace(1.0 / stages, 1.0, stages))
    else:
        queue = sorted(float(s) for s in stages)
        if not queue or queue[-1] != 1.0 or queue[0] <= 0.0:
            raise ValueError("an explicit stage schedule must end at 1.0")
    g_ref = np.asarray(prob.ref.g_d(0.0), dtype=float)
    Pi_ref = np.asarray(prob.ref.Pi_d(0.0), dtype=float)
    traj = guess
    schedule = []
    budget = max(8, 3 * len(queue))
    s_prev = 0.0
    while queue:
        s = queue[0]
        bc_s = bc if s >= 1.0 else _blend_bc(bc, s, g_ref, Pi_ref, method)
        start = traj if traj is not None else initial_guess(bc_s, prob.ref, prob.grid)
        budget -= 1
        try:
            traj, report = newton_solve(prob, start, bc_s, cfg, method)
        except varint.NoConvergence:
            if budget <= 0 or s - s_prev < 1.0 / 64.0:
                raise varint.NoConvergence(
                    f"continuation stalled between blend {s_prev:g} and {s:g}"
                )
            queue.insert(0, 0.5 * (s_prev + s))
            continue
        schedule.append((s, report["iterations"]))
        queue.pop(0)
        s_prev = s
    report["stages"] = schedule
    return traj, report


# ---------------------------------------------------------------------------
# interface marching


@dataclass(frozen=True)
class IntervalBlock:
    """One interval of knots with its multipliers: the marching state."""

    k: int
    knot_a: varint.DiscreteKnot
    knot_b: varint.DiscreteKnot
    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "k", int(self.k))
        if self.k < 0:
            raise ValueError("interval index must be nonnegative")
        for name in ("lam", "mu"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (3,) or not np.isfinite(value).all():
                raise ValueError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, value)


def block_from_trajectory(traj, k):
    m = traj.multipliers[k]
    return IntervalBlock(k, traj.knots[k], traj.knots[k + 1], m.lam, m.mu)


def step_map(prob, block, cfg=None, method="cay", lookahead=1):
    """Advance the interface map one interval.

    Given (knot_k, knot_{k+1}, lam_k, mu_k), produce (lam_{k+1}, mu_{k+1})
    and knot_{k+2} satisfying the full stationarity block at knot k+1 plus
    the feasibility of interval k+1, with the thrust sum of every new tau
    pinned to zero -- the zero-torque rotor component no stationarity row
    can see, which vanishes at any stationary point.

    The one-interval system is nearly singular along rotor patterns at the
    new knot whose torque is traded against that knot's momentum: the trade
    is invisible until the following interval's rows exist, so errors in
    the incoming block are amplified along it.  `lookahead` extends the
    solve to that many intervals ahead and commits only the first block,
    which suppresses the amplification; lookahead=1 is the literal
    recursion.  Windows reaching the last knot append its rotor
    stationarity rows, which hold under every boundary mode.

    For lookahead > 1 the same trade reappears at the window edge, where it
    is an exact null of the window system; those edge variables are scratch
    (discarded on commit), so directions below 1e-8 of the largest singular
    value are truncated and only a deficiency beyond the 3-dimensional edge
    trade raises SingularBlock.
    """
    cfg = cfg or SolverConfig()
    w, model, act, ref = prob.w, prob.model, prob.act, prob.ref
    h = prob.grid.h
    if w.c1 == 0.0:
        raise SingularBlock(
            "c1 = 0 zeroes the fold-coupling block; the interface map is singular"
        )
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    width = min(int(lookahead), prob.grid.n - 1 - block.k)
    if width < 1:
        raise ValueError("no interval left to advance into")
    a, b = block.knot_a, block.knot_b
    closes = block.k + width + 1 == prob.grid.n
    t0 = block.k * h
    grid_w = varint.GridSpec(h=h, n=width + 1)
    table = varint.reference_table(ref, grid_w, t0)

    x_step = liealg.retract_inv(a.g.T @ b.g, method)
    base_g = [b.g]
    for _ in range(width):
        base_g.append(base_g[-1] @ liealg.retract(x_step, method))

    def split(z):
        mults = [varint.Multipliers(block.lam, block.mu)]
        for j in range(width):
            s = 6 * j
            mults.append(varint.Multipliers(z[s : s + 3], z[s + 3 : s + 6]))
        knots = [a, b]
        for j in range(width):
            s = 6 * width + 11 * j
            knots.append(
                varint.DiscreteKnot(
                    g=base_g[j + 1] @ liealg.retract(z[s : s + 3], method),
                    Pi=z[s + 3 : s + 6],
                    u=float(z[s + 6]),
                    tau=z[s + 7 : s + 11],
                )
            )
        return knots, mults

    def residual(z):
        knots, mults = split(z)
        traj = varint.DiscreteTrajectory(grid_w, knots, mults)
        out = varint.kkt_residuals_exact(w, ref, model, act, traj, method, t0, table)
        rows = []
        for j in range(1, width + 1):
            rows += [out["d_g"][j], out["d_Pi"][j], [out["d_u"][j]], out["d_tau"][j]]
        rows += [out["phi123"][j] for j in range(1, width + 1)]
        rows += [out["phi4"][j] for j in range(1, width + 1)]
        rows.append([knots[j].tau.sum() for j in range(2, width + 2)])
        if closes:
            rows.append(out["d_tau"][width + 1])
        return np.concatenate(rows)

    z = np.zeros(17 * width)
    d_Pi, d_u = b.Pi - a.Pi, b.u - a.u
    for j in range(width):
        z[6 * j : 6 * j + 3] = block.lam
        z[6 * j + 3 : 6 * j + 6] = block.mu
        s = 6 * width + 11 * j
        z[s + 3 : s + 6] = b.Pi + (j + 1) * d_Pi
        z[s + 6] = b.u + (j + 1) * d_u
        z[s + 7 : s + 11] = b.tau
    tol = min(cfg.tol_residual, 1e-11)
    r = residual(z)
    for _ in range(cfg.max_iter):
        if np.abs(r).max() <= tol:
            break
        jac = np.empty((r.size, z.size))
        for j in range(z.size):
            e = cfg.fd_epsilon * (1.0 + abs(z[j]))
            zp = z.copy()
            zm = z.copy()
            zp[j] += e
            zm[j] -= e
            jac[:, j] = (residual(zp) - residual(zm)) / (2.0 * e)
        dz, _, rank, _ = np.linalg.lstsq(
            jac, -r, rcond=None if width == 1 else 1e-8
        )
        floor = z.size if width == 1 else z.size - 3
        if rank < floor:
            raise SingularBlock(f"interface Jacobian has rank {rank} < {floor}")
        if not np.isfinite(dz).all():
            raise SingularBlock("interface Newton direction is not finite")
        merit0 = 0.5 * float(r @ r)
        t = 1.0
        while True:
            r_t = residual(z + t * dz)
            if 0.5 * float(r_t @ r_t) <= merit0 * (1.0 - 2.0 * cfg.armijo_c * t):
                break
            t *= cfg.backtrack
            if t < cfg.min_step:
                raise varint.NoConvergence("interface line search stalled")
        z = z + t * dz
        r = r_t
        if width > 1 and np.abs(t * dz).max() <= cfg.tol_step:
            break
    else:
        raise varint.NoConvergence(
            f"interface Newton did not converge in {cfg.max_iter} iterations"
        )
    if width > 1:
        committed = np.concatenate(
            [r[:11], r[11 * width : 11 * width + 3], r[14 * width : 14 * width + 3]]
        )
        if np.abs(committed).max() > 1e-8:
            raise varint.NoConvergence(
                "committed interface rows stalled above tolerance"
            )
    knots, mults = split(z)
    return IntervalBlock(block.k + 1, b, knots[2], mults[1].lam, mults[1].mu)


def march(prob, block0, cfg=None, method="cay", lookahead=3):
    """Iterate step_map across the whole grid from the interval-0 block.

    The default lookahead keeps the recursion stable (see step_map); every
    committed block still satisfies the interface rows to solver tolerance.
    """
    if block0.k != 0:
        raise ValueError("marching starts from the interval-0 block")
    knots = [block0.knot_a, block0.knot_b]
    mults = [varint.Multipliers(block0.lam, block0.mu)]
    block = block0
    for _ in range(prob.grid.n - 1):
        block = step_map(prob, block, cfg, method, lookahead)
        knots.append(block.knot_b)
        mults.append(varint.Multipliers(block.lam, block.mu))
    return varint.DiscreteTrajectory(prob.grid, knots, mults)


def regularity_check(prob, traj, k, eps=1e-4):
    """(measured fold-coupling magnitude, predicted |c1|/h) at interval k.

    The measured value is the mixed derivative of the extended cost in
    (u_k, u_{k+1}), obtained by differencing the fold stationarity row; it
    equals c1/h with no O(1) correction, so the pair should agree except at
    degenerate weights.
    """
    if not 0 <= k < prob.grid.n:
        raise ValueError("interval index out of range")

    def fold_row(shift):
        knots = list(traj.knots)
        old = knots[k + 1]
        knots[k + 1] = varint.DiscreteKnot(
            g=old.g, Pi=old.Pi, u=old.u + shift, tau=old.tau
        )
        bumped = varint.DiscreteTrajectory(traj.grid, knots, traj.multipliers)
        return varint.kkt_residuals_exact(
            prob.w, prob.ref, prob.model, prob.act, bumped
        )["d_u"][k]

    e = eps * (1.0 + abs(traj.knots[k + 1].u))
    measured = (fold_row(e) - fold_row(-e)) / (2.0 * e)
    return abs(float(measured)), abs(prob.w.c1) / prob.grid.h


def shooting_trajectory(prob, bc, reorth_every=liealg.REORTH_INTERVAL):
    """Integrate the continuous necessary conditions and sample the grid.

    Diagnostic mode: knots at the grid times with the closed-form rotor
    command, multipliers from the midpoint costates (lam_k = h p_Pi at
    t_{k+1/2}, mu_k = p_xi there), under which the interior discrete rows
    vanish at third order in h.
    """
    if bc.mode != "initial_costate":
        raise ValueError("shooting requires initial_costate boundary data")
    state0 = ocp.OCPState(
        g=bc.g0,
        Pi=bc.Pi0,
        u=bc.u0,
        u_dot=bc.u_dot0,
        p_Pi=bc.p_Pi0,
        p_xi=bc.p_xi0,
    )
    n, h = prob.grid.n, prob.grid.h
    ext = ocp.integrate_necessary(
        prob.w, prob.model, prob.act, prob.ref, state0, 0.5 * h, 2 * n,
        reorth_every=reorth_every,
    )
    knots = [
        varint.DiscreteKnot(
            g=ext.g[2 * k],
            Pi=ext.Pi[2 * k],
            u=float(ext.u[2 * k]),
            tau=ocp.tau_star(prob.w, prob.act, ext.p_Pi[2 * k], float(ext.u[2 * k])),
        )
        for k in range(n + 1)
    ]
    mults = [
        varint.Multipliers(lam=h * ext.p_Pi[2 * k + 1], mu=ext.p_xi[2 * k + 1])
        for k in range(n)
    ]
    return varint.DiscreteTrajectory(prob.grid, knots, mults)
