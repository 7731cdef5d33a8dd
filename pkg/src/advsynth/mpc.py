"""Finite-horizon tracking MPC as a box/halfspace-constrained QP.

Builds quadratic waypoint-tracking problems over a fixed linear model,
solves them with an over-relaxed ADMM iteration on a Ruiz-equilibrated
KKT system (dense LU, cached across solves that share one problem), and
reports the exact gradient of the optimal cost with respect to the
reference waypoints.  That gradient is a plain envelope evaluation: the
constraint set never depends on the waypoints, so differentiating the
optimal value only touches the explicit waypoint terms in the objective.

Layout of the stacked QP variable: all states first, then all controls,

    [x_0, ..., x_F, u_0, ..., u_{F-1}]

with rows ordered (initial state, dynamics, control boxes, state boxes,
position halfspaces).  Rows whose lower and upper bound are both
infinite are never emitted.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

SOLVED = "Solved"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"

UNICYCLE = "unicycle-linearized"
DOUBLE_INTEGRATOR = "double-integrator"

# Cost surcharge applied when an infeasible problem is re-solved with
# its obstacle halfspaces dropped (see solve_with_fallback).
FALLBACK_PENALTY = 1e4


class MpcError(Exception):
    """Raised for invalid problems and failed solves."""


@dataclass
class MpcConfig:
    """Knobs for problem construction.

    ``u_min``/``u_max`` and ``x_min``/``x_max`` of None mean "use the
    per-mode defaults": accelerations within 2 m/s^2, heading rate
    within 0.5 rad/s (unicycle) and speed within [0, 15] m/s.  Position
    and heading are unbounded.
    """

    mode: str = UNICYCLE
    horizon: int = 20
    dt: float = 1.0
    q_diag: tuple = (1.0, 1.0, 0.1, 0.1)
    r_diag: tuple = (0.1, 0.1)
    u_min: tuple = None
    u_max: tuple = None
    x_min: tuple = None
    x_max: tuple = None
    activation_radius: float = 25.0
    margin: float = 2.0

    def resolved_bounds(self):
        inf = np.inf
        if self.mode == UNICYCLE:
            u_lo, u_hi = (-2.0, -0.5), (2.0, 0.5)
            x_lo, x_hi = (-inf, -inf, 0.0, -inf), (inf, inf, 15.0, inf)
        elif self.mode == DOUBLE_INTEGRATOR:
            u_lo, u_hi = (-2.0, -2.0), (2.0, 2.0)
            x_lo, x_hi = (-inf, -inf, -15.0, -15.0), (inf, inf, 15.0, 15.0)
        else:
            raise MpcError("unknown dynamics mode %r" % (self.mode,))
        u_lo = self.u_min if self.u_min is not None else u_lo
        u_hi = self.u_max if self.u_max is not None else u_hi
        x_lo = self.x_min if self.x_min is not None else x_lo
        x_hi = self.x_max if self.x_max is not None else x_hi
        return (np.asarray(u_lo, float), np.asarray(u_hi, float),
                np.asarray(x_lo, float), np.asarray(x_hi, float))


@dataclass
class MpcProblem:
    """One tracking QP instance.

    ``halfspaces`` holds, per timestep t in 0..F, a list of (a, b)
    pairs with unit 2-vector a constraining the position coordinates:
    a @ (x, y) >= b.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    initial_state: np.ndarray
    waypoints: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    halfspaces: list = field(default_factory=list)

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        self.B = np.asarray(self.B, float)
        self.Q = np.asarray(self.Q, float)
        self.R = np.asarray(self.R, float)
        self.initial_state = np.asarray(self.initial_state, float)
        self.waypoints = np.asarray(self.waypoints, float)
        self.u_min = np.asarray(self.u_min, float)
        self.u_max = np.asarray(self.u_max, float)
        self.x_min = np.asarray(self.x_min, float)
        self.x_max = np.asarray(self.x_max, float)
        if not self.halfspaces:
            self.halfspaces = [[] for _ in range(self.horizon + 1)]
        self.validate()

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def validate(self):
        F, nx, nu = self.horizon, self.nx, self.nu
        if F < 1:
            raise MpcError("horizon must be >= 1")
        if self.A.shape != (nx, nx) or self.B.shape != (nx, nu):
            raise MpcError("A/B shape mismatch: %r, %r"
                           % (self.A.shape, self.B.shape))
        if self.Q.shape != (nx, nx) or self.R.shape != (nu, nu):
            raise MpcError("Q/R shape mismatch: %r, %r"
                           % (self.Q.shape, self.R.shape))
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            raise MpcError("Q must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-9:
            raise MpcError("Q must be positive semidefinite")
        if not np.allclose(self.R, self.R.T, atol=1e-12):
            raise MpcError("R must be symmetric")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise MpcError("R must be positive definite") from None
        if self.initial_state.shape != (nx,):
            raise MpcError("initial_state must have %d entries" % nx)
        if self.waypoints.shape != (F + 1, nx):
            raise MpcError("waypoints must be (F+1, nx) = %r, got %r"
                           % ((F + 1, nx), self.waypoints.shape))
        if not (np.all(self.u_min < self.u_max)
                and np.all(self.x_min < self.x_max)):
            raise MpcError("bounds must satisfy min < max componentwise")
        if len(self.halfspaces) != F + 1:
            raise MpcError("need one halfspace list per timestep 0..F")
        for t, hs in enumerate(self.halfspaces):
            if hs and nx < 2:
                raise MpcError("halfspaces need >= 2 position coordinates")
            for a, b in hs:
                a = np.asarray(a, float)
                if a.shape != (2,) or abs(np.linalg.norm(a) - 1.0) > 1e-9:
                    raise MpcError(
                        "halfspace normal at t=%d is not unit length" % t)
                float(b)


@dataclass
class MpcSolution:
    states: np.ndarray        # (F+1, nx)
    controls: np.ndarray      # (F, nu)
    cost: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str


# --------------------------------------------------------------------------
# problem construction


def _ellipse_nearest(p, a, b):
    """Nearest point on the boundary of an axis-aligned ellipse.

    ``p`` is relative to the ellipse center, semi-axes (a, b).  Returns
    (nearest_rel, distance, inside).  Solved by bisection on the
    standard Lagrange parameterization, which is monotone for t above
    the pole; robust at axis-aligned and near-center points.
    """
    px, py = float(p[0]), float(p[1])
    level = (px / a) ** 2 + (py / b) ** 2 - 1.0
    inside = level < 0.0

    def foot(t):
        return np.array([a * a * px / (t + a * a), b * b * py / (t + b * b)])

    def f(t):
        n = foot(t)
        return (n[0] / a) ** 2 + (n[1] / b) ** 2 - 1.0

    # Bracket the root.  Outside points have the root at t > 0; inside
    # points at t in (-min(a,b)^2, 0].  Degenerate p = 0 maps to the
    # closer axis endpoint.
    if abs(px) < 1e-12 and abs(py) < 1e-12:
        n = np.array([a, 0.0]) if a <= b else np.array([0.0, b])
        return n, float(min(a, b)), True
    lo = -min(a, b) ** 2 + 1e-12 * min(a, b) ** 2 if inside else 0.0
    hi = max(a * abs(px), b * abs(py)) + max(a, b)
    while f(hi) > 0.0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(hi)):
            break
    n = foot(0.5 * (lo + hi))
    return n, float(np.hypot(px - n[0], py - n[1])), inside


def build_obstacle_halfspaces(scenario, reference_line, margin, horizon,
                              activation_radius=25.0):
    """Per-timestep separating halfspaces anchored to a fixed segment.

    For each timestep t the reference point r_t sits a fraction t/F
    along ``reference_line`` (a (start, goal) pair).  Every obstacle
    whose margin-inflated boundary lies within ``activation_radius`` of
    r_t contributes one halfspace tangent to that inflated ellipse at
    the boundary point nearest r_t, oriented so the r_t side is
    feasible.  Reference points strictly inside an inflated obstacle
    contribute nothing there (logged): no tangent line can separate
    from inside.

    The construction depends only on the scenario geometry and the
    segment, never on the tracked waypoints; that independence is what
    keeps the envelope gradient of the optimal cost exact.
    """
    if margin < 0:
        raise MpcError("margin must be nonnegative")
    start = np.asarray(reference_line[0], float)
    goal = np.asarray(reference_line[1], float)
    F = int(horizon)
    out = []
    for t in range(F + 1):
        r_t = start + (goal - start) * (t / F)
        row = []
        for obs in scenario.obstacles:
            a_ax = obs.rx + margin
            b_ax = obs.ry + margin
            center = np.array([obs.cx, obs.cy])
            near, dist, inside = _ellipse_nearest(r_t - center, a_ax, b_ax)
            if inside:
                log.debug("reference point t=%d inside obstacle at "
                          "(%.1f, %.1f); skipping its halfspace",
                          t, obs.cx, obs.cy)
                continue
            if dist > activation_radius:
                continue
            gap = (r_t - center) - near
            gn = np.linalg.norm(gap)
            if gn > 1e-9:
                normal = gap / gn
            else:
                # r_t sits on the boundary: use the outward gradient.
                normal = np.array([near[0] / a_ax ** 2, near[1] / b_ax ** 2])
                normal = normal / np.linalg.norm(normal)
            point = center + near
            row.append((normal, float(normal @ point)))
        out.append(row)
    return out


def build_toy_problem(scenario, waypoints, config):
    """Tracking problem for one scenario and one waypoint sequence.

    ``waypoints`` is (F+1, 4) in (x, y, v, theta) form; the first entry
    doubles as the initial state.  The default mode linearizes the
    unicycle about the start-to-goal heading theta0 and the nominal
    speed v0 = segment length / (F * dt); the affine remainder of the
    linearization has no slot in a strictly linear model and is
    dropped.  The double-integrator mode re-expresses states as
    (x, y, vx, vy), converting the given waypoints.
    """
    waypoints = np.asarray(waypoints, float)
    if waypoints.ndim != 2 or waypoints.shape[1] != 4:
        raise MpcError("waypoints must be (F+1, 4)")
    F = waypoints.shape[0] - 1
    if F < 1:
        raise MpcError("need at least two waypoints")
    start = np.asarray(scenario.start, float)
    goal = np.asarray(scenario.goal, float)
    seg = goal - start
    seg_len = float(np.linalg.norm(seg))
    if not (np.isfinite(seg_len) and seg_len > 1e-9):
        raise MpcError("degenerate scenario: start equals goal")
    dt = config.dt
    theta0 = math.atan2(seg[1], seg[0])
    v0 = seg_len / (F * dt)

    if config.mode == UNICYCLE:
        c, s = math.cos(theta0), math.sin(theta0)
        A = np.array([[1.0, 0.0, dt * c, -dt * v0 * s],
                      [0.0, 1.0, dt * s, dt * v0 * c],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]])
        wps = waypoints
    elif config.mode == DOUBLE_INTEGRATOR:
        A = np.array([[1.0, 0.0, dt, 0.0],
                      [0.0, 1.0, 0.0, dt],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]])
        v, th = waypoints[:, 2], waypoints[:, 3]
        wps = np.column_stack([waypoints[:, 0], waypoints[:, 1],
                               v * np.cos(th), v * np.sin(th)])
    else:
        raise MpcError("unknown dynamics mode %r" % (config.mode,))
    B = np.array([[0.0, 0.0], [0.0, 0.0], [dt, 0.0], [0.0, dt]])

    u_lo, u_hi, x_lo, x_hi = config.resolved_bounds()
    halfspaces = build_obstacle_halfspaces(
        scenario, (start, goal), config.margin, F,
        activation_radius=config.activation_radius)
    return MpcProblem(
        A=A, B=B, Q=np.diag(config.q_diag), R=np.diag(config.r_diag),
        horizon=F, initial_state=wps[0].copy(), waypoints=wps,
        u_min=u_lo, u_max=u_hi, x_min=x_lo, x_max=x_hi,
        halfspaces=halfspaces)


# --------------------------------------------------------------------------
# QP assembly and the operator-splitting solver


def _assemble(problem):
    """Dense (P, M, l, u, neq) for the stacked variable; q built separately."""
    F, nx, nu = problem.horizon, problem.nx, problem.nu
    n = nx * (F + 1) + nu * F
    off = nx * (F + 1)

    P = np.zeros((n, n))
    for t in range(F + 1):
        P[nx * t:nx * t + nx, nx * t:nx * t + nx] = 2.0 * problem.Q
    for t in range(F):
        P[off + nu * t:off + nu * t + nu,
          off + nu * t:off + nu * t + nu] = 2.0 * problem.R

    rows, lo, hi = [], [], []
    for i in range(nx):                                   # x_0 = zeta0
        r = np.zeros(n)
        r[i] = 1.0
        rows.append(r)
        lo.append(problem.initial_state[i])
        hi.append(problem.initial_state[i])
    for t in range(F):                                    # dynamics
        for i in range(nx):
            r = np.zeros(n)
            r[nx * (t + 1) + i] = 1.0
            r[nx * t:nx * t + nx] -= problem.A[i]
            r[off + nu * t:off + nu * t + nu] -= problem.B[i]
            rows.append(r)
            lo.append(0.0)
            hi.append(0.0)
    neq = len(rows)
    for t in range(F):                                    # control boxes
        for j in range(nu):
            if np.isinf(problem.u_min[j]) and np.isinf(problem.u_max[j]):
                continue
            r = np.zeros(n)
            r[off + nu * t + j] = 1.0
            rows.append(r)
            lo.append(problem.u_min[j])
            hi.append(problem.u_max[j])
    for t in range(1, F + 1):                             # state boxes
        for j in range(nx):
            if np.isinf(problem.x_min[j]) and np.isinf(problem.x_max[j]):
                continue
            r = np.zeros(n)
            r[nx * t + j] = 1.0
            rows.append(r)
            lo.append(problem.x_min[j])
            hi.append(problem.x_max[j])
    for t, hs in enumerate(problem.halfspaces):           # a @ pos >= b
        for a, b in hs:
            r = np.zeros(n)
            r[nx * t:nx * t + 2] = np.asarray(a, float)
            rows.append(r)
            lo.append(float(b))
            hi.append(np.inf)
    M = np.array(rows)
    return P, M, np.array(lo), np.array(hi), neq


def _linear_cost(problem):
    """q such that the objective is 0.5 x'Px + q'x + sum_t w_t'Q w_t."""
    F, nx, nu = problem.horizon, problem.nx, problem.nu
    q = np.zeros(nx * (F + 1) + nu * F)
    for t in range(F + 1):
        q[nx * t:nx * t + nx] = -2.0 * (problem.Q @ problem.waypoints[t])
    return q


def tracking_cost(problem, states, controls):
    """Objective recomputed from a trajectory (the reported cost)."""
    d = states - problem.waypoints
    j = float(np.einsum("ti,ij,tj->", d, problem.Q, d))
    j += float(np.einsum("ti,ij,tj->", controls, problem.R, controls))
    return j


def _ruiz(P, q, M, iters=10):
    """Symmetric inf-norm equilibration plus cost normalization."""
    n, m = P.shape[0], M.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, Ms, qs = P.copy(), M.copy(), q.copy()
    for _ in range(iters):
        cn = np.maximum(np.abs(Ps).max(axis=0), np.abs(Ms).max(axis=0))
        cn[cn == 0] = 1.0
        dd = 1.0 / np.sqrt(cn)
        rn = np.abs(Ms).max(axis=1)
        rn[rn == 0] = 1.0
        ee = 1.0 / np.sqrt(rn)
        Ps = dd[:, None] * Ps * dd[None, :]
        qs = dd * qs
        Ms = ee[:, None] * Ms * dd[None, :]
        d *= dd
        e *= ee
        pn = np.abs(Ps).max(axis=0).mean()
        gn = np.abs(qs).max()
        cc = 1.0 / max(pn, gn) if max(pn, gn) > 0 else 1.0
        Ps *= cc
        qs *= cc
        c *= cc
    return Ps, Ms, d, e, c


class QpWorkspace:
    """Factorizations and scalings reused across waypoint-only updates.

    The expensive pieces (equilibration, the two KKT factorizations)
    depend on the quadratic term and the constraint matrix, neither of
    which involves the waypoints, so a workspace built once per problem
    serves every finite-difference perturbation and every synthesis
    step that only moves the targets.  The full ADMM KKT factor is
    computed lazily: solves whose equality-constrained optimum already
    satisfies all inequalities never pay for it.
    """

    check_interval = 25
    sigma = 1e-6
    alpha = 1.6
    rho = 0.1
    rho_eq_scale = 1000.0
    eps_infeas = 1e-5

    def __init__(self, problem):
        problem.validate()
        self.problem = problem
        self.P, self.M, self.l, self.u, self.neq = _assemble(problem)
        self.n = self.P.shape[0]
        self.m = self.M.shape[0]
        self.q = _linear_cost(problem)
        self._scaling = None       # (d, e, c, Ms, ls, us)
        self._kkt = None           # LU of the ADMM KKT
        self._rho_vec = None
        self._eq_kkt = None        # LU of the equality-only KKT
        self._warm = None          # (x, y) unscaled, from the last solve

    def set_waypoints(self, waypoints):
        waypoints = np.asarray(waypoints, float)
        if waypoints.shape != self.problem.waypoints.shape:
            raise MpcError("waypoint shape changed; build a new problem")
        self.problem.waypoints = waypoints
        self.q = _linear_cost(self.problem)

    # -- factorizations (lazy) -------------------------------------------

    def _ensure_eq_kkt(self):
        if self._eq_kkt is None:
            n, k = self.n, self.neq
            K = np.zeros((n + k, n + k))
            K[:n, :n] = self.P
            K[:n, n:] = self.M[:k].T
            K[n:, :n] = self.M[:k]
            K[n:, n:] = -1e-12 * np.eye(k)
            self._eq_kkt = sla.lu_factor(K, check_finite=False)
        return self._eq_kkt

    def _ensure_admm(self):
        if self._kkt is None:
            Ps, Ms, d, e, c = _ruiz(self.P, self.q, self.M)
            ls = e * self.l
            us = e * self.u
            self._scaling = (d, e, c, Ms, ls, us)
            rho_vec = self.rho * np.ones(self.m)
            rho_vec[:self.neq] *= self.rho_eq_scale
            self._rho_vec = rho_vec
            n, m = self.n, self.m
            K = np.zeros((n + m, n + m))
            K[:n, :n] = Ps + self.sigma * np.eye(n)
            K[:n, n:] = Ms.T
            K[n:, :n] = Ms
            K[n:, n:] = -np.diag(1.0 / rho_vec)
            self._kkt = sla.lu_factor(K, check_finite=False)
        return self._kkt

    # -- pieces ------------------------------------------------------------

    def _solve_equalities(self):
        """Optimum subject to dynamics only, with its multipliers."""
        lu = self._ensure_eq_kkt()
        rhs = np.concatenate([-self.q, self.l[:self.neq]])
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        # One refinement step against the unregularized system removes
        # the residual the -1e-12 dual regularization injects.
        for _ in range(2):
            r = rhs - self._apply_eq_kkt(sol)
            sol += sla.lu_solve(lu, r, check_finite=False)
        return sol[:self.n], sol[self.n:]

    def _apply_eq_kkt(self, sol):
        n, k = self.n, self.neq
        x, lam = sol[:n], sol[n:]
        top = self.P @ x + self.M[:k].T @ lam
        bot = self.M[:k] @ x
        return np.concatenate([top, bot])

    def _violation(self, mx):
        v = np.maximum(self.l - mx, mx - self.u)
        return float(np.maximum(v, 0.0).max()) if self.m else 0.0

    def _polish(self, y_u, z_u, tol):
        """Active-set refinement; returns (x, y, rp, rd) or None.

        Actives come from the projected iterate sitting at a bound or a
        clearly signed multiplier.  The refined point must pass primal
        feasibility, stationarity, and multiplier-sign checks before it
        is accepted; a wrong active-set guess just leaves ADMM running.
        """
        l, u, neq = self.l, self.u, self.neq
        near_l = np.isfinite(l) & (z_u - l <= 1e-6 * (1.0 + np.abs(l)))
        near_u = np.isfinite(u) & (u - z_u <= 1e-6 * (1.0 + np.abs(u)))
        act_l = near_l | (y_u < -1e-9)
        act_u = near_u | (y_u > 1e-9)
        act_l[:neq] = True
        act_u[:neq] = False
        act = act_l | act_u
        na = int(act.sum())
        if na == 0 or na > self.n + self.neq:
            return None
        Ma = self.M[act]
        ba = np.where(act_l[act], l[act], u[act])
        n = self.n
        K = np.zeros((n + na, n + na))
        K[:n, :n] = self.P
        K[:n, n:] = Ma.T
        K[n:, :n] = Ma
        K[n:, n:] = -1e-12 * np.eye(na)
        rhs = np.concatenate([-self.q, ba])
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        # Refine against the unregularized KKT (the regularized operator
        # differs only by the -1e-12 block, applied cheaply below).
        for _ in range(2):
            r = rhs - K @ sol
            r[n:] -= 1e-12 * sol[n:]
            sol += sla.lu_solve(lu, r, check_finite=False)
        x = sol[:n]
        y = np.zeros(self.m)
        y[act] = sol[n:]
        mx = self.M @ x
        rp = self._violation(mx)
        rd = float(np.abs(self.P @ x + self.q + self.M.T @ y).max())
        ineq = np.zeros(self.m, bool)
        ineq[neq:] = True
        sign_ok = (np.all(y[ineq & act_l] <= 1e-8)
                   and np.all(y[ineq & act_u] >= -1e-8))
        if max(rp, rd) <= tol and sign_ok:
            return x, y, rp, rd
        return None

    def _infeasibility_certificate(self, dy):
        ndy = float(np.abs(dy).max())
        if ndy <= 1e-14:
            return False
        eps = self.eps_infeas * ndy
        if float(np.abs(self.M.T @ dy).max()) > eps:
            return False
        dyp = np.maximum(dy, 0.0)
        dym = np.minimum(dy, 0.0)
        inf_u = np.isinf(self.u)
        inf_l = np.isinf(self.l)
        if np.any(dyp[inf_u] > eps) or np.any(dym[inf_l] < -eps):
            return False
        support = float(self.u[~inf_u] @ dyp[~inf_u]
                        + self.l[~inf_l] @ dym[~inf_l])
        return support <= -eps

    # -- main solve ---------------------------------------------------------

    def solve(self, tol=1e-6, max_iter=20000):
        """Run the solver; returns (x, y, rp, rd, iterations, status)."""
        # Fast path: if the equality-constrained optimum already sits
        # inside every box and halfspace it is the global optimum.
        x_eq, y_eq = self._solve_equalities()
        mx = self.M @ x_eq
        viol = self._violation(mx)
        if viol <= min(tol, 1e-9):
            y = np.zeros(self.m)
            y[:self.neq] = y_eq
            rd = float(np.abs(self.P @ x_eq + self.q + self.M.T @ y).max())
            if rd <= tol:
                return x_eq, y, viol, rd, 0, SOLVED
        self._ensure_admm()
        d, e, c, Ms, ls, us = self._scaling
        rho_vec = self._rho_vec
        n, m = self.n, self.m
        qs = c * (d * self.q)

        if self._warm is not None:
            x = self._warm[0] / d
            y = c * self._warm[1] / e
            z = np.clip(Ms @ x, ls, us)
        else:
            x = x_eq / d
            y = np.zeros(m)
            y[:self.neq] = c * y_eq / e[:self.neq]
            z = np.clip(Ms @ x, ls, us)

        rhs = np.empty(n + m)
        y_prev_check = (e * y) / c
        last_polish = -10 ** 9
        best = None
        it = 0
        for it in range(1, max_iter + 1):
            rhs[:n] = self.sigma * x - qs
            rhs[n:] = z - y / rho_vec
            sol = sla.lu_solve(self._kkt, rhs, check_finite=False)
            xt = sol[:n]
            nu = sol[n:]
            zt = z + (nu - y) / rho_vec
            x = self.alpha * xt + (1.0 - self.alpha) * x
            zal = self.alpha * zt + (1.0 - self.alpha) * z
            z = np.clip(zal + y / rho_vec, ls, us)
            y = y + rho_vec * (zal - z)

            if it % self.check_interval:
                continue
            x_u = d * x
            y_u = (e * y) / c
            z_u = z / e
            rp = float(np.abs(self.M @ x_u - z_u).max())
            rd = float(np.abs(self.P @ x_u + self.q + self.M.T @ y_u).max())
            best = (x_u, y_u, rp, rd)
            if max(rp, rd) <= tol:
                refined = self._polish(y_u, z_u, tol)
                if refined is not None:
                    x_u, y_u, rp, rd = refined
                self._warm = (x_u, y_u)
                return x_u, y_u, rp, rd, it, SOLVED
            if max(rp, rd) <= 1e-3 and it - last_polish >= 100:
                last_polish = it
                refined = self._polish(y_u, z_u, tol)
                if refined is not None:
                    x_u, y_u, rp, rd = refined
                    self._warm = (x_u, y_u)
                    return x_u, y_u, rp, rd, it, SOLVED
            if self._infeasibility_certificate(y_u - y_prev_check):
                return x_u, y_u, rp, rd, it, INFEASIBLE
            y_prev_check = y_u

        x_u = d * x
        y_u = (e * y) / c
        z_u = z / e
        refined = self._polish(y_u, z_u, tol)
        if refined is not None:
            x_u, y_u, rp, rd = refined
            self._warm = (x_u, y_u)
            return x_u, y_u, rp, rd, max_iter, SOLVED
        if best is None:
            rp = float(np.abs(self.M @ x_u - z_u).max())
            rd = float(np.abs(self.P @ x_u + self.q + self.M.T @ y_u).max())
            best = (x_u, y_u, rp, rd)
        x_u, y_u, rp, rd = best
        return x_u, y_u, rp, rd, max_iter, MAX_ITER

    def solution(self, tol=1e-6, max_iter=20000):
        """Solve and package the trajectory view of the stacked variable."""
        x, _y, rp, rd, iters, status = self.solve(tol=tol, max_iter=max_iter)
        F, nx, nu = self.problem.horizon, self.problem.nx, self.problem.nu
        states = x[:nx * (F + 1)].reshape(F + 1, nx).copy()
        controls = x[nx * (F + 1):].reshape(F, nu).copy()
        cost = tracking_cost(self.problem, states, controls)
        return MpcSolution(states=states, controls=controls, cost=cost,
                           primal_residual=rp, dual_residual=rd,
                           iterations=iters, status=status)


def solve_qp(problem, tol=1e-6, max_iter=20000):
    """One-shot solve.  Reuse a QpWorkspace for repeated solves."""
    return QpWorkspace(problem).solution(tol=tol, max_iter=max_iter)


def grad_cost_wrt_waypoints(problem, solution):
    """Exact gradient of the optimal cost in the waypoints: 2 Q (w - x*).

    Valid because the constraints never involve the waypoints (the
    halfspaces anchor to the start-goal segment); differentiating the
    optimal value then reduces to differentiating the objective at the
    fixed optimizer.
    """
    if solution.status != SOLVED:
        raise MpcError("gradient needs a solved problem, got status %r"
                       % (solution.status,))
    return (problem.waypoints - solution.states) @ (2.0 * problem.Q)


def fd_grad_cost(problem, h, tol=1e-9, max_iter=100000):
    """Central differences of the optimal cost over every waypoint entry.

    Re-solves the QP per perturbation on a shared workspace (scalings
    and factorizations carry over; only the linear cost term moves).
    """
    if h <= 0:
        raise MpcError("finite-difference step must be positive")
    ws = QpWorkspace(problem)
    base = problem.waypoints.copy()
    grad = np.zeros_like(base)
    try:
        for t in range(base.shape[0]):
            for j in range(base.shape[1]):
                vals = []
                for sgn in (+1.0, -1.0):
                    w = base.copy()
                    w[t, j] += sgn * h
                    ws.set_waypoints(w)
                    sol = ws.solution(tol=tol, max_iter=max_iter)
                    if sol.status != SOLVED:
                        raise MpcError(
                            "perturbed solve failed at waypoint t=%d, "
                            "coordinate %d, direction %+d (status %s)"
                            % (t, j, int(sgn), sol.status))
                    vals.append(sol.cost)
                grad[t, j] = (vals[0] - vals[1]) / (2.0 * h)
    finally:
        ws.set_waypoints(base)
    return grad


def relax_halfspaces(problem):
    """Copy of the problem with every obstacle halfspace removed."""
    return MpcProblem(
        A=problem.A, B=problem.B, Q=problem.Q, R=problem.R,
        horizon=problem.horizon, initial_state=problem.initial_state,
        waypoints=problem.waypoints.copy(), u_min=problem.u_min,
        u_max=problem.u_max, x_min=problem.x_min, x_max=problem.x_max,
        halfspaces=[[] for _ in range(problem.horizon + 1)])


def solve_with_fallback(problem, tol=1e-6, max_iter=20000,
                        penalty=FALLBACK_PENALTY):
    """Solve, dropping the halfspaces on infeasibility.

    Over-constrained halfspace sets (obstacles pinching the corridor)
    make the QP infeasible; the fallback re-solves the box-only
    problem and reports the cost inflated by ``penalty`` so downstream
    consumers still see a strong signal.  Returns
    (cost, solution, used_fallback).
    """
    sol = solve_qp(problem, tol=tol, max_iter=max_iter)
    if sol.status == SOLVED:
        return sol.cost, sol, False
    sol = solve_qp(relax_halfspaces(problem), tol=tol, max_iter=max_iter)
    if sol.status != SOLVED:
        raise MpcError("fallback solve failed with status %r"
                       % (sol.status,))
    return sol.cost + penalty, sol, True
