"""Dense convex QP solver and condensed MPC matrix builders.

The solver is a Mehrotra-style predictor-corrector primal-dual interior
point method on the dense KKT system; problems here stay below a few
hundred variables, so dense factorizations are the right tool.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass
class DenseQP:
    """min 0.5 u'Hu + g'u  s.t.  lb <= A_ineq u <= ub,  A_eq u = b_eq."""

    H: np.ndarray
    g: np.ndarray
    A_ineq: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        if self.A_ineq is None:
            self.A_ineq = np.zeros((0, n))
            self.lb = np.zeros(0)
            self.ub = np.zeros(0)
        else:
            self.A_ineq = np.atleast_2d(np.asarray(self.A_ineq, dtype=float))
            m = self.A_ineq.shape[0]
            self.lb = np.full(m, -np.inf) if self.lb is None \
                else np.asarray(self.lb, dtype=float).ravel()
            self.ub = np.full(m, np.inf) if self.ub is None \
                else np.asarray(self.ub, dtype=float).ravel()
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()

    @property
    def n(self):
        return self.g.size


@dataclass
class QpSolution:
    u_star: np.ndarray
    lam_lb: np.ndarray        # duals of the lower inequality bounds, >= 0
    lam_ub: np.ndarray        # duals of the upper inequality bounds, >= 0
    nu: np.ndarray            # equality duals
    status: str               # optimal | infeasible | max_iter
    kkt_residual: float
    obj: float = np.nan
    iterations: int = 0


def psd_repair(H, tol=1e-10):
    """Symmetrize H; shift tiny negative curvature, reject real indefiniteness."""
    H = 0.5 * (H + H.T)
    try:
        scipy.linalg.cholesky(H + tol * np.eye(H.shape[0]), lower=True)
        return H + tol * np.eye(H.shape[0])
    except scipy.linalg.LinAlgError:
        pass
    w = scipy.linalg.eigvalsh(H)
    scale = max(1.0, float(np.abs(H).max()))
    if w[0] < -tol * scale:
        raise ValueError(f"H is indefinite (min eigenvalue {w[0]:.3e})")
    return H + (tol * scale - min(w[0], 0.0)) * np.eye(H.shape[0])


def _kkt_residuals(qp, u, lam_lb, lam_ub, nu):
    """Stationarity, complementarity and primal violation on the original form."""
    stat = qp.H @ u + qp.g
    if qp.A_ineq.shape[0]:
        stat = stat + qp.A_ineq.T @ (lam_ub - lam_lb)
    if qp.A_eq.shape[0]:
        stat = stat + qp.A_eq.T @ nu
    stat_inf = float(np.abs(stat).max()) if stat.size else 0.0
    prim = 0.0
    compl_ = 0.0
    if qp.A_ineq.shape[0]:
        Au = qp.A_ineq @ u
        lo = np.where(np.isfinite(qp.lb), qp.lb - Au, -np.inf)
        hi = np.where(np.isfinite(qp.ub), Au - qp.ub, -np.inf)
        prim = max(prim, float(np.maximum(lo, hi).max(initial=0.0)))
        gap_lo = np.where(np.isfinite(qp.lb), np.abs(Au - qp.lb), 0.0)
        gap_hi = np.where(np.isfinite(qp.ub), np.abs(qp.ub - Au), 0.0)
        compl_ = float(np.maximum(lam_lb * gap_lo, lam_ub * gap_hi).max(initial=0.0))
    if qp.A_eq.shape[0]:
        prim = max(prim, float(np.abs(qp.A_eq @ u - qp.b_eq).max(initial=0.0)))
    return stat_inf, compl_, prim


def solve_qp(qp: DenseQP, warm_start=None, max_iter=100,
             tol_stat=1e-6, tol_comp=1e-6, tol_prim=1e-8) -> QpSolution:
    """Solve a dense convex QP; see DenseQP for the canonical form."""
    n = qp.n
    H = psd_repair(qp.H)
    g = qp.g
    m0 = qp.A_ineq.shape[0]
    bad = qp.lb > qp.ub + 1e-12
    if bad.any():
        return QpSolution(np.full(n, np.nan), np.zeros(m0), np.zeros(m0),
                          np.zeros(qp.A_eq.shape[0]), "infeasible", np.inf)

    # one-sided form C u <= d; remember (row, side) for dual recovery
    rows, ds, tags = [], [], []
    for i in range(m0):
        a = qp.A_ineq[i]
        if np.abs(a).max(initial=0.0) < 1e-14:
            if qp.lb[i] > 1e-12 or qp.ub[i] < -1e-12:
                return QpSolution(np.full(n, np.nan), np.zeros(m0), np.zeros(m0),
                                  np.zeros(qp.A_eq.shape[0]), "infeasible", np.inf)
            continue
        if np.isfinite(qp.ub[i]):
            rows.append(a); ds.append(qp.ub[i]); tags.append((i, +1))
        if np.isfinite(qp.lb[i]):
            rows.append(-a); ds.append(-qp.lb[i]); tags.append((i, -1))
    C = np.array(rows) if rows else np.zeros((0, n))
    d = np.array(ds)
    m = C.shape[0]
    A, b = qp.A_eq, qp.b_eq
    q = A.shape[0]

    def pack(u, z, y):
        lam_lb = np.zeros(m0)
        lam_ub = np.zeros(m0)
        for j, (i, side) in enumerate(tags):
            if side > 0:
                lam_ub[i] = z[j]
            else:
                lam_lb[i] = z[j]
        stat, comp, prim = _kkt_residuals(qp, u, lam_lb, lam_ub, y)
        ok = stat <= tol_stat and comp <= tol_comp and prim <= tol_prim
        obj = 0.5 * u @ qp.H @ u + g @ u
        return lam_lb, lam_ub, y, max(stat, comp, prim), ok, obj

    # equality-constrained (or unconstrained) case: single KKT solve
    if m == 0:
        K = np.block([[H, A.T], [A, -1e-12 * np.eye(q)]]) if q else H
        rhs = np.concatenate([-g, b]) if q else -g
        sol = np.linalg.solve(K, rhs)
        u, y = sol[:n], sol[n:]
        lam_lb, lam_ub, y, res, ok, obj = pack(u, np.zeros(0), y)
        return QpSolution(u, lam_lb, lam_ub, y, "optimal" if ok else "max_iter",
                          res, obj, 1)

    if warm_start is not None:
        u = np.asarray(warm_start, dtype=float).ravel().copy()
        if u.size != n or not np.all(np.isfinite(u)):
            u = np.zeros(n)
    elif q:
        u = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        u = np.zeros(n)
    s = np.maximum(d - C @ u, 1.0)
    z = np.ones(m)
    y = np.zeros(q)
    eye_reg = 1e-11 * np.eye(n)
    status = "max_iter"
    mu_best, stall = np.inf, 0
    for it in range(1, max_iter + 1):
        r_d = H @ u + g + C.T @ z + (A.T @ y if q else 0.0)
        r_p = (A @ u - b) if q else np.zeros(0)
        r_c = C @ u + s - d
        mu = s @ z / m
        if mu < 0.9 * mu_best:
            mu_best, stall = mu, 0
        else:
            stall += 1

        scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(H @ u).max(initial=0.0))
        if (np.abs(r_d).max() <= 1e-9 * scale
                and np.abs(r_c).max(initial=0.0) <= 1e-10 * scale
                and np.abs(r_p).max(initial=0.0) <= 1e-10 * scale
                and mu <= 1e-11 * scale):
            status = "optimal"
            break

        # Farkas-style certificate of primal infeasibility from scaled duals
        theta = np.abs(z).sum() + np.abs(y).sum()
        if theta > 1e8:
            zb, yb = z / theta, y / theta
            ray = C.T @ zb + (A.T @ yb if q else 0.0)
            gap = d @ zb + (b @ yb if q else 0.0)
            if np.abs(ray).max() <= 1e-8 and gap <= -1e-10:
                lam_lb, lam_ub, y, res, _, obj = pack(u, z, y)
                return QpSolution(u, lam_lb, lam_ub, y, "infeasible", res, obj, it)
        if mu < 1e-13 * scale and np.abs(r_c).max(initial=0.0) > 1e-7:
            lam_lb, lam_ub, y, res, _, obj = pack(u, z, y)
            return QpSolution(u, lam_lb, lam_ub, y, "infeasible", res, obj, it)

        W = z / s                                  # diag of Z S^-1
        if not np.isfinite(W).all():               # collapsed barrier pair
            break
        M = H + C.T @ (W[:, None] * C) + eye_reg
        if q:
            K = np.block([[M, A.T], [A, -1e-11 * np.eye(q)]])
        else:
            K = M
        try:
            lu = scipy.linalg.lu_factor(K)
        except (scipy.linalg.LinAlgError, ValueError):
            break

        def solve_dir(r_sz):
            rhs1 = -r_d + C.T @ (r_sz / s - W * r_c)
            rhs = np.concatenate([rhs1, -r_p]) if q else rhs1
            sol = scipy.linalg.lu_solve(lu, rhs)
            dx = sol[:n]
            dy = sol[n:] if q else np.zeros(0)
            ds_ = -r_c - C @ dx
            dz = (-r_sz + z * r_c) / s + W * (C @ dx)
            return dx, dy, dz, ds_

        def max_step(vec, dvec):
            neg = dvec < 0
            return float((-vec[neg] / dvec[neg]).min()) if neg.any() else np.inf

        try:
            # predictor
            dx, dy, dz, ds_ = solve_dir(z * s)
            alpha_aff = min(1.0, max_step(s, ds_), max_step(z, dz))
            mu_aff = (s + alpha_aff * ds_) @ (z + alpha_aff * dz) / m
            sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0
            if stall >= 3:          # break Mehrotra limit cycles by centering
                sigma = max(sigma, 0.5)
                stall = 0

            # corrector; separate primal/dual steps avoid pair stalling
            r_sz = z * s + dz * ds_ - sigma * mu
            dx, dy, dz, ds_ = solve_dir(r_sz)
        except ValueError:          # zero pivot slipped through as inf/NaN
            break
        if not (np.isfinite(dx).all() and np.isfinite(dz).all()
                and np.isfinite(ds_).all()):
            break
        tau = min(0.99995, max(0.995, 1.0 - mu))
        alpha_p = min(1.0, tau * max_step(s, ds_))
        alpha_d = min(1.0, tau * max_step(z, dz))
        u = u + alpha_p * dx
        s = np.maximum(s + alpha_p * ds_, 1e-300)
        y = y + alpha_d * dy
        z = np.maximum(z + alpha_d * dz, 1e-300)

    lam_lb, lam_ub, y, res, ok, obj = pack(u, z, y)
    if status == "optimal" and not ok:
        status = "max_iter"
    if status != "optimal" and ok:
        status = "optimal"
    return QpSolution(u, lam_lb, lam_ub, y, status, res, obj, it)


def dump_qp(qp: DenseQP, path):
    """Plain-text dump (dense array-per-block) for external cross-checking."""
    with open(path, "w") as fh:
        fh.write(f"%%DenseQP n={qp.n} m={qp.A_ineq.shape[0]} q={qp.A_eq.shape[0]}\n")
        for name in ("H", "g", "A_ineq", "lb", "ub", "A_eq", "b_eq"):
            arr = np.atleast_2d(getattr(qp, name))
            fh.write(f"%block {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


@dataclass
class CondensedSystem:
    """Stacked prediction operators: x = A_tilde x0 + B_tilde u (+ E_tilde u_e),
    with constraint stack f = Cf x0 + Df u (+ Ef u_e) and cost stack z alike."""

    N: int
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    Cf: np.ndarray
    Df: np.ndarray
    Cz: np.ndarray
    Dz: np.ndarray
    E_tilde: np.ndarray = None
    Ef: np.ndarray = None
    Ez: np.ndarray = None
    x0: np.ndarray = None
    u_e: np.ndarray = None

    def f_const(self):
        """Input-independent part of the f-stack."""
        c = self.Cf @ self.x0
        if self.Ef is not None and self.u_e is not None and self.u_e.size:
            c = c + self.Ef @ self.u_e
        return c

    def z_const(self):
        c = self.Cz @ self.x0
        if self.Ez is not None and self.u_e is not None and self.u_e.size:
            c = c + self.Ez @ self.u_e
        return c


def stack_dynamics(A_seq, B_seq, E_seq=None):
    """Causal stacking of x(k+1) = A_k x(k) + B_k u(k) (+ E_k w(k)).

    Returns (A_tilde, B_tilde, E_tilde) with rows for k = 0..N.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    N, nx = A_seq.shape[0], (A_seq.shape[1] if A_seq.ndim == 3 else A_seq.shape[0])
    if A_seq.ndim == 2:                       # constant matrices
        A_seq = np.broadcast_to(A_seq, (N, nx, nx)) if N else A_seq.reshape(0, nx, nx)
    nu = B_seq.shape[-1]
    A_tilde = np.zeros(((N + 1) * nx, nx))
    B_tilde = np.zeros(((N + 1) * nx, N * nu))
    A_tilde[:nx] = np.eye(nx)
    E_tilde = None
    if E_seq is not None:
        E_seq = np.asarray(E_seq, dtype=float)
        ne = E_seq.shape[-1]
        E_tilde = np.zeros(((N + 1) * nx, N * ne))
    for k in range(N):
        r, rp = (k + 1) * nx, k * nx
        A_k = A_seq[k]
        A_tilde[r:r + nx] = A_k @ A_tilde[rp:rp + nx]
        B_tilde[r:r + nx] = A_k @ B_tilde[rp:rp + nx]
        B_tilde[r:r + nx, k * nu:(k + 1) * nu] = B_seq[k]
        if E_tilde is not None:
            E_tilde[r:r + nx] = A_k @ E_tilde[rp:rp + nx]
            E_tilde[r:r + nx, k * ne:(k + 1) * ne] = E_seq[k]
    return A_tilde, B_tilde, E_tilde


def condense_lateral(x_y0, ltv, N) -> CondensedSystem:
    """Condense the lateral LTV model; f and z stack [s_y, psi, delta] per step.

    The terminal step has no steering decision; its delta row is zero.
    """
    x_y0 = np.asarray(x_y0, dtype=float).ravel()
    if x_y0.size != 2:
        raise ValueError("lateral state must be [s_y, psi]")
    if ltv.A_seq.shape[0] < N:
        raise ValueError("LTV model shorter than horizon")
    A_tilde, B_tilde, _ = stack_dynamics(ltv.A_seq[:N], ltv.B_seq[:N])
    P_x = np.zeros((3 * (N + 1), 2 * (N + 1)))
    P_u = np.zeros((3 * (N + 1), N))
    for k in range(N + 1):
        P_x[3 * k, 2 * k] = 1.0          # s_y
        P_x[3 * k + 1, 2 * k + 1] = 1.0  # psi
        if k < N:
            P_u[3 * k + 2, k] = 1.0      # delta
    Cf = P_x @ A_tilde
    Df = P_x @ B_tilde + P_u
    return CondensedSystem(N=N, A_tilde=A_tilde, B_tilde=B_tilde,
                           Cf=Cf, Df=Df, Cz=Cf, Dz=Df, x0=x_y0)


def condense_ov(x_o0, u_e, N, params) -> CondensedSystem:
    """Condense the OV model with the exogenous EV-speed channel.

    f stacks [v_o, a_o] per step; z stacks [s_x, v_o, a_o]. Terminal
    acceleration rows are zero (no decision at k = N).
    """
    from .vehicles import ov_model
    x_o0 = np.asarray(x_o0, dtype=float).ravel()
    if x_o0.size != 2:
        raise ValueError("OV state must be [s_x, v_o]")
    u_e = np.asarray(u_e, dtype=float).ravel()
    if u_e.size < N:
        raise ValueError("exogenous speed sequence shorter than horizon")
    u_e = u_e[:N]
    A_o, B_o, E_o = ov_model(params)
    A_tilde, B_tilde, E_tilde = stack_dynamics(
        np.broadcast_to(A_o, (N, 2, 2)), np.broadcast_to(B_o, (N, 2, 1)),
        np.broadcast_to(E_o, (N, 2, 1)))
    Pf_x = np.zeros((2 * (N + 1), 2 * (N + 1)))
    Pf_u = np.zeros((2 * (N + 1), N))
    Pz_x = np.zeros((3 * (N + 1), 2 * (N + 1)))
    Pz_u = np.zeros((3 * (N + 1), N))
    for k in range(N + 1):
        Pf_x[2 * k, 2 * k + 1] = 1.0       # v_o
        Pz_x[3 * k, 2 * k] = 1.0           # s_x
        Pz_x[3 * k + 1, 2 * k + 1] = 1.0   # v_o
        if k < N:
            Pf_u[2 * k + 1, k] = 1.0       # a_o
            Pz_u[3 * k + 2, k] = 1.0
    return CondensedSystem(
        N=N, A_tilde=A_tilde, B_tilde=B_tilde, E_tilde=E_tilde,
        Cf=Pf_x @ A_tilde, Df=Pf_x @ B_tilde + Pf_u, Ef=Pf_x @ E_tilde,
        Cz=Pz_x @ A_tilde, Dz=Pz_x @ B_tilde + Pz_u, Ez=Pz_x @ E_tilde,
        x0=x_o0, u_e=u_e)
