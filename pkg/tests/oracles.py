"""Independent reference solvers used to validate the numerical code.

The QP oracle enumerates active sets: for every assignment of each constraint
row to {inactive, active-at-lower, active-at-upper} it solves the equality-
constrained KKT system and keeps the best candidate that is primal feasible
and has correctly signed multipliers. Exponential, but exact for the small
instances used in tests.
"""

import itertools

import numpy as np


def active_set_solve(P, q, A, l, u, feas_tol=1e-8, dual_tol=1e-8):
    """Globally optimal (x, y) for min 1/2 x'Px + q'x s.t. l <= Ax <= u.

    P must be positive definite on the nullspace of each candidate active set
    (guaranteed when P is strictly positive definite). Returns (x, y, obj);
    raises RuntimeError when no candidate is feasible.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    l = np.asarray(l, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    n = P.shape[0]
    p = A.shape[0]

    options = []
    for i in range(p):
        if u[i] - l[i] < 1e-12:          # equality row: always active
            options.append(("eq",))
        else:
            opts = ["off"]
            if np.isfinite(l[i]):
                opts.append("lo")
            if np.isfinite(u[i]):
                opts.append("hi")
            options.append(tuple(opts))

    best = None
    for combo in itertools.product(*options):
        active = [i for i, c in enumerate(combo) if c != "off"]
        k = len(active)
        KKT = np.zeros((n + k, n + k))
        KKT[:n, :n] = P
        rhs = np.concatenate([-q, np.zeros(k)])
        for j, i in enumerate(active):
            KKT[:n, n + j] = A[i]
            KKT[n + j, :n] = A[i]
            rhs[n + j] = l[i] if combo[i] in ("lo", "eq") else u[i]
        try:
            sol = np.linalg.solve(KKT, rhs)
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        nu = sol[n:]
        # stationarity can be spoiled by near-singular KKT systems
        y = np.zeros(p)
        for j, i in enumerate(active):
            y[i] = nu[j]
        if np.linalg.norm(P @ x + q + A.T @ y, np.inf) > 1e-6:
            continue
        Ax = A @ x
        if np.any(Ax < l - feas_tol) or np.any(Ax > u + feas_tol):
            continue
        ok = True
        for j, i in enumerate(active):
            if combo[i] == "lo" and nu[j] > dual_tol:
                ok = False
            if combo[i] == "hi" and nu[j] < -dual_tol:
                ok = False
        if not ok:
            continue
        obj = 0.5 * x @ (P @ x) + q @ x
        if best is None or obj < best[2] - 1e-12:
            best = (x, y, obj)
    if best is None:
        raise RuntimeError("active-set enumeration found no feasible candidate")
    return best


def random_strictly_convex_qp(rng, max_vars=12, max_cons=7):
    """Random feasible QP with mostly one-sided rows (keeps enumeration small)."""
    n = int(rng.integers(2, max_vars + 1))
    p = int(rng.integers(1, max_cons + 1))
    R = rng.standard_normal((n, n))
    P = R @ R.T + n * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((p, n))
    x_feas = rng.standard_normal(n)
    slack = rng.uniform(0.1, 1.0, p)
    Ax = A @ x_feas
    l = np.full(p, -np.inf)
    u = np.full(p, np.inf)
    for i in range(p):
        kind = rng.random()
        if kind < 0.4:
            u[i] = Ax[i] + slack[i]
        elif kind < 0.8:
            l[i] = Ax[i] - slack[i]
        elif kind < 0.9:
            l[i] = Ax[i] - slack[i]
            u[i] = Ax[i] + slack[i]
        else:
            l[i] = u[i] = Ax[i]               # equality row
    return P, q, A, l, u
