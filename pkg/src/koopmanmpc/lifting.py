"""Observable dictionaries, input-augmented lifting, and the state projection."""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, List, Sequence

import numpy as np


@dataclass(frozen=True)
class Observable:
    name: str
    func: Callable[[np.ndarray], np.ndarray]      # (d, M) -> (M,)
    grad: Callable[[np.ndarray], np.ndarray]      # (d,) -> (d,)


class Dictionary:
    """Ordered list of scalar observables with a projection back to the state.

    The projection matrix `Cx` recovers the physical state from the lifted
    vector. For state-selecting dictionaries (the default) it is exact;
    `fit_projection` replaces it with a least-squares estimate when the state
    is not embedded directly.
    """

    def __init__(self, name: str, state_dim: int, observables: Sequence[Observable],
                 state_slots: Sequence[int] | None = None, require_constant: bool = True):
        self.name = name
        self.state_dim = state_dim
        self.observables = list(observables)
        self.dim = len(self.observables)
        self.analytic_projection = state_slots is not None
        if require_constant:
            if self.dim < state_dim + 1:
                raise ValueError("dictionary must have at least d+1 observables")
            if self.observables[0].name != "1":
                raise ValueError("first observable must be the constant function")
        if state_slots is not None:
            Cx = np.zeros((state_dim, self.dim))
            for i, slot in enumerate(state_slots):
                Cx[i, slot] = 1.0
            self.Cx = Cx
        else:
            self.Cx = np.zeros((state_dim, self.dim))

    def lift(self, x: np.ndarray) -> np.ndarray:
        """Evaluate all observables at a single state."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite state")
        col = x.reshape(-1, 1)
        return np.array([obs.func(col)[0] for obs in self.observables])

    def lift_cols(self, X: np.ndarray) -> np.ndarray:
        """Evaluate the dictionary columnwise on a (d, M) sample matrix."""
        X = np.asarray(X, dtype=float)
        return np.vstack([obs.func(X) for obs in self.observables])

    def lift_with_input(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Input-augmented lifting [phi(x); phi(x) u_1; ...; phi(x) u_m]."""
        z = self.lift(x)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.concatenate([z] + [z * ui for ui in u])

    def lift_with_input_cols(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        Z = self.lift_cols(X)
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.vstack([Z] + [Z * U[i] for i in range(U.shape[0])])

    def project(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.dim:
            raise ValueError(f"expected lifted vector of length {self.dim}")
        return self.Cx @ z

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Stacked analytic gradients, one row per observable."""
        x = np.asarray(x, dtype=float)
        return np.vstack([obs.grad(x) for obs in self.observables])

    def fit_projection(self, X: np.ndarray) -> None:
        """Learn Cx by least squares X ~ Cx Z on (d, M) training states."""
        Z = self.lift_cols(X)
        self.Cx = np.linalg.lstsq(Z.T, X.T, rcond=None)[0].T
        self.analytic_projection = False


def _const(d: int) -> Observable:
    return Observable("1", lambda X: np.ones(X.shape[1]), lambda x: np.zeros(d))


def _coord(i: int, d: int, name: str) -> Observable:
    def grad(x, i=i):
        g = np.zeros(d)
        g[i] = 1.0
        return g
    return Observable(name, lambda X, i=i: X[i].copy(), grad)


def identity_dictionary(state_dim: int) -> Dictionary:
    """z = x; used by DMD."""
    obs = [_coord(i, state_dim, f"x{i}") for i in range(state_dim)]
    return Dictionary("identity", state_dim, obs,
                      state_slots=range(state_dim), require_constant=False)


def _quad27_observables() -> List[Observable]:
    d = 6
    names = ["y", "z", "theta", "ydot", "zdot", "thetadot"]
    obs: List[Observable] = [_const(d)]
    obs += [_coord(i, d, names[i]) for i in range(d)]

    def mono(p, q):
        # theta^p * thetadot^q
        def f(X, p=p, q=q):
            return X[2] ** p * X[5] ** q

        def g(x, p=p, q=q):
            out = np.zeros(d)
            if p > 0:
                out[2] = p * x[2] ** (p - 1) * x[5] ** q
            if q > 0:
                out[5] = x[2] ** p * q * x[5] ** (q - 1)
            return out
        return Observable(f"theta^{p}*thetadot^{q}", f, g)

    def trig_times(p, q, trig):
        # theta^p * thetadot^q * {cos,sin}(theta)
        tf = np.cos if trig == "cos" else np.sin
        tfd = (lambda t: -np.sin(t)) if trig == "cos" else np.cos

        def f(X, p=p, q=q):
            return X[2] ** p * X[5] ** q * tf(X[2])

        def g(x, p=p, q=q):
            out = np.zeros(d)
            mono_val = x[2] ** p * x[5] ** q
            dmono_dth = p * x[2] ** (p - 1) * x[5] ** q if p > 0 else 0.0
            out[2] = dmono_dth * tf(x[2]) + mono_val * tfd(x[2])
            if q > 0:
                out[5] = x[2] ** p * q * x[5] ** (q - 1) * tf(x[2])
            return out
        base = f"theta^{p}*thetadot^{q}*" if (p or q) else ""
        return Observable(f"{base}{trig}(theta)", f, g)

    # monomials of (theta, thetadot) of total degree 2 and 3
    obs += [mono(2, 0), mono(1, 1), mono(0, 2), mono(3, 0), mono(2, 1), mono(1, 2), mono(0, 3)]
    # plain trig
    obs += [trig_times(0, 0, "cos"), trig_times(0, 0, "sin")]
    # {thetadot, thetadot^2, thetadot^3, theta, theta^2} x {cos, sin}
    for p, q in [(0, 1), (0, 2), (0, 3), (1, 0), (2, 0)]:
        obs += [trig_times(p, q, "cos"), trig_times(p, q, "sin")]
    # sin(theta) cos(theta)
    obs.append(Observable(
        "sin(theta)*cos(theta)",
        lambda X: np.sin(X[2]) * np.cos(X[2]),
        lambda x: np.array([0, 0, np.cos(2 * x[2]), 0, 0, 0], dtype=float),
    ))
    return obs


def quad27_dictionary() -> Dictionary:
    """Default planar-quadrotor dictionary: 27 observables, state in slots 1-6."""
    obs = _quad27_observables()
    assert len(obs) == 27
    return Dictionary("quad27", 6, obs, state_slots=range(1, 7))


def monomial_dictionary(state_dim: int, degree: int) -> Dictionary:
    """All monomials of the state up to the given total degree."""
    obs: List[Observable] = [_const(state_dim)]
    state_slots = []
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(state_dim), deg):
            powers = np.bincount(combo, minlength=state_dim)
            if deg == 1:
                state_slots.append(len(obs))

            def f(X, powers=powers):
                out = np.ones(X.shape[1])
                for i, p in enumerate(powers):
                    if p:
                        out = out * X[i] ** p
                return out

            def g(x, powers=powers):
                out = np.zeros(state_dim)
                for i, p in enumerate(powers):
                    if p:
                        val = p * x[i] ** (p - 1)
                        for j, pj in enumerate(powers):
                            if j != i and pj:
                                val *= x[j] ** pj
                        out[i] = val
                return out
            name = "*".join(f"x{i}^{p}" for i, p in enumerate(powers) if p)
            obs.append(Observable(name, f, g))
    return Dictionary(f"monomials({degree})", state_dim, obs, state_slots=state_slots)


def make_dictionary(name: str, state_dim: int = 6) -> Dictionary:
    """Construct a dictionary from its configuration name."""
    if name == "quad27":
        if state_dim != 6:
            raise ValueError("quad27 requires a 6-dimensional state")
        return quad27_dictionary()
    if name == "identity":
        return identity_dictionary(state_dim)
    match = re.fullmatch(r"monomials\((\d+)\)", name)
    if match:
        return monomial_dictionary(state_dim, int(match.group(1)))
    raise ValueError(f"unknown dictionary: {name!r}")
