"""Backward-difference time stepping on moving meshes.

Coefficient vectors of earlier time levels are reinterpreted on the current
mesh configuration without modification (pull-back semantics), so the
discrete time derivative is a plain linear combination of coefficient
arrays. One IMEX step is a single symmetric condensed solve; the fully
implicit step wraps a fixed-point (Picard) iteration around the upwind
convection operator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import forms, linsys
from .errors import InstabilityError, NonconvergenceError
from .mesh import mesh_quality

__all__ = [
    "BDF_COEFFS",
    "SBDF_COEFFS",
    "bdf_apply",
    "sbdf_extrapolate",
    "History",
    "SchemeConfig",
    "step_imex",
    "step_fully_implicit",
    "StepLog",
]

# leading coefficient and history coefficients of D_t^s:
# D_t^s u^m = (g0 * u^m - sum_j g[j] * u^{m-1-j}) / dt
BDF_COEFFS = {
    1: (1.0, (1.0,)),
    2: (1.5, (2.0, -0.5)),
    3: (11.0 / 6.0, (3.0, -1.5, 1.0 / 3.0)),
}

# extrapolation weights for u^{m-1}, u^{m-2}, ...
SBDF_COEFFS = {1: (1.0,), 2: (2.0, -1.0), 3: (3.0, -3.0, 1.0)}


def bdf_apply(states, s, dt):
    """Evaluate ``D_t^s`` on ``states = [u^m, u^{m-1}, ...]``.

    Returns the coefficient tuple and the evaluated difference quotient.
    """
    if s not in BDF_COEFFS:
        raise ValueError("order must be 1, 2 or 3")
    g0, g = BDF_COEFFS[s]
    if len(states) < s + 1:
        raise ValueError(f"BDF{s} needs {s + 1} states, got {len(states)}")
    out = g0 * np.asarray(states[0])
    for c, u in zip(g, states[1:]):
        out = out - c * np.asarray(u)
    coeffs = (g0,) + tuple(-c for c in g)
    return tuple(c / dt for c in coeffs), out / dt


def sbdf_extrapolate(states, s):
    """Extrapolate to the new time level from ``[u^{m-1}, u^{m-2}, ...]``."""
    if s not in SBDF_COEFFS:
        raise ValueError("order must be 1, 2 or 3")
    w = SBDF_COEFFS[s]
    if len(states) < s:
        raise ValueError(f"extrapolation of order {s} needs {s} states")
    out = w[0] * np.asarray(states[0])
    for c, u in zip(w[1:], states[1:]):
        out = out + c * np.asarray(u)
    return out


class History:
    """Ring buffer of velocity coefficient arrays at previous time levels."""

    def __init__(self, capacity=3):
        self.capacity = capacity
        self._states = []
        self.time = 0.0

    def push(self, u_coeffs, t):
        self._states.insert(0, np.asarray(u_coeffs))
        del self._states[self.capacity:]
        self.time = t

    def recent(self, n):
        """Most recent ``n`` states, newest first (may return fewer)."""
        return self._states[:n]

    def __len__(self):
        return len(self._states)


@dataclass
class SchemeConfig:
    """Parameters of one time-stepping scheme instance."""

    dt: float
    order: int = 2
    mode: str = "imex"
    rho: float | np.ndarray = 1.0
    mu: float | np.ndarray = 1.0
    alpha: float = 4.0
    body_force: object = None        # callable f(x, t) or constant (2,)
    gauge: str = "none"
    picard_tol: float = 1e-10
    picard_max: int = 50
    blowup_factor: float = 10.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")
        if self.picard_tol <= 0:
            raise ValueError("tolerance must be positive")


def _base_blocks(space, geom, config, order):
    g0, _ = BDF_COEFFS[order]
    blocks = forms.assemble_mass(space, geom,
                                 np.asarray(config.rho) * g0 / config.dt)
    forms.assemble_viscous(space, geom, config.mu, config.alpha, out=blocks)
    forms.assemble_divergence(space, geom, out=blocks)
    return blocks


def _history_rhs(space, geom, config, history, order):
    _, g = BDF_COEFFS[order]
    acc = None
    for c, u in zip(g, history.recent(order)):
        acc = c * u if acc is None else acc + c * u
    return forms.mass_apply(space, geom, np.asarray(config.rho) / config.dt,
                            acc)


def _finalize(space, geom, config, blocks, t, bc_uhat=None, bc_sigma=None,
              extra_load=None):
    if config.body_force is not None:
        blocks.bl += forms.assemble_body_force(
            space, geom, config.body_force, config.rho,
            t=t if callable(config.body_force) else None)
    if extra_load is not None:
        blocks.bl += extra_load
    return linsys.condense(space, geom, blocks, bc_uhat=bc_uhat,
                           bc_sigma=bc_sigma, gauge=config.gauge)


def _diagnostics(space, geom, config, state, picard_iters=0):
    unorm = forms.l2_norm_velocity(space, geom, state.u)
    divs = forms.divergence_norms(space, geom, state.u)
    return {
        "energy": forms.kinetic_energy(space, geom, config.rho, state.u),
        "u_norm": unorm,
        "max_div": float(divs.max()),
        "picard_iters": picard_iters,
        "min_angle": mesh_quality(geom.mesh)["min_angle_deg"],
    }


def step_imex(space, geom, history, omega_nodal, config, t, order=None,
              extra_load=None, bc_uhat=None, bc_sigma=None,
              solver_cache=None):
    """One semi-implicit step: convection extrapolated, one linear solve.

    ``geom`` must belong to the mesh already moved to time ``t``;
    ``omega_nodal`` is the nodal mesh velocity at ``t``. The new state is
    appended to the history. Returns ``(state, diagnostics)``.
    """
    order = config.order if order is None else order
    if len(history) < order:
        raise ValueError(f"IMEX order {order} needs {order} previous states")
    blocks = _base_blocks(space, geom, config, order)
    blocks.bl[:, : 2 * space.layout.nk] += _history_rhs(
        space, geom, config, history, order
    ).reshape(space.layout.n_elems, -1)
    u_tilde = sbdf_extrapolate(history.recent(order), order)
    blocks.bl -= forms.assemble_convection_explicit(
        space, geom, u_tilde, omega_nodal, config.rho
    )
    system = _finalize(space, geom, config, blocks, t, bc_uhat, bc_sigma,
                       extra_load)
    state = linsys.solve_condensed(system, cache=solver_cache)
    diag = _diagnostics(space, geom, config, state)
    prev_norm = forms.l2_norm_velocity(space, geom, history.recent(1)[0])
    if prev_norm > 0 and diag["u_norm"] > config.blowup_factor * max(prev_norm, 1e-12):
        raise InstabilityError(t, diag["u_norm"] / prev_norm)
    history.push(state.u, t)
    return state, diag


def step_fully_implicit(space, geom, history, omega_nodal, config, t,
                        order=None, extra_load=None, bc_uhat=None,
                        bc_sigma=None, initial_guess=None,
                        solver_cache=None):
    """One fully implicit step via Picard iteration on the convection field.

    The transport field is frozen at the previous iterate; iteration stops
    when the relative skeleton update drops below the configured tolerance.
    """
    order = config.order if order is None else order
    if len(history) < order:
        raise ValueError(f"BDF order {order} needs {order} previous states")
    base = _base_blocks(space, geom, config, order)
    hist_rhs = _history_rhs(space, geom, config, history, order)
    u_iter = (initial_guess if initial_guess is not None
              else history.recent(1)[0]).copy()

    state = None
    prev_skel = None
    last_update = np.inf
    for it in range(1, config.picard_max + 1):
        blocks = forms.ElementBlocks(space)
        blocks.add(base)
        forms.assemble_convection_implicit(
            space, geom, u_iter, omega_nodal, config.rho, out=blocks
        )
        blocks.bl[:, : 2 * space.layout.nk] += hist_rhs.reshape(
            space.layout.n_elems, -1
        )
        system = _finalize(space, geom, config, blocks, t, bc_uhat, bc_sigma,
                           extra_load)
        state = linsys.solve_condensed(system, cache=solver_cache)
        skel = state.skeleton
        converged = False
        if prev_skel is not None:
            denom = max(np.linalg.norm(skel), 1e-300)
            last_update = np.linalg.norm(skel - prev_skel) / denom
            converged = last_update <= config.picard_tol
        elif np.linalg.norm(skel) == 0.0:
            converged = True  # zero data, already exact
        if converged:
            diag = _diagnostics(space, geom, config, state, picard_iters=it)
            history.push(state.u, t)
            return state, diag
        prev_skel = skel
        u_iter = state.u
    raise NonconvergenceError(config.picard_max, last_update)


class StepLog:
    """Per-step CSV log: time, energy, divergence residual, iterations,
    mesh angle."""

    columns = ("time", "energy", "max_div", "picard_iters", "min_angle")

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.columns)

    def record(self, t, diag):
        self._writer.writerow(
            [f"{t:.10g}", f"{diag['energy']:.12g}", f"{diag['max_div']:.6g}",
             diag["picard_iters"], f"{diag['min_angle']:.6g}"]
        )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
