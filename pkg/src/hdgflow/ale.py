"""Discrete ALE maps: prescribed motion, harmonic extension, mesh velocity.

The map is stored nodally (piecewise-linear geometry; meshes stay
straight-sided regardless of the field degree). Mesh velocity comes either
from an analytic formula (accuracy test) or from backward differences of the
node positions.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .mesh import move_nodes

__all__ = [
    "PrescribedMap",
    "harmonic_extension",
    "stiffening_coefficient",
    "mesh_velocity_bdf2",
    "mesh_velocity_bdf1",
    "velocity_at_nodes",
    "free_surface_displacement",
]

_P1_GRAD_REF = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class PrescribedMap:
    """Analytic ALE map ``x(x0, t) = x0 + d(x0, t)`` with velocity ``w(x0, t)``.

    ``d`` and ``w`` act on reference-node arrays ``(V, 2)``; the nodal
    velocity is exact, and interior points inherit the barycentric
    interpolation of the straight-sided elements.
    """

    def __init__(self, displacement, velocity):
        self.displacement = displacement
        self.velocity = velocity

    def apply(self, reference_mesh, t):
        """Mesh configuration at time ``t`` (moved from the reference)."""
        d = self.displacement(reference_mesh.nodes, t)
        return move_nodes(reference_mesh, d)

    def velocity_nodes(self, reference_mesh, t):
        """Nodal domain velocity at time ``t`` (values at the mapped nodes)."""
        return self.velocity(reference_mesh.nodes, t)


def _p1_stiffness(mesh, coeff=None):
    """P1 stiffness matrix with a per-element diffusion coefficient."""
    tri = mesh.triangles
    p = mesh.nodes
    d1 = p[tri[:, 1]] - p[tri[:, 0]]
    d2 = p[tri[:, 2]] - p[tri[:, 0]]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    inv = np.empty((len(tri), 2, 2))
    inv[:, 0, 0] = d2[:, 1]
    inv[:, 0, 1] = -d2[:, 0]
    inv[:, 1, 0] = -d1[:, 1]
    inv[:, 1, 1] = d1[:, 0]
    inv /= det[:, None, None]
    grads = np.einsum("eba,cb->eca", inv, _P1_GRAD_REF)  # (E, 3, 2) physical
    area = 0.5 * det
    if coeff is None:
        coeff = np.ones(len(tri))
    Ke = np.einsum("e,e,eca,eda->ecd", coeff, area, grads, grads)
    rows = np.repeat(tri, 3, axis=1).reshape(len(tri), 3, 3)
    cols = rows.transpose(0, 2, 1)
    K = sp.coo_matrix(
        (Ke.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.n_nodes, mesh.n_nodes),
    ).tocsr()
    return K


def harmonic_extension(mesh, essential_x, essential_y, coeff=None):
    """Componentwise diffusion extension of boundary displacement data.

    ``essential_x``/``essential_y`` are ``(node_indices, values)`` pairs per
    displacement component; remaining nodes get the natural (zero-flux)
    condition. ``coeff`` is an optional per-element stiffening coefficient.
    Returns the nodal displacement ``(V, 2)``.
    """
    K = _p1_stiffness(mesh, coeff)
    V = mesh.n_nodes
    disp = np.zeros((V, 2))
    for comp, (idx, vals) in enumerate((essential_x, essential_y)):
        idx = np.asarray(idx, dtype=np.int64)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), idx.shape)
        fixed = np.zeros(V, dtype=bool)
        fixed[idx] = True
        free = ~fixed
        g = np.zeros(V)
        g[idx] = vals
        rhs = -K[free][:, fixed] @ g[fixed]
        if free.any():
            try:
                sol = spla.spsolve(K[free][:, free].tocsc(), rhs)
            except RuntimeError as exc:
                raise SolverError(f"extension solve failed: {exc}") from exc
            g[free] = sol
        disp[:, comp] = g
    return disp


def stiffening_coefficient(mesh, interface_nodes, h_gamma, strength=10.0,
                           decay_lengths=2.0):
    """Per-element diffusion coefficient: ``strength`` at the interface,
    decaying exponentially to 1 with length scale ``decay_lengths * h_gamma``.

    Distance is measured from element centroids to the nearest interface
    node.
    """
    cent = mesh.nodes[mesh.triangles].mean(axis=1)
    ip = mesh.nodes[np.asarray(interface_nodes, dtype=np.int64)]
    d = np.min(np.linalg.norm(cent[:, None, :] - ip[None, :, :], axis=2),
               axis=1)
    ell = decay_lengths * h_gamma
    return 1.0 + (strength - 1.0) * np.exp(-d / ell)


def mesh_velocity_bdf2(x_m, x_m1, x_m2, dt):
    """Second-order backward difference of three node configurations."""
    for other in (x_m1, x_m2):
        if np.shape(other) != np.shape(x_m):
            raise ValueError("configurations must share topology")
    return (1.5 * x_m - 2.0 * x_m1 + 0.5 * x_m2) / dt


def mesh_velocity_bdf1(x_m, x_m1, dt):
    if np.shape(x_m1) != np.shape(x_m):
        raise ValueError("configurations must share topology")
    return (x_m - x_m1) / dt


def _node_incidence(mesh):
    """node -> list of (element, local vertex); cached on the mesh object."""
    cache = getattr(mesh, "_node_incidence", None)
    if cache is not None:
        return cache
    inc = [[] for _ in range(mesh.n_nodes)]
    for e, tri in enumerate(mesh.triangles):
        for lv in range(3):
            inc[int(tri[lv])].append((e, lv))
    mesh._node_incidence = inc
    return inc


def velocity_at_nodes(space, u_coeffs, nodes):
    """Discrete velocity evaluated at mesh nodes (element traces averaged)."""
    mesh = space.mesh
    inc = _node_incidence(mesh)
    vert_ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    table = space.basis_v.eval(vert_ref)  # (3, nk)
    out = np.zeros((len(nodes), 2))
    for j, nd in enumerate(np.asarray(nodes, dtype=np.int64)):
        pairs = inc[int(nd)]
        acc = np.zeros(2)
        for e, lv in pairs:
            acc += u_coeffs[e] @ table[lv]
        out[j] = acc / max(len(pairs), 1)
    return out


def free_surface_displacement(space, history, surface_nodes, dt):
    """Semi-implicit free-surface update: ``dt`` times the extrapolated
    fluid velocity at the surface nodes (the surface moves with the fluid).
    """
    states = history.recent(2)
    if len(states) >= 2:
        u_star = 1.5 * states[0] - 0.5 * states[1]
    else:
        u_star = states[0]
    return dt * velocity_at_nodes(space, u_star, surface_nodes)
