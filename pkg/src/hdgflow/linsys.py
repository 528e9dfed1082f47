"""Static condensation onto the facet unknowns and the global sparse solve.

The element-local (velocity, pressure) block is eliminated per element; the
remaining globally coupled system lives on the mesh skeleton (facet
tangential velocity and normal-normal stress). A dense full-system path over
all unknowns is kept as a testing oracle.

Pressure gauge: enclosed-flow problems leave the pressure level undetermined
(the kernel pairs a constant pressure with a constant facet stress). Modes:

* ``"mean_zero"``: one scalar multiplier appended to the skeleton system
  enforcing a zero pressure integral,
* ``"pinned"``: the first active facet-stress dof fixed to zero,
* ``"none"``: nothing (a traction-free boundary already fixes the level).
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .forms import FlowState

__all__ = ["CondensedSystem", "condense", "solve_condensed", "full_solve",
           "SkeletonFactorCache", "export_matrix_market"]

_FAST_OPTS = {"SymmetricMode": True, "DiagPivotThresh": 0.0}


def _factor(A):
    """Sparse LU tuned for the symmetric-pattern skeleton matrices."""
    try:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", options=_FAST_OPTS)
    except RuntimeError:
        return spla.splu(A)


class SkeletonFactorCache:
    """Reuses one LU factorization across slowly varying skeleton systems.

    On a moving mesh the skeleton matrix changes by a tiny amount per step,
    so a frozen factorization works as a contraction mapping: solve, then
    refine with the *current* matrix until the true residual meets ``tol``.
    Refactors automatically when refinement stalls.
    """

    def __init__(self, tol=1e-12, max_refine=30):
        self.tol = tol
        self.max_refine = max_refine
        self.lu = None
        self.shape = None
        self.refactor_count = 0

    def _refine(self, A, b, bnorm):
        x = self.lu.solve(b)
        r = b - A @ x
        rn = np.linalg.norm(r)
        for _ in range(self.max_refine):
            if rn <= self.tol * bnorm:
                return x, rn
            x += self.lu.solve(r)
            r = b - A @ x
            rn_new = np.linalg.norm(r)
            if rn_new > 0.5 * rn:
                break
            rn = rn_new
        return (x, rn) if rn <= self.tol * bnorm else (None, rn)

    def solve(self, A, b):
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b), 0.0
        if self.lu is not None and self.shape == A.shape:
            x, rn = self._refine(A, b, bnorm)
            if x is not None:
                return x, rn / bnorm
        self.lu = _factor(A)
        self.shape = A.shape
        self.refactor_count += 1
        x, rn = self._refine(A, b, bnorm)
        if x is None:
            raise SolverError(
                f"skeleton refinement stalled at residual {rn / bnorm:.3e}"
            )
        return x, rn / bnorm


def _known_group_values(space, bc_uhat, bc_sigma):
    lay = space.layout
    nfk = lay.nfk
    F = lay.n_facets
    if bc_uhat is None:
        bc_uhat = np.zeros((F, nfk))
    if bc_sigma is None:
        bc_sigma = np.zeros((F, nfk))
    vals = np.zeros((lay.n_elems, lay.n_group))
    mesh = space.mesh
    for l in range(3):
        fidx = mesh.elem_facets[:, l]
        uh = np.where(lay.uhat_fixed[fidx][:, None], bc_uhat[fidx], 0.0)
        sg = np.where(lay.sigma_fixed[fidx][:, None], bc_sigma[fidx], 0.0)
        vals[:, 2 * l * nfk:(2 * l + 1) * nfk] = uh
        vals[:, (2 * l + 1) * nfk:(2 * l + 2) * nfk] = sg
    return vals, bc_uhat, bc_sigma


def _pressure_integral_vectors(space, geom):
    """Per-element local vectors whose pressure slots hold int_T q dx."""
    lay = space.layout
    e = np.zeros((lay.n_elems, lay.n_local))
    ref = np.einsum("q,qj->j", space.vol_w, space.vol_q)
    e[:, 2 * lay.nk:2 * lay.nk + lay.nq] = geom.det[:, None] * ref[None, :]
    return e


class CondensedSystem:
    """Factorized element blocks plus the assembled skeleton system."""

    def __init__(self, space, geom, blocks, inv_lg, inv_b, inv_e, S, rhs,
                 known_vals, gauge, pin_dof):
        self.space = space
        self.geom = geom
        self.blocks = blocks
        self.inv_lg = inv_lg
        self.inv_b = inv_b
        self.inv_e = inv_e
        self.matrix = S
        self.rhs = rhs
        self.known_vals = known_vals
        self.gauge = gauge
        self.pin_dof = pin_dof
        self.residual = None

    @property
    def n_unknowns(self):
        return self.matrix.shape[0]

    def symmetry_defect(self):
        d = self.matrix - self.matrix.T
        denom = max(abs(self.matrix).max(), 1e-300)
        return abs(d).max() / denom


def condense(space, geom, blocks, bc_uhat=None, bc_sigma=None, gauge="none"):
    """Eliminate element-local dofs; returns a :class:`CondensedSystem`."""
    lay = space.layout
    if gauge not in ("none", "mean_zero", "pinned"):
        raise ValueError(f"unknown gauge mode {gauge!r}")
    if gauge == "none" and not np.any(lay.sigma_fixed):
        warnings.warn(
            "no traction-free facet and no pressure gauge: singular system",
            stacklevel=2,
        )

    trivial_bc = bc_uhat is None and bc_sigma is None
    known, bc_uhat, bc_sigma = _known_group_values(space, bc_uhat, bc_sigma)
    if trivial_bc:
        bl, bg = blocks.bl, blocks.bg
    else:
        bl = blocks.bl - np.einsum("elg,eg->el", blocks.lg, known)
        bg = blocks.bg - np.einsum("egh,eh->eg", blocks.gg, known)

    use_mz = gauge == "mean_zero"
    e_vec = _pressure_integral_vectors(space, geom) if use_mz else None
    stacked = np.concatenate(
        [blocks.lg, bl[:, :, None]] + ([e_vec[:, :, None]] if use_mz else []),
        axis=2,
    )
    try:
        sol = np.linalg.solve(blocks.ll, stacked)
    except np.linalg.LinAlgError:
        for e in range(lay.n_elems):
            sv = np.linalg.svd(blocks.ll[e], compute_uv=False)
            if sv[-1] < 1e-14 * max(sv[0], 1.0):
                raise SolverError(
                    f"singular local block on element {e}: "
                    f"smallest pivot {sv[-1]:.3e}"
                ) from None
        raise
    inv_lg = sol[:, :, :lay.n_group]
    inv_b = sol[:, :, lay.n_group]
    inv_e = sol[:, :, lay.n_group + 1] if use_mz else None

    S_e = blocks.gg - np.matmul(blocks.gl, inv_lg)
    g_e = bg - np.einsum("egl,el->eg", blocks.gl, inv_b)

    gd = lay.elem_gdofs
    n = lay.n_skeleton + (1 if use_mz else 0)
    # the scatter pattern is topology-static: cache it on the space
    cache = getattr(space, "_scatter_cache", None)
    if cache is None:
        rows = np.broadcast_to(gd[:, :, None], S_e.shape)
        cols = np.broadcast_to(gd[:, None, :], S_e.shape)
        keep = (rows >= 0) & (cols >= 0)
        cache = space._scatter_cache = (keep, rows[keep], cols[keep])
    keep, rk, ck = cache
    S = sp.coo_matrix((S_e[keep], (rk, ck)), shape=(n, n))

    rhs = np.zeros(n)
    kr = gd >= 0
    np.add.at(rhs, gd[kr], g_e[kr])

    if use_mz:
        col_e = -np.einsum("egl,el->eg", blocks.gl, inv_e)
        r = gd[kr]
        extra_rows = np.concatenate([r, np.full(len(r), n - 1)])
        extra_cols = np.concatenate([np.full(len(r), n - 1), r])
        extra_vals = np.concatenate([col_e[kr], col_e[kr]])
        beta = -float(np.einsum("el,el->", e_vec, inv_e))
        S = sp.coo_matrix(
            (
                np.concatenate([S.data, extra_vals, [beta]]),
                (
                    np.concatenate([S.row, extra_rows, [n - 1]]),
                    np.concatenate([S.col, extra_cols, [n - 1]]),
                ),
            ),
            shape=(n, n),
        )
        rhs[n - 1] = -float(np.einsum("el,el->", e_vec, inv_b))

    S = S.tocsr()
    S.sum_duplicates()

    pin_dof = None
    if gauge == "pinned":
        active = np.flatnonzero(lay.sigma_gdof[:, 0] >= 0)
        if len(active) == 0:
            raise SolverError("no active facet-stress dof to pin")
        pin_dof = int(lay.sigma_gdof[active[0], 0])
        S = S.tolil()
        S[pin_dof, :] = 0.0
        S[:, pin_dof] = 0.0
        S[pin_dof, pin_dof] = 1.0
        S = S.tocsr()
        rhs[pin_dof] = 0.0

    sys = CondensedSystem(space, geom, blocks, inv_lg, inv_b, inv_e,
                          S.tocsc(), rhs, known, gauge, pin_dof)
    sys.bc_uhat = bc_uhat
    sys.bc_sigma = bc_sigma
    return sys


def solve_condensed(system, cache=None):
    """Factorize and solve the skeleton system, then back-substitute.

    ``cache`` may hold a :class:`SkeletonFactorCache` to reuse
    factorizations across nearby systems. Returns a
    :class:`~hdgflow.forms.FlowState`; the relative skeleton residual is
    stored on ``system.residual``.
    """
    space = system.space
    lay = space.layout
    n = system.matrix.shape[0]
    if n > 0:
        A = system.matrix
        b = system.rhs
        denom = max(np.linalg.norm(b), 1e-300)
        if cache is not None:
            x, system.residual = cache.solve(A, b)
        else:
            try:
                lu = _factor(A)
            except RuntimeError as exc:
                raise SolverError(
                    f"skeleton factorization failed: {exc}") from exc
            x = lu.solve(b)
            x += lu.solve(b - A @ x)
            system.residual = float(np.linalg.norm(A @ x - b) / denom)
            if not np.isfinite(system.residual) or system.residual > 1e-10:
                lu = spla.splu(A)
                x = lu.solve(b)
                system.residual = float(np.linalg.norm(A @ x - b) / denom)
    else:
        x = np.zeros(0)
        system.residual = 0.0

    nfk = lay.nfk
    uhat = system.bc_uhat.copy()
    sigma = system.bc_sigma.copy()
    xg_pad = np.concatenate([x, [0.0]]) if n > 0 else np.zeros(1)
    act_u = ~lay.uhat_fixed
    uhat[act_u] = xg_pad[lay.uhat_gdof[act_u]]
    act_s = ~lay.sigma_fixed
    sigma[act_s] = xg_pad[lay.sigma_gdof[act_s]]

    vals_G = system.known_vals.copy()
    gd = lay.elem_gdofs
    act = gd >= 0
    vals_G[act] = x[gd[act]]

    x_L = system.inv_b - np.einsum("elg,eg->el", system.inv_lg, vals_G)
    if system.gauge == "mean_zero":
        lam = x[-1]
        x_L -= lam * system.inv_e
    u = x_L[:, :2 * lay.nk].reshape(lay.n_elems, 2, lay.nk)
    p = x_L[:, 2 * lay.nk:2 * lay.nk + lay.nq]
    state = FlowState(u, p, uhat, sigma,
                      config_id=system.geom.mesh.config_id)
    state.skeleton = x
    return state


def local_equation_residual(system, state):
    """Max relative residual of the element-local equations at a solution."""
    space = system.space
    lay = space.layout
    x_L = np.concatenate(
        [state.u.reshape(lay.n_elems, -1), state.p], axis=1
    )
    vals_G = np.zeros((lay.n_elems, lay.n_group))
    nfk = lay.nfk
    mesh = space.mesh
    for l in range(3):
        fidx = mesh.elem_facets[:, l]
        vals_G[:, 2 * l * nfk:(2 * l + 1) * nfk] = state.uhat[fidx]
        vals_G[:, (2 * l + 1) * nfk:(2 * l + 2) * nfk] = state.sigma[fidx]
    b = system.blocks.bl.copy()
    if system.gauge == "mean_zero" and hasattr(state, "skeleton"):
        b = b - state.skeleton[-1] * _pressure_integral_vectors(
            space, system.geom
        )
    r = (np.einsum("elm,em->el", system.blocks.ll, x_L)
         + np.einsum("elg,eg->el", system.blocks.lg, vals_G) - b)
    scale = max(np.abs(b).max(), np.abs(x_L).max(), 1.0)
    return float(np.abs(r).max() / scale)


def full_solve(space, geom, blocks, bc_uhat=None, bc_sigma=None,
               gauge="none"):
    """Dense uncondensed solve over all dofs; the testing oracle.

    Only meant for small problems (everything is materialized densely).
    """
    lay = space.layout
    known, bc_uhat, bc_sigma = _known_group_values(space, bc_uhat, bc_sigma)
    E, nL = lay.n_elems, lay.n_local
    n_loc = E * nL
    use_mz = gauge == "mean_zero"
    n = n_loc + lay.n_skeleton + (1 if use_mz else 0)
    A = np.zeros((n, n))
    b = np.zeros(n)

    gd = lay.elem_gdofs
    for e in range(E):
        sl = slice(e * nL, (e + 1) * nL)
        A[sl, sl] += blocks.ll[e]
        b[sl] += blocks.bl[e]
        for j, g in enumerate(gd[e]):
            if g >= 0:
                gj = n_loc + g
                A[sl, gj] += blocks.lg[e, :, j]
                A[gj, sl] += blocks.gl[e, j, :]
            else:
                b[sl] -= blocks.lg[e, :, j] * known[e, j]
        for j, g in enumerate(gd[e]):
            if g >= 0:
                gj = n_loc + g
                b[gj] += blocks.bg[e, j]
                for jj, g2 in enumerate(gd[e]):
                    if g2 >= 0:
                        A[gj, n_loc + g2] += blocks.gg[e, j, jj]
                    else:
                        b[gj] -= blocks.gg[e, j, jj] * known[e, jj]
        # bg rows were accumulated once per (e, j); divide later? no:
        # each element contributes its own share, duplicates are intended.

    if use_mz:
        e_vec = _pressure_integral_vectors(space, geom)
        for e in range(E):
            sl = slice(e * nL, (e + 1) * nL)
            A[sl, n - 1] += e_vec[e]
            A[n - 1, sl] += e_vec[e]
    elif gauge == "pinned":
        active = np.flatnonzero(lay.sigma_gdof[:, 0] >= 0)
        pin = n_loc + int(lay.sigma_gdof[active[0], 0])
        A[pin, :] = 0.0
        A[:, pin] = 0.0
        A[pin, pin] = 1.0
        b[pin] = 0.0

    x = np.linalg.solve(A, b)
    u = x[:n_loc].reshape(E, nL)[:, :2 * lay.nk].reshape(E, 2, lay.nk)
    p = x[:n_loc].reshape(E, nL)[:, 2 * lay.nk:]
    xg = x[n_loc:n_loc + lay.n_skeleton]
    uhat = bc_uhat.copy()
    sigma = bc_sigma.copy()
    act_u = ~lay.uhat_fixed
    uhat[act_u] = xg[lay.uhat_gdof[act_u]]
    act_s = ~lay.sigma_fixed
    sigma[act_s] = xg[lay.sigma_gdof[act_s]]
    return FlowState(u, p, uhat, sigma, config_id=geom.mesh.config_id)


def export_matrix_market(system, path):
    """Write the skeleton matrix in matrix-market format (debug aid)."""
    from scipy.io import mmwrite

    mmwrite(path, system.matrix)
