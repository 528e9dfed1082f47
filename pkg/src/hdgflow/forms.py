"""Element- and facet-local operators of the hybrid scheme.

Assembled objects are per-element dense blocks coupling the local unknowns
(velocity components, pressure) with the facet unknowns (tangential velocity
``uhat``, normal-normal stress ``sigma``) of the element's three facets.

Sign conventions: the momentum row carries ``2 mu B - D(v, (p, sigma))``,
and both constraint rows (pressure test, stress test) are assembled with a
flipped sign so the full block system is symmetric whenever the convection
part is absent or explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import INTERFACE, OMEGA2

__all__ = [
    "FlowState",
    "ElementBlocks",
    "assemble_viscous",
    "assemble_divergence",
    "assemble_mass",
    "assemble_convection_implicit",
    "assemble_convection_explicit",
    "assemble_surface_tension",
    "assemble_body_force",
    "mass_apply",
    "kinetic_energy",
    "divergence_norms",
    "normal_jump_norms",
    "facet_traces",
]

_P1_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass
class FlowState:
    """Coefficient vectors of one time level, tied to a mesh configuration."""

    u: np.ndarray        # (E, 2, nk) element velocity
    p: np.ndarray        # (E, nq)    element pressure
    uhat: np.ndarray     # (F, k+1)   facet tangential velocity (scalar)
    sigma: np.ndarray    # (F, k+1)   facet normal-normal stress
    config_id: int = 0

    def copy(self):
        return FlowState(self.u.copy(), self.p.copy(), self.uhat.copy(),
                         self.sigma.copy(), self.config_id)


def zero_state(space, config_id=0):
    lay = space.layout
    return FlowState(
        np.zeros((lay.n_elems, 2, lay.nk)),
        np.zeros((lay.n_elems, lay.nq)),
        np.zeros((lay.n_facets, lay.nfk)),
        np.zeros((lay.n_facets, lay.nfk)),
        config_id,
    )


class ElementBlocks:
    """Dense per-element blocks: local-local, local-group, group-group.

    "Group" is the stacked facet dofs of the element's three facets in the
    order ``[f0 uhat, f0 sigma, f1 uhat, f1 sigma, f2 uhat, f2 sigma]``.
    """

    def __init__(self, space):
        lay = space.layout
        E, nL, nG = lay.n_elems, lay.n_local, lay.n_group
        self.space = space
        self.ll = np.zeros((E, nL, nL))
        self.lg = np.zeros((E, nL, nG))
        self.gl = np.zeros((E, nG, nL))
        self.gg = np.zeros((E, nG, nG))
        self.bl = np.zeros((E, nL))
        self.bg = np.zeros((E, nG))

    def add(self, other):
        self.ll += other.ll
        self.lg += other.lg
        self.gl += other.gl
        self.gg += other.gg
        self.bl += other.bl
        self.bg += other.bg
        return self


def _facet_context(space, geom, l):
    """Per-element tables for local facet ``l``, vectorized over elements.

    Returns weights ``(E, qf)``, facet tangent/outward normal ``(E, 2)``,
    traces ``(E, qf, nk)``, physical trace gradients ``(E, qf, nk, 2)`` and
    the facet index array. Cached on the geometry (tables are reused by
    every operator assembled on the same configuration).
    """
    cache = getattr(geom, "_facet_ctx", None)
    if cache is None:
        cache = geom._facet_ctx = {}
    if l in cache:
        return cache[l]
    mesh = geom.mesh
    E = mesh.n_elems
    fidx = mesh.elem_facets[:, l]
    orient = mesh.elem_orient[:, l]
    oidx = np.where(orient, 0, 1)
    trv = space.trace_v[l][oidx]                       # (E, qf, nk)
    tg = np.einsum("eab,eqib->eqia", geom.invT,
                   space.trace_grad_ref[l][oidx])      # (E, qf, nk, 2)
    hat = space.trace_hat[l][oidx]                     # (E, qf, 3)
    t = geom.tangents[fidx]
    sign = np.where(orient, 1.0, -1.0)
    n_out = geom.normals[fidx] * sign[:, None]
    W = space.facet_w[None, :] * geom.lengths[fidx][:, None]
    nk = space.basis_v.n
    qf = W.shape[1]
    TU = (t[:, None, :, None] * trv[:, :, None, :]).reshape(E, qf, 2 * nk)
    UN = (n_out[:, None, :, None] * trv[:, :, None, :]).reshape(E, qf, 2 * nk)
    gn = np.einsum("eqia,ea->eqi", tg, n_out)
    gt = np.einsum("eqia,ea->eqi", tg, t)
    TDN = 0.5 * (gn[:, :, None, :] * t[:, None, :, None]
                 + gt[:, :, None, :] * n_out[:, None, :, None]
                 ).reshape(E, qf, 2 * nk)
    ctx = {"fidx": fidx, "W": W, "t": t, "n": n_out, "trv": trv,
           "tg": tg, "hat": hat, "x": geom.facet_x[fidx],
           "TU": TU, "UN": UN, "TDN": TDN}
    cache[l] = ctx
    return ctx


def _wmat(W, X, Y):
    """Batched ``sum_q W[e,q] X[e,q,I] Y[e,q,J] -> (e, J, I)`` via BLAS."""
    return np.matmul(Y.transpose(0, 2, 1), X * W[:, :, None])


def _group_slices(nfk):
    return [(slice(2 * l * nfk, (2 * l + 1) * nfk),
             slice((2 * l + 1) * nfk, (2 * l + 2) * nfk)) for l in range(3)]


def assemble_viscous(space, geom, mu, alpha=4.0, out=None):
    """Symmetric interior-penalty strain form, scaled by ``2 mu`` per element.

    The penalty is ``alpha (k+1)^2 / h`` with ``h`` the adjacent element's
    diameter, so graded meshes get the local scaling.
    """
    if alpha <= 0:
        raise ValueError("stabilization constant must be positive")
    lay = space.layout
    nk, nfk = lay.nk, lay.nfk
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (lay.n_elems,))
    blocks = out if out is not None else ElementBlocks(space)
    nu = slice(0, 2 * nk)

    # volume: 2mu int D(u):D(v), via D(u):D(v) = (grad u : grad v
    # + grad u : grad v^T) / 2 evaluated on the component-blocked basis
    G = geom.grad_v
    Wv = space.vol_w[None, :] * geom.det[:, None]
    E = lay.n_elems
    qv = G.shape[1]
    Gw = G * Wv[:, :, None, None]
    Xf = G.transpose(0, 2, 1, 3).reshape(E, nk, qv * 2)
    Xfw = Gw.transpose(0, 2, 1, 3).reshape(E, nk, qv * 2)
    gdot = np.matmul(Xfw, Xf.transpose(0, 2, 1))          # (E, i, j)
    Yf = G.reshape(E, qv, nk * 2)
    Yfw = Gw.reshape(E, qv, nk * 2)
    crs = np.matmul(Yfw.transpose(0, 2, 1), Yf)           # [(i,d),(j,c)]
    crs = crs.reshape(E, nk, 2, nk, 2).transpose(0, 4, 1, 2, 3)
    A = 0.5 * crs                                          # [c, i, d, j]
    for c in range(2):
        A[:, c, :, c, :] += 0.5 * gdot
    blocks.ll[:, nu, nu] += 2.0 * mu[:, None, None] * A.reshape(E, 2 * nk, 2 * nk)

    pen = alpha * (space.k + 1) ** 2 / geom.diam
    for l, (su, _) in enumerate(_group_slices(nfk)):
        ctx = _facet_context(space, geom, l)
        W = ctx["W"]
        TU = ctx["TU"]
        TDN = ctx["TDN"]
        Phi = space.facet_phi
        m2 = 2.0 * mu
        WP = W * pen[:, None]
        blocks.ll[:, nu, nu] += m2[:, None, None] * (
            -_wmat(W, TDN, TU) - _wmat(W, TU, TDN) + _wmat(WP, TU, TU)
        )
        PhiB = np.broadcast_to(Phi, (E,) + Phi.shape)
        lg = m2[:, None, None] * (
            _wmat(W, PhiB, TDN) - _wmat(WP, PhiB, TU)
        )
        blocks.lg[:, nu, su] += lg
        blocks.gl[:, su, nu] += lg.transpose(0, 2, 1)
        blocks.gg[:, su, su] += m2[:, None, None] * _wmat(WP, PhiB, PhiB)
    return blocks


def assemble_divergence(space, geom, out=None):
    """Velocity-pressure and normal-trace pairings (both rows sign-flipped).

    Testing the assembled constraint rows with all pressure/stress functions
    forces the solved velocity to be elementwise divergence-free and normally
    continuous on affine meshes.
    """
    lay = space.layout
    nk, nq, nfk = lay.nk, lay.nq, lay.nfk
    blocks = out if out is not None else ElementBlocks(space)
    E = lay.n_elems
    nu = slice(0, 2 * nk)
    np_ = slice(2 * nk, 2 * nk + nq)

    G = geom.grad_v
    Wv = space.vol_w[None, :] * geom.det[:, None]
    DIV = G.transpose(0, 1, 3, 2).reshape(E, -1, 2 * nk)  # (E, qv, 2nk)
    bup = np.matmul((DIV * Wv[:, :, None]).transpose(0, 2, 1), space.vol_q)
    blocks.ll[:, nu, np_] -= bup
    blocks.ll[:, np_, nu] -= bup.transpose(0, 2, 1)

    for l, (_, ss) in enumerate(_group_slices(nfk)):
        ctx = _facet_context(space, geom, l)
        UN = ctx["UN"]
        cup = np.matmul((UN * ctx["W"][:, :, None]).transpose(0, 2, 1),
                        space.facet_phi)
        blocks.lg[:, nu, ss] -= cup
        blocks.gl[:, ss, nu] -= cup.transpose(0, 2, 1)
    return blocks


def assemble_mass(space, geom, rho, out=None):
    """Velocity mass operator weighted by the piecewise-constant density."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    lay = space.layout
    rho = np.broadcast_to(rho, (lay.n_elems,))
    blocks = out if out is not None else ElementBlocks(space)
    diag = rho * geom.det
    idx = np.arange(2 * lay.nk)
    blocks.ll[:, idx, idx] += diag[:, None]
    return blocks


def mass_apply(space, geom, rho, coeffs):
    """Apply the (orthonormal-basis) mass operator: ``rho det(J) c``."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (space.layout.n_elems,))
    return coeffs * (rho * geom.det)[:, None, None]


def interpolate_nodal(space, geom, nodal, where="volume", l=None, ctx=None):
    """Interpolate a continuous nodal (P1) field to quadrature points."""
    tri = geom.mesh.triangles
    vals = np.asarray(nodal)[tri]  # (E, 3, 2) or (E, 3)
    if where == "volume":
        return np.einsum("qa,ea...->eq...", space.vol_hat, vals)
    return np.einsum("eqa,ea...->eq...", ctx["hat"], vals)


def nodal_gradient(geom, nodal):
    """Constant per-element gradient d(nodal_c)/dx_a of a P1 field: (E, 2, 2)."""
    tri = geom.mesh.triangles
    vals = np.asarray(nodal)[tri]  # (E, 3, 2)
    gref = np.einsum("ac,ea...->e...c", _P1_GRAD, vals)  # (E, 2comp, 2refdir)
    return np.einsum("eab,ecb->eca", geom.invT, gref)


def _transport_data(space, geom, u_coeffs, omega_nodal):
    """Relative transport field ``beta = u - omega`` at all quadrature points.

    Returns volume values (E, qv, 2), volume divergence (E, qv) and a list of
    per-local-facet dicts with ``beta . n_out`` values.
    """
    uval = np.einsum("eci,qi->eqc", u_coeffs, space.vol_v)
    ugrad = np.einsum("eci,eqic->eq", u_coeffs, geom.grad_v)  # div u
    if omega_nodal is not None:
        wval = interpolate_nodal(space, geom, omega_nodal)
        beta = uval - wval
        gw = nodal_gradient(geom, omega_nodal)
        divb = ugrad - (gw[:, 0, 0] + gw[:, 1, 1])[:, None]
    else:
        beta = uval
        divb = ugrad
    facet = []
    for l in range(3):
        ctx = _facet_context(space, geom, l)
        tr = np.einsum("eci,eqi->eqc", u_coeffs, ctx["trv"])
        if omega_nodal is not None:
            tr = tr - interpolate_nodal(space, geom, omega_nodal,
                                        where="facet", ctx=ctx)
        s = np.einsum("eqc,ec->eq", tr, ctx["n"])
        facet.append({"ctx": ctx, "s": s})
    return beta, divb, facet


def assemble_convection_implicit(space, geom, u_coeffs, omega_nodal, rho,
                                 out=None):
    """Upwind convection linearized about the transport field ``u - omega``.

    The returned blocks applied to the same ``(u, uhat)`` coefficients give
    the nonlinear form exactly, so this doubles as the residual operator for
    the fixed-point iteration.
    """
    lay = space.layout
    nk, nfk = lay.nk, lay.nfk
    E = lay.n_elems
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (E,))
    blocks = out if out is not None else ElementBlocks(space)
    nu = slice(0, 2 * nk)

    beta, divb, facet = _transport_data(space, geom, u_coeffs, omega_nodal)
    Wv = space.vol_w[None, :] * geom.det[:, None] * rho[:, None]
    bgrad = np.einsum("eqa,eqja->eqj", beta, geom.grad_v)
    Vb = np.broadcast_to(space.vol_v, bgrad.shape)
    scal = (_wmat(Wv, Vb, bgrad)
            + _wmat(Wv * divb, Vb, Vb))
    A = np.zeros((E, 2, nk, 2, nk))
    for c in range(2):
        A[:, c, :, c, :] -= scal  # row=test j, col=trial i
    blocks.ll[:, nu, nu] += A.reshape(E, 2 * nk, 2 * nk)

    for l, (su, _) in enumerate(_group_slices(nfk)):
        ctx = facet[l]["ctx"]
        s = facet[l]["s"]
        W = ctx["W"] * rho[:, None]
        TU = ctx["TU"]
        Phi = np.broadcast_to(space.facet_phi,
                              (E,) + space.facet_phi.shape)
        up = s >= 0.0
        Wsp = W * np.where(up, s, 0.0)
        Wsm = W * np.where(up, 0.0, s)
        blocks.ll[:, nu, nu] += _wmat(Wsp, TU, TU)
        blocks.lg[:, nu, su] += _wmat(Wsm, Phi, TU)
        blocks.gl[:, su, nu] -= _wmat(Wsp, TU, Phi)
        blocks.gg[:, su, su] -= _wmat(Wsm, Phi, Phi)
    return blocks


def assemble_convection_explicit(space, geom, u_coeffs, omega_nodal, rho,
                                 dirichlet_value=None):
    """Explicit upwinding convection of an extrapolated field; load only.

    The upwind side of each interior facet is picked per quadrature point
    from the sign of the mean normal relative velocity; on Dirichlet
    boundary facets the inflow trace is the boundary value (zero unless
    given).
    """
    from .mesh import DIRICHLET

    lay = space.layout
    nk = lay.nk
    E = lay.n_elems
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (E,))
    rhs = np.zeros((E, lay.n_local))
    nu = slice(0, 2 * nk)

    beta, divb, facet = _transport_data(space, geom, u_coeffs, omega_nodal)
    uval = np.einsum("eci,qi->eqc", u_coeffs, space.vol_v)
    Wv = space.vol_w[None, :] * geom.det[:, None] * rho[:, None]
    bgrad = np.einsum("eqa,eqja->eqj", beta, geom.grad_v)
    r = (np.einsum("eq,eqc,eqj->ecj", Wv, uval, bgrad)
         + np.einsum("eq,eq,eqc,qj->ecj", Wv, divb, uval, space.vol_v))
    rhs[:, nu] -= r.reshape(E, 2 * nk)

    # single-valued upwind trace per facet
    trL, trR, has_R = facet_traces(space, geom, u_coeffs)
    mesh = geom.mesh
    nrm = geom.normals
    mean = np.where(has_R[:, None, None], 0.5 * (trL + trR), trL)
    if omega_nodal is not None:
        om = np.asarray(omega_nodal)
        a = om[mesh.facets[:, 0]]
        b = om[mesh.facets[:, 1]]
        s_pts = space.facet_pts[None, :, None]
        wf = a[:, None, :] + s_pts * (b - a)[:, None, :]
        mean = mean - wf
    sbar = np.einsum("fqc,fc->fq", mean, nrm)
    pick_left = sbar >= 0.0
    upw = np.where(pick_left[:, :, None], trL, trR)
    dirich = mesh.facet_labels == DIRICHLET
    if np.any(dirich):
        gval = np.zeros_like(trL)
        if dirichlet_value is not None:
            gval[:] = np.asarray(
                dirichlet_value(geom.facet_x.reshape(-1, 2))
            ).reshape(trL.shape)
        upw[dirich] = np.where(pick_left[dirich][:, :, None],
                               trL[dirich], gval[dirich])
    # non-Dirichlet boundary facets: own trace
    bnd_other = (~has_R) & (~dirich)
    upw[bnd_other] = trL[bnd_other]

    tang_up = np.einsum("fqc,fc->fq", upw, geom.tangents)
    for l in range(3):
        ctx = facet[l]["ctx"]
        s = facet[l]["s"]
        W = ctx["W"] * rho[:, None]
        tu_f = tang_up[ctx["fidx"]]
        rhs[:, nu] += np.einsum("eq,eqJ->eJ", W * s * tu_f, ctx["TU"])
    return rhs


def facet_traces(space, geom, u_coeffs):
    """Element traces of a velocity field on every facet, both sides.

    Returns ``(left (F, qf, 2), right (F, qf, 2), has_right (F,))``; the
    right trace is zero where there is no right element.
    """
    lay = space.layout
    mesh = geom.mesh
    qf = len(space.facet_pts)
    trL = np.zeros((lay.n_facets, qf, 2))
    trR = np.zeros((lay.n_facets, qf, 2))
    for l in range(3):
        fidx = mesh.elem_facets[:, l]
        orient = mesh.elem_orient[:, l]
        for side, mask in ((0, orient), (1, ~orient)):
            if not np.any(mask):
                continue
            vals = np.einsum("eci,qi->eqc", u_coeffs[mask],
                             space.trace_v[l][side])
            if side == 0:
                trL[fidx[mask]] = vals
            else:
                trR[fidx[mask]] = vals
    has_R = lay.facet_elem[:, 1] >= 0
    return trL, trR, has_R


def assemble_surface_tension(space, geom, facet_ids, kappa_at_quad, tau):
    """Surface load ``tau * int_F kappa . v`` tested on the subdomain-2 side.

    ``kappa_at_quad`` holds the curvature-vector values at the facet
    quadrature points, shape ``(len(facet_ids), qf, 2)``. The load lands only
    on dofs of subdomain-2 elements adjacent to the interface.
    """
    mesh = geom.mesh
    lay = space.layout
    rhs = np.zeros((lay.n_elems, lay.n_local))
    facet_ids = np.asarray(facet_ids, dtype=np.int64)
    labels = mesh.element_labels
    for j, f in enumerate(facet_ids):
        e = mesh.facet_left[f]
        if mesh.facet_right[f] < 0 or labels[e] == labels[mesh.facet_right[f]]:
            raise ValueError(
                f"facet {f} does not separate the two subdomains"
            )
        if labels[e] != OMEGA2:
            raise ValueError(f"interface facet {f} has subdomain-1 left element")
        l = int(lay.facet_local[f, 0])
        orient_idx = 0
        trv = space.trace_v[l][orient_idx]
        W = space.facet_w * geom.lengths[f]
        load = tau * np.einsum("q,qc,qi->ci", W, kappa_at_quad[j], trv)
        rhs[e, : 2 * lay.nk] += load.reshape(-1)
    return rhs


def assemble_body_force(space, geom, f, rho, t=None):
    """Load vector of the body force ``rho f`` (``f`` constant or callable)."""
    lay = space.layout
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (lay.n_elems,))
    if callable(f):
        vals = np.asarray(f(geom.vol_x, t) if t is not None else f(geom.vol_x))
    else:
        vals = np.broadcast_to(np.asarray(f, dtype=float),
                               geom.vol_x.shape)
    Wv = space.vol_w[None, :] * geom.det[:, None] * rho[:, None]
    rhs = np.zeros((lay.n_elems, lay.n_local))
    rhs[:, : 2 * lay.nk] += np.einsum(
        "eq,eqc,qi->eci", Wv, vals, space.vol_v
    ).reshape(lay.n_elems, -1)
    return rhs


def kinetic_energy(space, geom, rho, u_coeffs):
    """``1/2 rho ||u||^2`` using the orthonormal-basis mass structure."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (space.layout.n_elems,))
    return 0.5 * float(np.einsum("e,e,eci,eci->", rho, geom.det,
                                 u_coeffs, u_coeffs))


def l2_norm_velocity(space, geom, u_coeffs):
    return float(np.sqrt(np.einsum("e,eci,eci->", geom.det,
                                   u_coeffs, u_coeffs)))


def divergence_norms(space, geom, u_coeffs):
    """Elementwise L2 norms of div(u); shape (E,)."""
    du = np.einsum("eci,eqic->eq", u_coeffs, geom.grad_v)
    Wv = space.vol_w[None, :] * geom.det[:, None]
    return np.sqrt(np.einsum("eq,eq->e", Wv, du**2))


def normal_jump_norms(space, geom, u_coeffs, normal_data=None):
    """Facet L2 norms of the normal-velocity jump.

    Interior facets measure the jump across the facet; Dirichlet and
    free-slip boundary facets measure ``u.n - g.n`` (``g = 0`` unless
    ``normal_data`` provides values at the facet quadrature points).
    Traction-free facets carry no normal constraint and report 0.
    """
    from .mesh import DIRICHLET, FREESLIP

    trL, trR, has_R = facet_traces(space, geom, u_coeffs)
    n = geom.normals
    jump = np.einsum("fqc,fc->fq", trL - trR, n)
    unL = np.einsum("fqc,fc->fq", trL, n)
    labels = geom.mesh.facet_labels
    constrained_bnd = (~has_R) & ((labels == DIRICHLET) | (labels == FREESLIP))
    gn = np.zeros_like(unL)
    if normal_data is not None:
        gn = normal_data
    vals = np.where(has_R[:, None], jump, 0.0)
    vals[constrained_bnd] = unL[constrained_bnd] - gn[constrained_bnd]
    W = space.facet_w[None, :] * geom.lengths[:, None]
    return np.sqrt(np.einsum("fq,fq->f", W, vals**2))
