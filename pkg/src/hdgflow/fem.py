"""Reference-element bases, quadrature, pull-back maps and dof layout.

The discrete spaces are, per element of degree ``k``:

* element velocity: two components of :math:`P^k` (orthonormal modal basis),
* element pressure: :math:`P^{k-1}` (orthonormal modal basis),

and per facet:

* tangential velocity: scalar :math:`P^k` along the facet tangent
  (nodal Lagrange basis),
* normal-normal stress: scalar :math:`P^k` (nodal Lagrange basis).

All elements are affine; mapped fields are defined by composition with the
inverse affine map (pull-back), so coefficient vectors are independent of the
mesh configuration.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .errors import MeshGeometryError, MeshTopologyError

__all__ = [
    "triangle_quadrature",
    "segment_quadrature",
    "TriangleBasis",
    "SegmentBasis",
    "DofLayout",
    "Space",
    "Geometry",
]

# reference triangle: vertices (0,0), (1,0), (0,1); measure 1/2
# local edges in counterclockwise order, edge l from vertex l to vertex (l+1)%3
_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
_EDGE_VERTS = ((0, 1), (1, 2), (2, 0))


def segment_quadrature(degree):
    """Gauss-Legendre rule on [0, 1] exact for polynomials up to ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_quadrature(degree):
    """Quadrature on the reference triangle exact up to total ``degree``.

    Built from a Duffy (collapsed-square) transform with a Gauss-Jacobi rule
    absorbing the transform Jacobian, so exactness holds for every polynomial
    of the stated total degree. Returns ``(points (n, 2), weights (n,))``;
    weights sum to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    xi, wxi = leggauss(n)
    xi = 0.5 * (xi + 1.0)
    wxi = 0.5 * wxi
    eta, weta = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (eta + 1.0)
    weta = 0.25 * weta  # includes the (1 - eta) Jacobian factor
    X = np.outer(xi, 1.0 - eta)
    Y = np.broadcast_to(eta, (n, n))
    W = np.outer(wxi, weta)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts, W.ravel()


def _monomial_exponents(degree):
    out = []
    for d in range(degree + 1):
        for a in range(d, -1, -1):
            out.append((a, d - a))
    return out


class TriangleBasis:
    """Orthonormal (modal) polynomial basis of total degree ``degree``.

    Orthonormal in L2 of the reference triangle; the element mass matrix on
    any affine element is ``det(J)`` times the identity, which keeps the
    element-local solves in the static condensation cheap.
    """

    def __init__(self, degree):
        if degree < 0:
            raise ValueError("degree must be >= 0")
        self.degree = degree
        self.exponents = _monomial_exponents(degree)
        self.n = len(self.exponents)
        pts, w = triangle_quadrature(2 * degree)
        V = self._mono_eval(pts)
        G = (V * w[:, None]).T @ V
        L = np.linalg.cholesky(G)
        # rows of C express each orthonormal function in the monomial basis
        self.coeff = np.linalg.inv(L)

    def _mono_eval(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        cols = [x**a * y**b for a, b in self.exponents]
        return np.column_stack(cols)

    def _mono_grad(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        n = len(self.exponents)
        g = np.zeros((len(pts), n, 2))
        for j, (a, b) in enumerate(self.exponents):
            if a > 0:
                g[:, j, 0] = a * x ** (a - 1) * y**b
            if b > 0:
                g[:, j, 1] = b * x**a * y ** (b - 1)
        return g

    def eval(self, pts):
        """Basis values at reference points; shape ``(npts, n)``."""
        return self._mono_eval(np.atleast_2d(pts)) @ self.coeff.T

    def grad(self, pts):
        """Reference gradients at reference points; shape ``(npts, n, 2)``."""
        g = self._mono_grad(np.atleast_2d(pts))
        return np.einsum("ij,qjd->qid", self.coeff, g)

    @staticmethod
    def edge_points(edge, s):
        """Reference coordinates of points at parameters ``s`` on local ``edge``."""
        s = np.asarray(s, dtype=float)
        a, b = _EDGE_VERTS[edge]
        pa, pb = _REF_VERTS[a], _REF_VERTS[b]
        return pa[None, :] + s[:, None] * (pb - pa)[None, :]


class SegmentBasis:
    """Nodal Lagrange basis of degree ``degree`` on the unit segment.

    Nodes are equispaced and include both endpoints, so gluing adjacent
    facets into a continuous chain space only requires sharing endpoint dofs.
    """

    def __init__(self, degree):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.degree = degree
        self.n = degree + 1
        self.nodes = np.linspace(0.0, 1.0, self.n)
        V = np.vander(self.nodes, self.n, increasing=True)
        self.coeff = np.linalg.inv(V).T  # row i: monomial coeffs of phi_i

    def eval(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        V = np.vander(s, self.n, increasing=True)
        return V @ self.coeff.T

    def grad(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        D = np.zeros((len(s), self.n))
        for p in range(1, self.n):
            D[:, p] = p * s ** (p - 1)
        return D @ self.coeff.T


class DofLayout:
    """Index bookkeeping for the four discrete spaces on a fixed topology.

    Element dofs (velocity components, pressure) are stored per element and
    never enter the global system; facet dofs (tangential velocity ``uhat``,
    normal-normal stress ``sigma``) carry the global coupling. Dirichlet
    facets fix all their ``uhat`` dofs, traction-free facets fix all their
    ``sigma`` dofs (to the zero normal stress value); fixed dofs get global
    index -1.
    """

    def __init__(self, mesh, k):
        from .mesh import DIRICHLET, TRACTION_FREE

        self.k = int(k)
        if self.k < 1:
            raise ValueError("polynomial degree must be >= 1")
        self.nk = (k + 1) * (k + 2) // 2
        self.nq = k * (k + 1) // 2
        self.nfk = k + 1
        self.n_elems = mesh.n_elems
        self.n_facets = mesh.n_facets

        self.mesh = mesh
        labels = mesh.facet_labels
        self.uhat_fixed = labels == DIRICHLET
        self.sigma_fixed = labels == TRACTION_FREE
        self.n_local = 2 * self.nk + self.nq
        self.n_group = 6 * self.nfk
        self.refresh_masks()

        # facet -> (element, local edge) for both sides; side 0 is the left
        # element (facet normal outward), side 1 the right (-1 on boundary)
        E, F = self.n_elems, self.n_facets
        self.facet_elem = -np.ones((F, 2), dtype=np.int64)
        self.facet_local = -np.ones((F, 2), dtype=np.int64)
        for l in range(3):
            fidx = mesh.elem_facets[:, l]
            left = mesh.elem_orient[:, l]
            elems = np.arange(E)
            side = np.where(left, 0, 1)
            self.facet_elem[fidx, side] = elems
            self.facet_local[fidx, side] = l

    def refresh_masks(self):
        """Rebuild the global numbering after changing the fixed-dof masks."""
        mesh = self.mesh
        F, nfk = self.n_facets, self.nfk
        self.uhat_gdof = -np.ones((F, nfk), dtype=np.int64)
        self.sigma_gdof = -np.ones((F, nfk), dtype=np.int64)
        idx = 0
        for f in range(F):
            if not self.uhat_fixed[f]:
                self.uhat_gdof[f] = np.arange(idx, idx + nfk)
                idx += nfk
            if not self.sigma_fixed[f]:
                self.sigma_gdof[f] = np.arange(idx, idx + nfk)
                idx += nfk
        self.n_skeleton = idx

        # per-element gather of the 6 facet-dof groups
        # order: [f0 uhat, f0 sigma, f1 uhat, f1 sigma, f2 uhat, f2 sigma]
        E = self.n_elems
        self.elem_gdofs = np.empty((E, self.n_group), dtype=np.int64)
        for l in range(3):
            fidx = mesh.elem_facets[:, l]
            self.elem_gdofs[:, 2 * l * nfk : (2 * l + 1) * nfk] = self.uhat_gdof[fidx]
            self.elem_gdofs[:, (2 * l + 1) * nfk : (2 * l + 2) * nfk] = self.sigma_gdof[fidx]

    @property
    def dim_v(self):
        return 2 * self.n_elems * self.nk

    @property
    def dim_q(self):
        return self.n_elems * self.nq

    @property
    def dim_vhat(self):
        return int(np.count_nonzero(~self.uhat_fixed)) * self.nfk

    @property
    def dim_mhat(self):
        return int(np.count_nonzero(~self.sigma_fixed)) * self.nfk


class Geometry:
    """Per-configuration geometric factors for one mesh state.

    Affine Jacobians, their inverses, physical quadrature points, and facet
    frames; recomputed after every mesh motion while all reference tables
    stay fixed.
    """

    def __init__(self, space, mesh):
        tri = mesh.triangles
        nodes = mesh.nodes
        p0 = nodes[tri[:, 0]]
        p1 = nodes[tri[:, 1]]
        p2 = nodes[tri[:, 2]]
        jac = np.stack([p1 - p0, p2 - p0], axis=-1)  # (E, 2, 2), columns
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            e = int(np.argmin(det))
            raise MeshGeometryError(
                f"element {e} has non-positive Jacobian {det[e]:.3e}"
            )
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv /= det[:, None, None]
        self.mesh = mesh
        self.jac = jac
        self.det = det
        self.inv_jac = inv
        self.invT = inv.transpose(0, 2, 1).copy()  # grad_x = invT @ grad_ref
        e01 = np.linalg.norm(p1 - p0, axis=1)
        e12 = np.linalg.norm(p2 - p1, axis=1)
        e20 = np.linalg.norm(p0 - p2, axis=1)
        self.diam = np.maximum(np.maximum(e01, e12), e20)
        self.origin = p0

        self.vol_x = p0[:, None, :] + np.einsum("eab,qb->eqa", jac, space.vol_pts)

        fr = mesh.facet_frames()
        self.normals = fr["normal"]
        self.tangents = fr["tangent"]
        self.lengths = fr["length"]
        a = nodes[mesh.facets[:, 0]]
        b = nodes[mesh.facets[:, 1]]
        s = space.facet_pts
        self.facet_x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]

        # physical gradients of the velocity basis at volume points; the
        # facet-trace analogue is built lazily per local edge during assembly
        self.grad_v = np.einsum("eab,qib->eqia", self.invT, space.vol_grad)


class Space:
    """Bundles bases, quadrature and layout for one (topology, degree) pair.

    The mesh may move; everything here depends only on connectivity.
    Geometry for a concrete node configuration comes from :meth:`geometry`.
    """

    def __init__(self, mesh, k):
        self.mesh = mesh
        self.k = int(k)
        self.basis_v = TriangleBasis(k)
        self.basis_q = TriangleBasis(k - 1)
        self.basis_f = SegmentBasis(k)
        self.layout = DofLayout(mesh, k)

        deg = max(2 * k + 2, 3 * k)
        self.vol_pts, self.vol_w = triangle_quadrature(deg)
        self.facet_pts, self.facet_w = segment_quadrature(deg)

        self.vol_v = self.basis_v.eval(self.vol_pts)        # (qv, nk)
        self.vol_grad = self.basis_v.grad(self.vol_pts)     # (qv, nk, 2)
        self.vol_q = self.basis_q.eval(self.vol_pts)        # (qv, nq)
        # P1 hat functions (for nodal mesh-velocity interpolation)
        lam = np.column_stack(
            [1.0 - self.vol_pts[:, 0] - self.vol_pts[:, 1],
             self.vol_pts[:, 0], self.vol_pts[:, 1]]
        )
        self.vol_hat = lam

        self.facet_phi = self.basis_f.eval(self.facet_pts)  # (qf, nfk)

        # element-basis traces on each local edge for both facet orientations:
        # orientation 0 = facet direction equals the element's ccw edge
        # direction (element on the left), 1 = reversed (element on the right)
        qf = len(self.facet_pts)
        nk = self.basis_v.n
        self.trace_v = np.empty((3, 2, qf, nk))
        self.trace_grad_ref = np.empty((3, 2, qf, nk, 2))
        self.trace_hat = np.empty((3, 2, qf, 3))
        for l in range(3):
            for o, s in enumerate((self.facet_pts, 1.0 - self.facet_pts)):
                pts = TriangleBasis.edge_points(l, s)
                self.trace_v[l, o] = self.basis_v.eval(pts)
                self.trace_grad_ref[l, o] = self.basis_v.grad(pts)
                self.trace_hat[l, o] = np.column_stack(
                    [1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]]
                )

    def geometry(self, mesh=None):
        return Geometry(self, mesh if mesh is not None else self.mesh)

    # -- field evaluation and projection -------------------------------------

    def eval_velocity(self, geom, coeffs, ref_pts=None, table=None):
        """Velocity values at volume quadrature points; shape ``(E, qv, 2)``."""
        V = self.vol_v if table is None else table
        if ref_pts is not None:
            V = self.basis_v.eval(ref_pts)
        return np.einsum("eci,qi->eqc", coeffs, V)

    def eval_velocity_grad(self, geom, coeffs):
        """Physical velocity gradients du_c/dx_a at volume points: (E, qv, 2, 2)."""
        return np.einsum("eci,eqia->eqca", coeffs, geom.grad_v)

    def project_velocity(self, geom, fn):
        """Elementwise L2 projection of a callable ``fn(x) -> (..., 2)``.

        With the orthonormal reference basis the element mass matrix is
        ``det(J) I``, so the coefficients are plain reference integrals.
        """
        vals = np.asarray(fn(geom.vol_x))
        return np.einsum("q,qi,eqc->eci", self.vol_w, self.vol_v, vals)

    def project_pressure(self, geom, fn):
        vals = np.asarray(fn(geom.vol_x))
        return np.einsum("q,qi,eq->ei", self.vol_w, self.vol_q, vals)

    def eval_pressure(self, geom, coeffs):
        return np.einsum("ei,qi->eq", coeffs, self.vol_q)


def eval_pullback_field(space, geom, elem, coeffs, ref_point):
    """Value and physical gradient of one element field at a reference point.

    ``coeffs`` has shape ``(2, nk)`` (vector field) or ``(nk,)`` (scalar in
    the velocity basis). Returns ``(value, gradient)`` with the gradient
    mapped through the inverse-transpose Jacobian.
    """
    pt = np.atleast_2d(ref_point)
    V = space.basis_v.eval(pt)[0]
    G = space.basis_v.grad(pt)[0]
    invT = geom.invT[elem]
    c = np.asarray(coeffs)
    if c.ndim == 1:
        return c @ V, invT @ (G.T @ c)
    vals = c @ V
    grads = np.einsum("ab,ib,ci->ca", invT, G, c)
    return vals, grads


def facet_trace(space, geom, elem, local_edge, coeffs, params=None):
    """Trace of an element velocity field on one of its facets.

    Returns a dict with the trace values, normal component and tangential
    component (as a vector) at the facet quadrature points, ordered along the
    facet's stored direction. Satisfies ``w = (w.n) n + tang(w)`` with
    ``tang(w).n = 0`` pointwise.
    """
    mesh = geom.mesh
    fidx = mesh.elem_facets[elem, local_edge]
    orient = mesh.elem_orient[elem, local_edge]
    if fidx < 0:
        raise MeshTopologyError(f"element {elem} has no local edge {local_edge}")
    if params is None:
        T = space.trace_v[local_edge, 0 if orient else 1]
    else:
        s = np.asarray(params, dtype=float)
        s_elem = s if orient else 1.0 - s
        pts = TriangleBasis.edge_points(local_edge, s_elem)
        T = space.basis_v.eval(pts)
    vals = np.einsum("ci,qi->qc", np.asarray(coeffs), T)
    n = geom.normals[fidx]
    t = geom.tangents[fidx]
    wn = vals @ n
    tang = vals - wn[:, None] * n[None, :]
    return {"values": vals, "normal": wn, "tangential": tang,
            "normal_vec": n, "tangent_vec": t}
