"""Mesh generators for the benchmark geometries.

Structured meshes cover the unit-square accuracy test and the wave channel;
the rising-bubble geometry uses a graded Delaunay generator (force-based
smoothing on a sizing field, with the interface polygon pinned) so the
circular interface is an exact polygon of mesh facets.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .errors import MeshTopologyError
from .mesh import (DIRICHLET, FREESLIP, OMEGA1, OMEGA2, TRACTION_FREE,
                   build_mesh)

__all__ = ["unit_square_mesh", "channel_mesh", "bubble_mesh"]

# empirical packing factor: force-equilibrated Delaunay meshes come out with
# mean edge length slightly above the nominal sizing target
_PACKING = 1.13


def unit_square_mesh(n, boundary_label=None):
    """Structured n-by-n unit square, each cell split into two triangles."""
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    if boundary_label is None:
        boundary_label = lambda mids: np.full(len(mids), DIRICHLET)
    return build_mesh(nodes, np.array(tris), boundary_label=boundary_label)


def channel_mesh(length, nx, ny, surface_height):
    """Tank mesh for the free-surface problem.

    Columns are uniform in x; each column of nodes is scaled vertically to
    the initial surface elevation ``surface_height(x)``. The top boundary is
    traction-free, every other wall is free-slip.
    """
    xs = np.linspace(0.0, length, nx + 1)
    eta = np.asarray(surface_height(xs), dtype=float)
    nodes = np.empty(((nx + 1) * (ny + 1), 2))
    for i, (x, h) in enumerate(zip(xs, eta)):
        ys = np.linspace(0.0, h, ny + 1)
        nodes[i * (ny + 1):(i + 1) * (ny + 1), 0] = x
        nodes[i * (ny + 1):(i + 1) * (ny + 1), 1] = ys

    def nid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    top = np.flatnonzero(np.arange(len(nodes)) % (ny + 1) == ny)
    top_set = set(int(v) for v in top)

    def boundary_label(mids):
        # a boundary facet is on the free surface iff both endpoints are
        # top-row nodes; geometric test: above every wall by construction
        labels = np.full(len(mids), FREESLIP)
        return labels

    mesh = build_mesh(nodes, np.array(tris), boundary_label=boundary_label)
    for f in mesh.boundary_facets():
        a, b = mesh.facets[f]
        if int(a) in top_set and int(b) in top_set:
            mesh.facet_labels[f] = TRACTION_FREE
    return mesh


def _hex_lattice(box, h0, axis=None):
    """Hexagonal point lattice with spacing ``h0`` inside ``box``.

    If ``axis`` is given, the lattice is generated symmetric about the
    vertical line ``x = axis`` (mirror pairs share thinning decisions later).
    """
    (x0, x1), (y0, y1) = box
    dy = h0 * np.sqrt(3.0) / 2.0
    rows = int(np.floor((y1 - y0) / dy)) + 1
    pts = []
    cx = axis if axis is not None else 0.5 * (x0 + x1)
    half = max(x1 - cx, cx - x0)
    ncol = int(np.floor(half / h0)) + 1
    for r in range(rows):
        y = y0 + r * dy
        if y > y1 + 1e-12:
            break
        off = 0.25 * h0 if r % 2 else -0.25 * h0
        for c in range(-ncol, ncol + 1):
            x = cx + c * h0 + off
            if x0 + 0.3 * h0 < x < x1 - 0.3 * h0 and y0 + 0.3 * h0 < y < y1 - 0.3 * h0:
                pts.append((x, y))
    return np.array(pts)


def _smooth_points(pts, n_fixed, box, sizing, iters=60):
    """Force-based point relaxation toward the sizing field (distmesh style).

    The first ``n_fixed`` points never move. Deterministic: fixed iteration
    count, no randomness.
    """
    (x0, x1), (y0, y1) = box
    p = pts.copy()
    for _ in range(iters):
        tri = Delaunay(p)
        edges = set()
        for simplex in tri.simplices:
            for i in range(3):
                a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
                edges.add((a, b) if a < b else (b, a))
        e = np.array(sorted(edges))
        vec = p[e[:, 1]] - p[e[:, 0]]
        L = np.linalg.norm(vec, axis=1)
        mid = 0.5 * (p[e[:, 0]] + p[e[:, 1]])
        hbar = sizing(mid)
        L0 = hbar * 1.2 * np.sqrt((L**2).sum() / (hbar**2).sum())
        fmag = np.maximum(L0 - L, 0.0) / L
        force = vec * fmag[:, None]
        move = np.zeros_like(p)
        np.add.at(move, e[:, 0], -force)
        np.add.at(move, e[:, 1], force)
        p[n_fixed:] += 0.2 * move[n_fixed:]
        p[n_fixed:, 0] = np.clip(p[n_fixed:, 0], x0 + 1e-9, x1 - 1e-9)
        p[n_fixed:, 1] = np.clip(p[n_fixed:, 1], y0 + 1e-9, y1 - 1e-9)
    return p


def bubble_mesh(h=1.0 / 20.0, h_gamma=1.0 / 20.0, radius=0.25,
                center=(0.5, 0.5), box_size=(1.0, 2.0), grade=0.3,
                smooth_iters=60):
    """Graded bubble mesh on ``[0, w] x [0, d]`` with a pinned circular chain.

    The interface circle is discretized with ``round(2 pi r / h_gamma)``
    equally spaced nodes that become exact mesh nodes; element size grows
    linearly from ``h_gamma`` at the interface to ``h`` far away. Top/bottom
    walls are no-slip (Dirichlet), the vertical walls free-slip. The bubble
    interior is subdomain 2.
    """
    w, d = box_size
    cx, cy = center
    box = ((0.0, w), (0.0, d))

    n_gamma = max(12, int(round(2.0 * np.pi * radius / h_gamma)))
    theta = -0.5 * np.pi + 2.0 * np.pi * np.arange(n_gamma) / n_gamma
    circle = np.column_stack([cx + radius * np.cos(theta),
                              cy + radius * np.sin(theta)])

    def sizing(x):
        r = np.hypot(x[..., 0] - cx, x[..., 1] - cy)
        return np.minimum(h, h_gamma + grade * np.abs(r - radius)) * _PACKING

    # fixed points: box corners, graded boundary points, interface circle
    fixed = [np.array([[0.0, 0.0], [w, 0.0], [w, d], [0.0, d]])]
    for (a, b) in (((0.0, 0.0), (w, 0.0)), ((0.0, d), (w, d))):
        n = int(round((b[0] - a[0]) / (h * _PACKING)))
        s = np.linspace(0.0, 1.0, n + 1)[1:-1]
        fixed.append(np.column_stack([a[0] + s * (b[0] - a[0]),
                                      np.full(len(s), a[1])]))
    for x in (0.0, w):
        n = int(round(d / (h * _PACKING)))
        s = np.linspace(0.0, d, n + 1)[1:-1]
        fixed.append(np.column_stack([np.full(len(s), x), s]))
    fixed.append(circle)
    fixed = np.vstack(fixed)
    n_fixed = len(fixed)

    # interior lattice, mirror-symmetric about the bubble axis, thinned to
    # the sizing density with a deterministic golden-ratio rule keyed on the
    # quantized mirror-invariant position
    h0 = h_gamma * _PACKING
    lattice = _hex_lattice(box, h0, axis=cx)
    dens = (h0 / sizing(lattice)) ** 2
    key = np.round(np.abs(lattice[:, 0] - cx) / h0 * 4) * 7919.0 + np.round(
        lattice[:, 1] / h0 * 4)
    frac = (key * 0.6180339887498949) % 1.0
    lattice = lattice[frac < dens]
    dist = np.min(
        np.linalg.norm(lattice[:, None, :] - fixed[None, :, :], axis=2), axis=1
    )
    lattice = lattice[dist > 0.55 * sizing(lattice)]

    pts = np.vstack([fixed, lattice])
    pts = _smooth_points(pts, n_fixed, box, sizing, iters=smooth_iters)

    tri = Delaunay(pts)
    simplices = tri.simplices.copy()
    # qhull output is ccw already; enforce anyway
    d1 = pts[simplices[:, 1]] - pts[simplices[:, 0]]
    d2 = pts[simplices[:, 2]] - pts[simplices[:, 0]]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]

    circle_ids = np.arange(n_fixed - n_gamma, n_fixed)

    def region(centroids):
        r = np.hypot(centroids[:, 0] - cx, centroids[:, 1] - cy)
        return np.where(r < radius, OMEGA2, OMEGA1)

    def boundary_label(mids):
        on_side = (mids[:, 0] < 1e-9) | (mids[:, 0] > w - 1e-9)
        return np.where(on_side, FREESLIP, DIRICHLET)

    mesh = build_mesh(pts, simplices, boundary_label=boundary_label,
                      region_label=region)

    # the interface chain must be exactly the pinned circle polygon
    iface = mesh.interface_facets()
    chain_nodes = set(map(int, mesh.facets[iface].ravel()))
    if chain_nodes != set(map(int, circle_ids)):
        raise MeshTopologyError(
            "interface polygon is not conforming; adjust sizing parameters"
        )
    if len(iface) != n_gamma:
        raise MeshTopologyError(
            f"expected {n_gamma} interface facets, found {len(iface)}"
        )
    return mesh
