"""Conforming triangle meshes with facet adjacency, labels and node motion.

Conventions
-----------
* Triangles are counterclockwise.
* Each facet stores a direction ``n0 -> n1``. The unit tangent points along
  that direction and the unit normal is the tangent rotated 90 degrees
  clockwise, so the normal points from the "left" element into the "right"
  element (or out of the domain for boundary facets).
* On interface facets the left element belongs to the interior subdomain
  (label ``OMEGA2``), so the normal points from subdomain 2 into subdomain 1.
* Left/right assignment and facet direction are frozen at construction; only
  node coordinates change under motion, and frames are recomputed from the
  current coordinates.
"""

from __future__ import annotations

import numpy as np

from .errors import MeshGeometryError, MeshTanglingError, MeshTopologyError

# facet labels
INTERIOR = 0
INTERFACE = 1
DIRICHLET = 2
FREESLIP = 3
TRACTION_FREE = 4

# element subdomain labels
OMEGA1 = 1
OMEGA2 = 2

LABEL_NAMES = {
    INTERIOR: "interior",
    INTERFACE: "interface",
    DIRICHLET: "dirichlet",
    FREESLIP: "freeslip",
    TRACTION_FREE: "traction_free",
}


class Mesh2D:
    """Triangulation with facet connectivity and immutable labeling.

    Use :func:`build_mesh` to construct one; the constructor trusts its
    arguments.
    """

    def __init__(self, nodes, triangles, facets, facet_left, facet_right,
                 facet_labels, element_labels, elem_facets, elem_orient,
                 config_id=0):
        self.nodes = nodes
        self.triangles = triangles
        self.facets = facets
        self.facet_left = facet_left
        self.facet_right = facet_right
        self.facet_labels = facet_labels
        self.element_labels = element_labels
        self.elem_facets = elem_facets
        self.elem_orient = elem_orient
        self.config_id = config_id

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elems(self):
        return len(self.triangles)

    @property
    def n_facets(self):
        return len(self.facets)

    def signed_areas(self):
        p = self.nodes
        t = self.triangles
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def facet_frames(self):
        """Current normal/tangent/length per facet (normal = left -> right)."""
        a = self.nodes[self.facets[:, 0]]
        b = self.nodes[self.facets[:, 1]]
        d = b - a
        length = np.linalg.norm(d, axis=1)
        if np.any(length == 0.0):
            f = int(np.argmin(length))
            raise MeshGeometryError(f"facet {f} has zero length")
        t = d / length[:, None]
        n = np.column_stack([t[:, 1], -t[:, 0]])
        return {"normal": n, "tangent": t, "length": length}

    def boundary_facets(self):
        return np.flatnonzero(self.facet_right < 0)

    def interior_facets(self):
        return np.flatnonzero(self.facet_right >= 0)

    def interface_facets(self):
        return np.flatnonzero(self.facet_labels == INTERFACE)


def build_mesh(nodes, triangles, boundary_label=None, region_label=None):
    """Build a :class:`Mesh2D` with full facet adjacency.

    Parameters
    ----------
    nodes : (V, 2) array
    triangles : (E, 3) int array, counterclockwise
    boundary_label : callable or None
        Maps facet midpoints ``(nb, 2)`` to facet labels for boundary facets.
        Defaults to Dirichlet everywhere.
    region_label : callable or None
        Maps element centroids ``(E, 2)`` to subdomain labels. Defaults to
        ``OMEGA1``. Facets separating the two subdomains are labeled
        ``INTERFACE`` automatically and oriented with the subdomain-2 element
        on the left.
    """
    nodes = np.asarray(nodes, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    if triangles.min() < 0 or triangles.max() >= len(nodes):
        raise MeshTopologyError("triangle references a nonexistent node")

    p = nodes
    t = triangles
    d1 = p[t[:, 1]] - p[t[:, 0]]
    d2 = p[t[:, 2]] - p[t[:, 0]]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(areas <= 0.0):
        e = int(np.argmin(areas))
        raise MeshGeometryError(
            f"triangle {e} has non-positive signed area {areas[e]:.3e}; "
            "triangles must be counterclockwise"
        )

    E = len(triangles)
    edge_map = {}
    facets = []
    facet_left = []
    facet_right = []
    elem_facets = -np.ones((E, 3), dtype=np.int64)
    elem_orient = np.zeros((E, 3), dtype=bool)
    for e in range(E):
        tri = triangles[e]
        for l in range(3):
            a, b = int(tri[l]), int(tri[(l + 1) % 3])
            key = (a, b) if a < b else (b, a)
            if key not in edge_map:
                fid = len(facets)
                edge_map[key] = fid
                facets.append((a, b))
                facet_left.append(e)
                facet_right.append(-1)
                elem_facets[e, l] = fid
                elem_orient[e, l] = True
            else:
                fid = edge_map[key]
                if facet_right[fid] >= 0:
                    raise MeshTopologyError(
                        f"facet {key} shared by more than two elements"
                    )
                if facets[fid] == (a, b):
                    raise MeshTopologyError(
                        f"facet {key} traversed twice in the same direction; "
                        "inconsistent element orientation"
                    )
                facet_right[fid] = e
                elem_facets[e, l] = fid
                elem_orient[e, l] = False

    facets = np.asarray(facets, dtype=np.int64)
    facet_left = np.asarray(facet_left, dtype=np.int64)
    facet_right = np.asarray(facet_right, dtype=np.int64)

    centroids = p[t].mean(axis=1)
    if region_label is None:
        element_labels = np.full(E, OMEGA1, dtype=np.int64)
    else:
        element_labels = np.asarray(region_label(centroids), dtype=np.int64)

    labels = np.full(len(facets), INTERIOR, dtype=np.int64)
    bnd = facet_right < 0
    if boundary_label is None:
        labels[bnd] = DIRICHLET
    else:
        mids = 0.5 * (p[facets[bnd, 0]] + p[facets[bnd, 1]])
        labels[bnd] = np.asarray(boundary_label(mids), dtype=np.int64)

    # interface facets: exactly those separating the two subdomains;
    # flip so the subdomain-2 element is on the left
    inter = np.flatnonzero(~bnd)
    ll = element_labels[facet_left[inter]]
    rr = element_labels[facet_right[inter]]
    iface = inter[ll != rr]
    labels[iface] = INTERFACE
    for f in iface:
        if element_labels[facet_left[f]] != OMEGA2:
            facets[f] = facets[f][::-1].copy()
            facet_left[f], facet_right[f] = facet_right[f], facet_left[f]
            for e in (facet_left[f], facet_right[f]):
                l = int(np.flatnonzero(elem_facets[e] == f)[0])
                elem_orient[e, l] = not elem_orient[e, l]

    return Mesh2D(nodes, triangles, facets, facet_left, facet_right,
                  labels, element_labels, elem_facets, elem_orient)


def move_nodes(mesh, displacement):
    """Return a new configuration with displaced nodes and frozen topology.

    Raises :class:`MeshTanglingError` (carrying the worst element index) if
    any element area becomes non-positive.
    """
    disp = np.asarray(displacement, dtype=float)
    if disp.shape != mesh.nodes.shape:
        raise ValueError("displacement must be given at every node")
    new_nodes = mesh.nodes + disp
    moved = Mesh2D(new_nodes, mesh.triangles, mesh.facets, mesh.facet_left,
                   mesh.facet_right, mesh.facet_labels, mesh.element_labels,
                   mesh.elem_facets, mesh.elem_orient,
                   config_id=mesh.config_id + 1)
    areas = moved.signed_areas()
    if np.any(areas <= 0.0):
        e = int(np.argmin(areas))
        raise MeshTanglingError(e, areas[e])
    return moved


def mesh_quality(mesh):
    """Quality report: min angle (degrees), min area, max aspect ratio.

    Aspect ratio is the longest edge over its own altitude, ``L^2 / (2 A)``.
    """
    p = mesh.nodes
    t = mesh.triangles
    v = [p[t[:, (i + 1) % 3]] - p[t[:, i]] for i in range(3)]
    lengths = np.stack([np.linalg.norm(d, axis=1) for d in v])
    areas = mesh.signed_areas()
    angles = []
    for i in range(3):
        a = -v[(i + 2) % 3]
        b = v[i]
        cosang = np.einsum("ej,ej->e", a, b) / (
            lengths[(i + 2) % 3] * lengths[i]
        )
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    angles = np.stack(angles)
    lmax = lengths.max(axis=0)
    return {
        "min_angle_deg": float(angles.min()),
        "min_area": float(areas.min()),
        "max_aspect": float((lmax**2 / (2.0 * areas)).max()),
    }


# -- plain-text and VTK export ------------------------------------------------

def save_text(mesh, path):
    """Plain-text mesh format: counts, coordinates, triangles, labels."""
    with open(path, "w") as fh:
        fh.write("hdgflow-mesh 1\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for x, y in mesh.nodes:
            fh.write(f"{x!r} {y!r}\n")
        fh.write(f"triangles {mesh.n_elems}\n")
        for (a, b, c), lab in zip(mesh.triangles, mesh.element_labels):
            fh.write(f"{a} {b} {c} {lab}\n")
        bnd = mesh.boundary_facets()
        fh.write(f"facet_labels {len(bnd)}\n")
        for f in bnd:
            a, b = mesh.facets[f]
            fh.write(f"{a} {b} {mesh.facet_labels[f]}\n")


def load_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "hdgflow-mesh":
            raise ValueError(f"{path} is not a mesh file")
        nv = int(fh.readline().split()[1])
        nodes = np.array(
            [[float(v) for v in fh.readline().split()] for _ in range(nv)]
        )
        ne = int(fh.readline().split()[1])
        rows = [[int(v) for v in fh.readline().split()] for _ in range(ne)]
        tris = np.array([r[:3] for r in rows], dtype=np.int64)
        elabels = np.array([r[3] for r in rows], dtype=np.int64)
        nb = int(fh.readline().split()[1])
        blab = {}
        for _ in range(nb):
            a, b, lab = (int(v) for v in fh.readline().split())
            blab[(min(a, b), max(a, b))] = lab

    def boundary_label(mids):
        return np.full(len(mids), DIRICHLET)

    mesh = build_mesh(nodes, tris, boundary_label=boundary_label,
                      region_label=lambda c: elabels)
    for f in mesh.boundary_facets():
        a, b = mesh.facets[f]
        key = (min(a, b), max(a, b))
        if key in blab:
            mesh.facet_labels[f] = blab[key]
    return mesh


def export_vtk(mesh, path, cell_data=None, point_data=None):
    """Legacy-ASCII VTK export of the triangulation plus optional fields.

    ``cell_data``/``point_data`` map names to arrays of shape ``(E,)``,
    ``(E, 2)``, ``(V,)`` or ``(V, 2)``; 2-vectors are padded to 3 components.
    """
    def write_field(fh, name, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in arr:
                fh.write(f"{v:.12g}\n")
        else:
            fh.write(f"VECTORS {name} double\n")
            for row in arr:
                fh.write(f"{row[0]:.12g} {row[1]:.12g} 0\n")

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nhdgflow mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        fh.write(f"CELLS {mesh.n_elems} {4 * mesh.n_elems}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {mesh.n_elems}\n")
        fh.write("5\n" * mesh.n_elems)
        fh.write(f"CELL_DATA {mesh.n_elems}\n")
        write_field(fh, "subdomain", mesh.element_labels)
        if cell_data:
            for name, arr in cell_data.items():
                write_field(fh, name, arr)
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, arr in point_data.items():
                write_field(fh, name, arr)
