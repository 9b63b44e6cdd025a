"""Discontinuous piecewise-linear finite element spaces and quadrature.

Three spaces are provided on a triangulation with m elements and b boundary
edges:

* scalar-element: discontinuous P1 scalars, 3 nodal values per triangle
  (3m degrees of freedom),
* vector-element: discontinuous P1 2-vectors, 6 values per triangle (6m),
* boundary-edge: discontinuous P1 scalars on boundary edges, 2 nodal values
  per edge (2b), used for boundary controls.

All local bases are nodal (vertex values), which keeps traces, jumps and
active-set logic on controls straightforward.  Quadrature rules of
exactness degree up to 6 are tabulated for the reference triangle and
generated with Gauss-Legendre nodes on the reference edge [0, 1].
"""

from __future__ import annotations

import numpy as np

from .geometry import Mesh

__all__ = [
    "DofMap",
    "DiscreteField",
    "QuadratureRule",
    "build_dof_map",
    "SpaceSet",
    "build_spaces",
    "quadrature_rule",
    "l2_project",
    "eval_field",
    "trace_on_edge",
    "element_gradients",
    "write_vtk",
]

SCALAR = "scalar-element"
VECTOR = "vector-element"
BOUNDARY = "boundary-edge"

_MAX_DEGREE = 6

# Symmetric positive-weight rules on the reference triangle (0,0)-(1,0)-(0,1),
# listed as (points, weights) with weights summing to the reference area 1/2.
# The degree-3 slot reuses the 6-point degree-4 rule: the classical 4-point
# degree-3 rule has a negative centroid weight, which we exclude so that all
# rules can serve as positive inner-product weights.


def _perm3(a):
    return [(a, a), (1.0 - 2.0 * a, a), (a, 1.0 - 2.0 * a)]


def _perm_pair(a, b):
    c = 1.0 - a - b
    return [(a, b), (b, a), (a, c), (c, a), (b, c), (c, b)]


def _triangle_rules():
    rules = {}
    rules[1] = (np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]))
    rules[2] = (
        np.array(_perm3(1.0 / 6.0)),
        np.full(3, 1.0 / 6.0),
    )
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    rules[4] = (
        np.array(_perm3(a1) + _perm3(a2)),
        0.5 * np.array([w1] * 3 + [w2] * 3),
    )
    rules[3] = rules[4]
    a1, w1 = 0.470142064105115, 0.132394152788506
    a2, w2 = 0.101286507323456, 0.125939180544827
    rules[5] = (
        np.array([(1.0 / 3.0, 1.0 / 3.0)] + _perm3(a1) + _perm3(a2)),
        0.5 * np.array([0.225] + [w1] * 3 + [w2] * 3),
    )
    a1, w1 = 0.249286745170910, 0.116786275726379
    a2, w2 = 0.063089014491502, 0.050844906370207
    a3, b3, w3 = 0.310352451033785, 0.053145049844816, 0.082851075618374
    rules[6] = (
        np.array(_perm3(a1) + _perm3(a2) + _perm_pair(a3, b3)),
        0.5 * np.array([w1] * 3 + [w2] * 3 + [w3] * 6),
    )
    return rules


_TRIANGLE_RULES = _triangle_rules()


class QuadratureRule:
    """Reference-domain quadrature rule.

    Attributes:
        entity : "triangle" (reference triangle, measure 1/2) or "edge"
            (unit interval, measure 1).
        points : (k, 2) or (k,) reference coordinates.
        weights : (k,) positive weights summing to the reference measure.
        degree : highest polynomial degree integrated exactly.
    """

    def __init__(self, entity, points, weights, degree):
        self.entity = entity
        self.points = points
        self.weights = weights
        self.degree = degree


def quadrature_rule(entity: str, degree: int) -> QuadratureRule:
    """Return a rule exact at least to ``degree`` (supported: 1..6)."""
    if not 1 <= degree <= _MAX_DEGREE:
        raise ValueError(f"quadrature degree {degree} unsupported (need 1..{_MAX_DEGREE})")
    if entity == "triangle":
        pts, w = _TRIANGLE_RULES[degree]
        actual = 4 if degree == 3 else degree
        return QuadratureRule(entity, pts.copy(), w.copy(), actual)
    if entity == "edge":
        npts = (degree + 2) // 2
        x, w = np.polynomial.legendre.leggauss(npts)
        # map from [-1, 1] to [0, 1]
        return QuadratureRule(entity, 0.5 * (x + 1.0), 0.5 * w, 2 * npts - 1)
    raise ValueError(f"unknown quadrature entity {entity!r}")


def tri_basis_values(points) -> np.ndarray:
    """Nodal P1 basis (barycentric coordinates) at reference points (k, 2)."""
    points = np.atleast_2d(points)
    return np.column_stack([1.0 - points[:, 0] - points[:, 1], points[:, 0], points[:, 1]])


def edge_basis_values(s) -> np.ndarray:
    """Nodal P1 basis on the reference edge at parameters s in [0, 1]."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return np.column_stack([1.0 - s, s])


def element_gradients(mesh: Mesh) -> np.ndarray:
    """Physical gradients of the three nodal basis functions, (nt, 3, 2).

    The gradient of the nodal function of vertex i is the (constant) vector
    rot90(opposite edge) / (2 area).
    """
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    grads = np.empty((mesh.num_elements, 3, 2))
    for i in range(3):
        e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
        grads[:, i, 0] = -e[:, 1]
        grads[:, i, 1] = e[:, 0]
    grads /= (2.0 * mesh.areas)[:, None, None]
    return grads


def physical_points(mesh: Mesh, ref_points) -> np.ndarray:
    """Map reference triangle points (k, 2) into every element, (nt, k, 2)."""
    lam = tri_basis_values(ref_points)  # (k, 3)
    return np.einsum("kj,tjd->tkd", lam, mesh.vertices[mesh.triangles])


class DofMap:
    """Degree-of-freedom layout of one of the three discrete spaces.

    Ordering is deterministic: entity (element or boundary edge) index
    major, local node minor; vector fields interleave the two components
    per node.

    Attributes:
        kind : one of "scalar-element", "vector-element", "boundary-edge".
        mesh : the underlying Mesh.
        num_dofs : total degree-of-freedom count.
        boundary_index : for boundary-edge maps, array mapping a global edge
            id to its compact boundary position (or -1).
    """

    def __init__(self, mesh: Mesh, kind: str):
        if kind not in (SCALAR, VECTOR, BOUNDARY):
            raise ValueError(f"unknown space kind {kind!r}")
        self.kind = kind
        self.mesh = mesh
        if kind == SCALAR:
            self.num_dofs = 3 * mesh.num_elements
        elif kind == VECTOR:
            self.num_dofs = 6 * mesh.num_elements
        else:
            self.num_dofs = 2 * len(mesh.boundary_edges)
        self.boundary_index = None
        if kind == BOUNDARY:
            self.boundary_index = np.full(mesh.num_edges, -1, dtype=np.int64)
            self.boundary_index[mesh.boundary_edges] = np.arange(len(mesh.boundary_edges))

    def element_dofs(self, t: int) -> np.ndarray:
        if self.kind == SCALAR:
            return 3 * t + np.arange(3)
        if self.kind == VECTOR:
            return 6 * t + np.arange(6)
        raise ValueError("boundary-edge maps have no element dofs")

    def edge_dofs(self, edge_id: int) -> np.ndarray:
        if self.kind != BOUNDARY:
            raise ValueError("edge dofs exist only for the boundary-edge space")
        b = self.boundary_index[edge_id]
        if b < 0:
            raise ValueError(f"edge {edge_id} is not a boundary edge")
        return 2 * b + np.arange(2)


def build_dof_map(mesh: Mesh, kind: str) -> DofMap:
    return DofMap(mesh, kind)


class SpaceSet:
    """The three discrete spaces of the mixed scheme on one mesh:
    flux space (vector), potential space (scalar), control space (boundary)."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.flux = DofMap(mesh, VECTOR)
        self.potential = DofMap(mesh, SCALAR)
        self.control = DofMap(mesh, BOUNDARY)


def build_spaces(mesh: Mesh) -> SpaceSet:
    return SpaceSet(mesh)


class DiscreteField:
    """Coefficient vector over a DofMap."""

    def __init__(self, dofmap: DofMap, coefficients=None):
        self.dofmap = dofmap
        if coefficients is None:
            coefficients = np.zeros(dofmap.num_dofs)
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (dofmap.num_dofs,):
            raise ValueError(
                f"coefficient length {coefficients.shape} does not match "
                f"{dofmap.num_dofs} dofs"
            )
        self.coefficients = coefficients

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.dofmap, self.coefficients.copy())


def l2_project(f, dofmap: DofMap, mesh: Mesh = None, degree: int = 4) -> DiscreteField:
    """Element-by-element (or edge-by-edge) L2 projection onto the space.

    ``f`` is a pointwise function of the physical coordinate; for the vector
    space it must return a 2-vector.  Globally polynomial P1 data is
    reproduced exactly.
    """
    mesh = mesh if mesh is not None else dofmap.mesh
    out = np.zeros(dofmap.num_dofs)
    if dofmap.kind == BOUNDARY:
        rule = quadrature_rule("edge", degree)
        phi = edge_basis_values(rule.points)  # (k, 2)
        M = (phi.T * rule.weights) @ phi
        for e in mesh.boundary_edges:
            a, b = mesh.vertices[mesh.edges[e]]
            pts = a[None, :] + rule.points[:, None] * (b - a)[None, :]
            fvals = np.array([f(p) for p in pts], dtype=float)
            rhs = phi.T @ (rule.weights * fvals)
            out[dofmap.edge_dofs(e)] = np.linalg.solve(M, rhs)
        return DiscreteField(dofmap, out)

    rule = quadrature_rule("triangle", degree)
    lam = tri_basis_values(rule.points)  # (k, 3)
    Mref = (lam.T * rule.weights) @ lam  # reference mass / (2 area scaling)
    pts = physical_points(mesh, rule.points)  # (nt, k, 2)
    for t in range(mesh.num_elements):
        fvals = np.array([f(p) for p in pts[t]], dtype=float)
        if dofmap.kind == SCALAR:
            rhs = lam.T @ (rule.weights * fvals)
            out[3 * t : 3 * t + 3] = np.linalg.solve(Mref, rhs)
        else:
            for c in range(2):
                rhs = lam.T @ (rule.weights * fvals[:, c])
                out[6 * t + c : 6 * t + 6 : 2] = np.linalg.solve(Mref, rhs)
    return DiscreteField(dofmap, out)


def eval_field(field: DiscreteField, element_id: int, point, tol: float = 1e-10):
    """Evaluate an element field at a physical point inside the element."""
    dofmap = field.dofmap
    if dofmap.kind == BOUNDARY:
        raise ValueError("use trace_on_edge for boundary-edge fields")
    mesh = dofmap.mesh
    tri = mesh.triangles[element_id]
    p0, p1, p2 = mesh.vertices[tri]
    T = np.column_stack([p1 - p0, p2 - p0])
    xy = np.linalg.solve(T, np.asarray(point, dtype=float) - p0)
    lam = np.array([1.0 - xy[0] - xy[1], xy[0], xy[1]])
    if np.any(lam < -tol) or np.any(lam > 1.0 + tol):
        raise ValueError(f"point {point} lies outside element {element_id}")
    if dofmap.kind == SCALAR:
        return float(lam @ field.coefficients[3 * element_id : 3 * element_id + 3])
    coeff = field.coefficients[6 * element_id : 6 * element_id + 6].reshape(3, 2)
    return lam @ coeff


def trace_on_edge(field: DiscreteField, edge_id: int, side: int, s):
    """Edge trace of a field at parameters s along the stored edge direction.

    ``side`` selects the first (0) or second (1) adjacent element; boundary
    edges only have side 0.  Both sides are parameterized by the same
    physical points, so jumps and averages can be formed directly.  For
    boundary-edge fields the single stored polynomial is returned.
    """
    dofmap = field.dofmap
    mesh = dofmap.mesh
    phi = edge_basis_values(s)  # (k, 2)
    if dofmap.kind == BOUNDARY:
        if side != 0:
            raise ValueError("boundary-edge fields have a single side")
        dofs = dofmap.edge_dofs(edge_id)
        vals = phi @ field.coefficients[dofs]
    else:
        t = mesh.edge_elems[edge_id, side]
        if t == -1:
            raise ValueError(f"edge {edge_id} has no side {side}")
        la, lb = mesh.edge_local[edge_id, side]
        if dofmap.kind == SCALAR:
            c = field.coefficients[3 * t + np.array([la, lb])]
            vals = phi @ c
        else:
            c = field.coefficients[6 * t : 6 * t + 6].reshape(3, 2)
            vals = phi @ c[[la, lb]]
    return vals[0] if np.isscalar(s) or np.ndim(s) == 0 else vals


def write_vtk(path, mesh: Mesh, fields: dict) -> None:
    """Write element fields to a legacy-ASCII VTK unstructured grid.

    Vertices are replicated per element so each cell carries its own P1
    data; scalar fields emit SCALARS arrays, vector fields VECTORS with a
    zero third component.
    """
    nt = mesh.num_elements
    pts = mesh.vertices[mesh.triangles].reshape(-1, 2)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("piecewise linear element data\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {3 * nt} double\n")
        for x, y in pts:
            fh.write(f"{x:.16e} {y:.16e} 0.0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for t in range(nt):
            fh.write(f"3 {3 * t} {3 * t + 1} {3 * t + 2}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"POINT_DATA {3 * nt}\n")
        for name, field in fields.items():
            if field.dofmap.kind == SCALAR:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in field.coefficients:
                    fh.write(f"{v:.16e}\n")
            elif field.dofmap.kind == VECTOR:
                fh.write(f"VECTORS {name} double\n")
                comps = field.coefficients.reshape(-1, 2)
                for vx, vy in comps:
                    fh.write(f"{vx:.16e} {vy:.16e} 0.0\n")
            else:
                raise ValueError("boundary-edge fields are not cell data")
