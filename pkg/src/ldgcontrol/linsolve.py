"""Sparse storage, block KKT composition, and direct solution.

The coupled first-order optimality system is solved with one sparse LU
factorization per active-set configuration.  Unknown ordering is
(q, y, p, z, u) — state flux, state, adjoint flux, adjoint, control — so a
full-discretization system on m elements and b boundary edges has
6m + 3m + 6m + 3m + 2b rows.  In variational mode the control is not a
DOF block: on inactive quadrature points it is eliminated through the
pointwise projection formula, leaving an 18m system.

Two equivalent solve paths exist.  ``compose_kkt`` + ``direct_solve``
factors the coupled block matrix directly, which is the reference path on
the meshes where it is affordable.  Both flux blocks are mass matrices
that never couple neighbouring elements, so they can also be eliminated
exactly element by element before factoring; ``condense_kkt`` builds that
reduced system, which has one third of the unknowns and — more
importantly — orders of magnitude less LU fill, and is what makes the
deepest reference meshes fit in ordinary desktop memory.  Agreement of
the two paths is part of the test suite.  ``solve_optimality_system``
picks a path by problem size and is the entry point the active-set
iteration uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "TripletBuffer",
    "SingularSystemError",
    "finalize",
    "direct_solve",
    "BlockSystem",
    "compose_kkt",
    "CondensedSystem",
    "condense_kkt",
    "solve_optimality_system",
]

# Above this unknown count the optimality solves eliminate the two flux
# blocks first (exact, element-local) instead of factoring the five-block
# matrix: the flux-coupled factorizations fill in badly enough to exhaust
# desk-scale memory on the deepest reference meshes.
CONDENSE_THRESHOLD = 40_000


class SingularSystemError(RuntimeError):
    """Raised when a direct factorization meets a singular matrix."""


@dataclass
class TripletBuffer:
    """Coordinate-format accumulator for sparse assembly."""

    shape: tuple
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def add(self, i, j, v):
        self.rows.append(int(i))
        self.cols.append(int(j))
        self.vals.append(float(v))

    def extend(self, rows, cols, vals):
        self.rows.extend(np.asarray(rows, dtype=int).ravel())
        self.cols.extend(np.asarray(cols, dtype=int).ravel())
        self.vals.extend(np.asarray(vals, dtype=float).ravel())


def finalize(triplets: TripletBuffer) -> sp.csr_matrix:
    """Compress a triplet buffer to CSR, summing duplicate entries."""
    nr, nc = triplets.shape
    if triplets.rows:
        rows = np.asarray(triplets.rows, dtype=int)
        cols = np.asarray(triplets.cols, dtype=int)
        if rows.size and (rows.min() < 0 or rows.max() >= nr
                          or cols.min() < 0 or cols.max() >= nc):
            raise IndexError("triplet index outside matrix dimensions")
        mat = sp.coo_matrix((triplets.vals, (rows, cols)), shape=(nr, nc)).tocsr()
    else:
        mat = sp.csr_matrix((nr, nc))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def direct_solve(A, b, tol: float = 1e-10, max_refine: int = 3):
    """Solve A x = b by sparse LU with iterative refinement.

    The relative residual is driven below ``tol`` (usually one refinement
    sweep suffices); a singular factorization is reported with the pivot
    position scipy identifies.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError("direct_solve needs a square system matching the right-hand side")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:  # scipy reports 'Factor is exactly singular'
        raise SingularSystemError(f"sparse LU failed: {exc}") from exc
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("sparse LU produced non-finite entries (singular system)")
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b)
    for _ in range(max_refine):
        residual = b - A @ x
        if np.linalg.norm(residual) <= tol * norm_b:
            return x
        x = x + lu.solve(residual)
    residual = np.linalg.norm(b - A @ x) / norm_b
    if residual > tol:
        raise SingularSystemError(
            f"iterative refinement stalled at relative residual {residual:.3e}")
    return x


@dataclass
class BlockSystem:
    """Assembled coupled optimality system with its unknown layout.

    ``slices`` maps block names ('q', 'y', 'p', 'z', and 'u' in full mode)
    to index ranges of the global vector; ``control_dofs`` gives the global
    indices of the control block (empty in variational mode, where the
    control lives at quadrature points and is recovered from p and z).
    """

    matrix: sp.spmatrix
    rhs: np.ndarray
    slices: dict
    mode: str
    control_dofs: np.ndarray

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def split(self, x):
        return {name: x[sl] for name, sl in self.slices.items()}


def _validate_active(active, n_controls, data):
    if isinstance(active, tuple):
        raw_lower, raw_upper = active
    else:
        raw_lower, raw_upper = active.lower, active.upper
    lower = np.asarray(raw_lower, dtype=bool)
    upper = np.asarray(raw_upper, dtype=bool)
    if lower.shape != (n_controls,) or upper.shape != (n_controls,):
        raise ValueError("active-set masks do not match the control unknowns")
    if np.any(lower & upper):
        raise ValueError("a control unknown cannot be active at both bounds")
    if np.any(lower) and not np.isfinite(data.u_lower):
        raise ValueError("lower-active set requires a finite lower bound")
    if np.any(upper) and not np.isfinite(data.u_upper):
        raise ValueError("upper-active set requires a finite upper bound")
    return lower, upper


def compose_kkt(ops, active, data, mode: str = "full") -> BlockSystem:
    """Build the coupled optimality system for the given active sets.

    Full mode rows: the two state equations, the two adjoint equations,
    and per-DOF control rows — the consistent-mass gradient equation on
    inactive DOFs, u pinned to its bound on active DOFs.  Variational
    mode eliminates the control: inactive quadrature points carry
    u = (sqrt(eps) p.n - kappa z)/omega, active points the bound value,
    both substituted into the state equations.
    """
    A, B, C = ops.A, ops.B, ops.C
    M1, M2 = ops.M1, ops.M2
    M_Omega, M_Gamma = ops.M_Omega, ops.M_Gamma
    nW = A.shape[0]
    nV = C.shape[0]
    omega = data.omega

    if mode == "full":
        nU = M_Gamma.shape[0]
        lower, upper = _validate_active(active, nU, data)
        inactive = ~(lower | upper)
        # control rows: D_I (omega M_Gamma u + M1' p + M2' z) + D_A u = D_A u_bound
        D_I = sp.diags(inactive.astype(float))
        D_A = sp.diags((~inactive).astype(float))
        ctrl_p = D_I @ M1.T
        ctrl_z = D_I @ M2.T
        ctrl_u = omega * (D_I @ M_Gamma) + D_A
        bound_vals = np.where(lower, data.u_lower, 0.0) + np.where(upper, data.u_upper, 0.0)
        K = sp.bmat([
            [A,     B,    None,  None,  -M1],
            [-B.T,  C,    None,  None,  -M2],
            [None,  None, A,     -B,    None],
            [None, -M_Omega, B.T, C.T,  None],
            [None,  None, ctrl_p, ctrl_z, ctrl_u],
        ], format="csc")
        rhs = np.concatenate([
            np.zeros(nW), ops.F, np.zeros(nW), -ops.Yd, bound_vals,
        ])
        offs = np.cumsum([0, nW, nV, nW, nV, nU])
        slices = {
            "q": slice(offs[0], offs[1]),
            "y": slice(offs[1], offs[2]),
            "p": slice(offs[2], offs[3]),
            "z": slice(offs[3], offs[4]),
            "u": slice(offs[4], offs[5]),
        }
        control_dofs = np.arange(offs[4], offs[5])
        return BlockSystem(K, rhs, slices, "full", control_dofs)

    if mode == "variational":
        bq = ops.bq
        nq = bq.num_points
        lower, upper = _validate_active(active, nq, data)
        inactive = ~(lower | upper)
        D_I = sp.diags(inactive.astype(float) / omega)
        bound_vals = np.where(lower, data.u_lower, 0.0) + np.where(upper, data.u_upper, 0.0)
        # inactive points: u = (T_pn p - T_kz z)/omega enters both state rows
        G1 = (bq.M1_qp @ D_I @ bq.T_pn).tocsr()
        H1 = (bq.M1_qp @ D_I @ bq.T_kz).tocsr()
        G2 = (bq.M2_qp @ D_I @ bq.T_pn).tocsr()
        H2 = (bq.M2_qp @ D_I @ bq.T_kz).tocsr()
        K = sp.bmat([
            [A,     B,    -G1,   H1],
            [-B.T,  C,    -G2,   H2],
            [None,  None, A,     -B],
            [None, -M_Omega, B.T, C.T],
        ], format="csc")
        rhs = np.concatenate([
            bq.M1_qp @ bound_vals,
            ops.F + bq.M2_qp @ bound_vals,
            np.zeros(nW),
            -ops.Yd,
        ])
        offs = np.cumsum([0, nW, nV, nW, nV])
        slices = {
            "q": slice(offs[0], offs[1]),
            "y": slice(offs[1], offs[2]),
            "p": slice(offs[2], offs[3]),
            "z": slice(offs[3], offs[4]),
        }
        return BlockSystem(K, rhs, slices, "variational", np.array([], dtype=int))

    raise ValueError(f"unknown discretization mode: {mode!r}")


def _flux_block_inverse(ops):
    """Exact inverse of the vector mass block, one 6x6 block per element.

    The flux bilinear form is the plain (weighted) vector L2 inner product,
    so on every element the block is 2*area times the reference-triangle
    linear mass matrix tensored with the 2x2 identity.  Inverting the 3x3
    reference matrix once and scaling gives the sparse global inverse.
    """
    from .spaces import quadrature_rule, tri_basis_values

    mesh = ops.mesh
    nt = mesh.num_elements
    rule = quadrature_rule("triangle", ops.quad_degree)
    lam = tri_basis_values(rule.points)
    mass_ref = (lam.T * rule.weights) @ lam
    minv = np.linalg.inv(mass_ref)
    blk6 = np.kron(minv, np.eye(2))

    idx = 6 * np.arange(nt)[:, None] + np.arange(6)[None, :]
    rows = np.repeat(idx, 6, axis=1).ravel()
    cols = np.tile(idx, (1, 6)).ravel()
    vals = (blk6.ravel()[None, :] / (2.0 * mesh.areas)[:, None]).ravel()
    n = 6 * nt
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _condensation_operators(ops):
    """Element-eliminated operators, cached per assembled operator set.

    Returns (Ainv, AinvB, S, Mt) with S = C + B^T A^-1 B the convection-
    diffusion operator acting on the scalar unknown alone, and
    Mt = M2 + B^T A^-1 M1 the matching condensed control-to-state load.
    """
    cache = getattr(ops, "_condensation", None)
    if cache is not None:
        return cache
    Ainv = _flux_block_inverse(ops)
    AinvB = (Ainv @ ops.B).tocsr()
    S = (ops.C + ops.B.T @ AinvB).tocsr()
    Mt = (ops.M2 + ops.B.T @ (Ainv @ ops.M1)).tocsr()
    cache = (Ainv, AinvB, S, Mt)
    ops._condensation = cache
    return cache


@dataclass
class CondensedSystem:
    """Reduced optimality system after element-local flux elimination.

    ``matrix`` acts on (y, z, u) in full mode and on (y, z) in variational
    mode.  ``recover`` reconstructs the eliminated flux unknowns from a
    reduced solution vector; the reconstruction is exact because the flux
    blocks are block-diagonal mass matrices.
    """

    matrix: sp.csc_matrix
    rhs: np.ndarray
    slices: dict
    mode: str
    ops: object
    aux: dict

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def split(self, x):
        if x.shape != self.rhs.shape:
            raise ValueError("solution vector does not match system size")
        return {name: x[sl].copy() for name, sl in self.slices.items()}

    def recover(self, x):
        """Expand a reduced solution into the (q, y, p, z[, u]) parts."""
        parts = self.split(x)
        Ainv, AinvB, _, _ = _condensation_operators(self.ops)
        y = parts["y"]
        z = parts["z"]
        p = AinvB @ z
        if self.mode == "full":
            q = Ainv @ (self.ops.M1 @ parts["u"]) - AinvB @ y
        else:
            # q = A^-1 (r1 - B y + G1 p - H1 z) with r1 the active-bound load
            resid = self.aux["r1"] - self.ops.B @ y
            resid = resid + self.aux["G1"] @ p - self.aux["H1"] @ z
            q = Ainv @ resid
        parts["q"] = q
        parts["p"] = p
        return parts


def condense_kkt(ops, active, data=None, mode="full"):
    """Build the flux-eliminated optimality system for a given active set.

    Exactly equivalent to ``compose_kkt`` followed by block elimination of
    the two flux rows: the flux blocks are invertible element by element,
    so no approximation is involved.  The reduced matrix couples each
    element only to its distance-<=2 neighbours, which keeps direct
    factorization affordable on meshes where the coupled system is not.
    """
    if data is None:
        data = ops.data
    omega = data.omega
    Ainv, AinvB, S, Mt = _condensation_operators(ops)
    nV = S.shape[0]
    M_Omega = ops.M_Omega

    if mode == "full":
        n_u = ops.M_Gamma.shape[0]
        lower, upper = _validate_active(active, n_u, data)
        inactive = ~(lower | upper)
        D_I = sp.diags(inactive.astype(float))
        D_A = sp.diags((lower | upper).astype(float))
        bound_vals = np.where(lower, data.u_lower, 0.0) + np.where(upper, data.u_upper, 0.0)
        ctrl_z = (D_I @ Mt.T).tocsr()
        ctrl_u = (omega * (D_I @ ops.M_Gamma) + D_A).tocsr()
        R = sp.bmat([
            [S,        None, -Mt],
            [-M_Omega, S.T,  None],
            [None,     ctrl_z, ctrl_u],
        ], format="csc")
        rhs = np.concatenate([ops.F, -ops.Yd, bound_vals])
        offs = np.cumsum([0, nV, nV, n_u])
        slices = {
            "y": slice(offs[0], offs[1]),
            "z": slice(offs[1], offs[2]),
            "u": slice(offs[2], offs[3]),
        }
        return CondensedSystem(R, rhs, slices, "full", ops, {})

    if mode == "variational":
        bq = ops.bq
        nq = bq.num_points
        lower, upper = _validate_active(active, nq, data)
        inactive = ~(lower | upper)
        D_I = sp.diags(inactive.astype(float) / omega)
        bound_vals = np.where(lower, data.u_lower, 0.0) + np.where(upper, data.u_upper, 0.0)
        G1 = (bq.M1_qp @ D_I @ bq.T_pn).tocsr()
        H1 = (bq.M1_qp @ D_I @ bq.T_kz).tocsr()
        G2 = (bq.M2_qp @ D_I @ bq.T_pn).tocsr()
        H2 = (bq.M2_qp @ D_I @ bq.T_kz).tocsr()
        r1 = bq.M1_qp @ bound_vals
        r2 = ops.F + bq.M2_qp @ bound_vals
        # Substituting q = A^-1 (r1 - B y + G1 p - H1 z) and p = A^-1 B z
        # into the scalar state row leaves a two-block system in (y, z).
        Gc = (G2 + ops.B.T @ (Ainv @ G1)).tocsr()
        Hc = (H2 + ops.B.T @ (Ainv @ H1)).tocsr()
        Z_blk = (Hc - Gc @ AinvB).tocsr()
        R = sp.bmat([
            [S,        Z_blk],
            [-M_Omega, S.T],
        ], format="csc")
        rhs = np.concatenate([r2 + ops.B.T @ (Ainv @ r1), -ops.Yd])
        slices = {"y": slice(0, nV), "z": slice(nV, 2 * nV)}
        aux = {"G1": G1, "H1": H1, "r1": r1}
        return CondensedSystem(R, rhs, slices, "variational", ops, aux)

    raise ValueError(f"unknown discretization mode: {mode!r}")


def _coupled_dimension(ops, mode):
    nW = ops.A.shape[0]
    nV = ops.C.shape[0]
    n = 2 * (nW + nV)
    if mode == "full":
        n += ops.M_Gamma.shape[0]
    return n


def solve_optimality_system(ops, active, data=None, mode="full",
                            strategy="auto", tol=1e-10):
    """Solve one active-set linearization of the optimality system.

    strategy
        "monolithic" factors the coupled block matrix, "condensed"
        eliminates the flux blocks first (exact), and "auto" picks
        monolithic below ``CONDENSE_THRESHOLD`` coupled unknowns and
        condensed above it.

    Returns the parts dict with keys q, y, p, z and, in full mode, u.
    """
    if data is None:
        data = ops.data
    if strategy == "auto":
        strategy = ("condensed"
                    if _coupled_dimension(ops, mode) > CONDENSE_THRESHOLD
                    else "monolithic")
    if strategy == "monolithic":
        system = compose_kkt(ops, active, data, mode=mode)
        x = direct_solve(system.matrix, system.rhs, tol=tol)
        return system.split(x)
    if strategy == "condensed":
        system = condense_kkt(ops, active, data=data, mode=mode)
        x = direct_solve(system.matrix, system.rhs, tol=tol)
        return system.recover(x)
    raise ValueError(f"unknown solve strategy: {strategy!r}")
