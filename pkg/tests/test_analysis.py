"""Tests of error norms, manufactured cases, and nested-mesh comparison."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldgcontrol.analysis import (
    ErrorReport,
    ErrorReportRow,
    NestedLocator,
    check_strong_form,
    convergence_rate,
    error_flux_normal_boundary,
    error_l2_boundary,
    error_l2_domain,
    example2_data,
    example3_data,
    example3_domain,
    example3_mesh,
    galerkin_diagnostics,
    least_squares_rate,
    manufactured_example1,
    reference_compare,
    unit_square_sequence,
)
from ldgcontrol.control import pdas_solve
from ldgcontrol.geometry import build_unit_square_mesh, refine_uniform
from ldgcontrol.ldg import assemble_forms
from ldgcontrol.spaces import (
    DiscreteField,
    build_spaces,
    eval_field,
    l2_project,
)


# ------------------------------------------------------------ error norms


def test_domain_error_of_projection_is_tiny():
    mesh = build_unit_square_mesh(3)
    spaces = build_spaces(mesh)
    lin = lambda x: 2.0 * x[0] - 0.5 * x[1] + 1.0
    field = l2_project(lin, spaces.potential)
    assert error_l2_domain(field, lin) < 1e-12


def test_domain_error_zero_field_vs_constant():
    mesh = build_unit_square_mesh(2)
    spaces = build_spaces(mesh)
    zero = DiscreteField(spaces.potential, np.zeros(spaces.potential.num_dofs))
    assert error_l2_domain(zero, lambda x: 1.0) == pytest.approx(1.0, rel=1e-12)


def test_domain_error_zero_field_vs_coordinate():
    # || x_1 ||_{L2} over the unit square is 1/sqrt(3)
    mesh = build_unit_square_mesh(2)
    spaces = build_spaces(mesh)
    zero = DiscreteField(spaces.potential, np.zeros(spaces.potential.num_dofs))
    err = error_l2_domain(zero, lambda x: x[0])
    assert err == pytest.approx(1.0 / np.sqrt(3.0), rel=1e-12)


def test_domain_error_vector_field():
    mesh = build_unit_square_mesh(2)
    spaces = build_spaces(mesh)
    zero = DiscreteField(spaces.flux, np.zeros(spaces.flux.num_dofs))
    err = error_l2_domain(zero, lambda x: (1.0, 0.0))
    assert err == pytest.approx(1.0, rel=1e-12)


def test_boundary_error_constant_mismatch():
    # perimeter of the unit square is 4, so the gap to 1 has norm 2
    mesh = build_unit_square_mesh(3)
    spaces = build_spaces(mesh)
    zero = DiscreteField(spaces.control, np.zeros(spaces.control.num_dofs))
    assert error_l2_boundary(zero, lambda x: 1.0, mesh=mesh) == pytest.approx(2.0, rel=1e-12)


def test_boundary_error_of_scalar_trace():
    mesh = build_unit_square_mesh(3)
    spaces = build_spaces(mesh)
    lin = lambda x: x[0] + 3.0 * x[1]
    field = l2_project(lin, spaces.potential)
    assert error_l2_boundary(field, lin, mesh=mesh) < 1e-12


def test_flux_normal_error_constant_gradient():
    # zero discrete flux against grad z = (1, 0): the normal component is
    # +-1 on the vertical sides and 0 on the horizontal ones
    mesh = build_unit_square_mesh(2)
    spaces = build_spaces(mesh)
    zero = DiscreteField(spaces.flux, np.zeros(spaces.flux.num_dofs))
    err = error_flux_normal_boundary(zero, lambda x: (1.0, 0.0), 1.0, mesh=mesh)
    assert err == pytest.approx(np.sqrt(2.0), rel=1e-12)


# ------------------------------------------------------------------ rates


def test_convergence_rate_values():
    assert convergence_rate(0.04, 0.02) == pytest.approx(1.0)
    assert convergence_rate(1.64e-2, 3.73e-3) == pytest.approx(2.14, abs=0.01)
    assert convergence_rate(0.5, 0.5) == pytest.approx(0.0, abs=1e-14)


def test_convergence_rate_rejects_nonpositive():
    with pytest.raises(ValueError):
        convergence_rate(0.0, 1.0)
    with pytest.raises(ValueError):
        convergence_rate(1.0, -2.0)


@given(st.floats(1e-8, 1e3), st.floats(1e-8, 1e3), st.floats(1e-8, 1e3))
@settings(max_examples=50, deadline=None)
def test_convergence_rate_additive_over_levels(a, b, c):
    total = convergence_rate(a, c)
    split = convergence_rate(a, b) + convergence_rate(b, c)
    assert split == pytest.approx(total, abs=1e-10 * max(1.0, abs(total)))


def test_least_squares_rate_recovers_power():
    errors = [0.5 * 0.5 ** (1.7 * k) for k in range(4)]
    assert least_squares_rate(errors) == pytest.approx(1.7, abs=1e-12)
    two = [0.3, 0.3 / 2.0**1.1]
    assert least_squares_rate(two) == pytest.approx(convergence_rate(*two), abs=1e-12)


# ------------------------------------------------------- manufactured case


def test_example1_satisfies_strong_form():
    case = manufactured_example1()
    res_state, res_adjoint = check_strong_form(case, num_points=200, seed=0)
    assert res_state < 1e-5
    assert res_adjoint < 1e-5


def test_example1_small_diffusion_strong_form():
    case = manufactured_example1(epsilon=1e-6)
    res_state, res_adjoint = check_strong_form(case, num_points=200, seed=1)
    assert res_state < 1e-5
    assert res_adjoint < 1e-5


def test_manufactured_validation_rejects_bad_adjoint():
    case = manufactured_example1()
    with pytest.raises(ValueError, match="vanish"):
        dataclasses.replace(case, z=lambda x: case.z(x) + 0.05)


def test_manufactured_validation_rejects_broken_optimality():
    case = manufactured_example1()
    with pytest.raises(ValueError, match="optimality"):
        dataclasses.replace(case, u=lambda x: case.u(x) + 0.1)


def test_problem_data_carries_edge_conventions():
    case = manufactured_example1(epsilon=0.25, omega=2.0)
    data = case.problem_data()
    assert data.epsilon == 0.25 and data.omega == 2.0
    assert data.c12_direction == tuple(case.beta)
    assert data.c12_tie == 0.0


# ------------------------------------------------------------ example data


def test_example2_data_facts():
    data = example2_data()
    assert (data.u_lower, data.u_upper) == (0.0, 0.2)
    assert data.f_fun()(np.array([0.3, 0.7])) == 0.0
    yd = data.y_desired_fun()
    assert yd(np.array([1.0, 1.0])) == pytest.approx(2.0 ** (-1.0 / 3.0))
    assert data.beta == (1.0, 1.0) and data.alpha == 1.0


def test_example3_domain_and_meshes():
    domain = example3_domain()
    assert domain.vertices.shape == (4, 2)
    assert domain.vertices[3, 0] == pytest.approx(-np.sqrt(3.0))
    for level, count in ((0, 3), (1, 12), (2, 48)):
        assert example3_mesh(level).num_elements == count
    assert example3_mesh(1, coarse="diag2").num_elements == 8


def test_example3_data_facts():
    data = example3_data()
    yd = data.y_desired_fun()
    assert yd(np.array([0.5, 0.2])) == -1.0
    assert yd(np.array([0.5, 0.8])) == 1.0
    assert data.u_lower == 0.0 and not np.isfinite(data.u_upper)
    assert data.beta == (1.0, 0.0) and data.alpha == 2.0


# ---------------------------------------------------------- nested meshes


def test_locator_follows_refinement_chain():
    coarse = build_unit_square_mesh(3)
    fine = refine_uniform(refine_uniform(coarse))
    locator = NestedLocator(coarse, fine)
    spaces_f = build_spaces(fine)
    lin = lambda x: 1.0 + 2.0 * x[0] - x[1]
    field = l2_project(lin, spaces_f.potential)
    rng = np.random.default_rng(2)
    for t in range(0, coarse.num_elements, 4):
        tri = coarse.vertices[coarse.triangles[t]]
        lam = rng.dirichlet(np.ones(3))
        x = lam @ tri
        tf = locator.locate(t, x)
        assert abs(eval_field(field, tf, x) - lin(x)) < 1e-12


def test_locator_boundary_parametrization_is_geometric():
    coarse = build_unit_square_mesh(2)
    fine = refine_uniform(coarse)
    locator = NestedLocator(coarse, fine)
    for e in coarse.boundary_edges:
        a, b = coarse.vertices[coarse.edges[e]]
        for s in (0.1, 0.45, 0.8):
            f, sf = locator.locate_boundary(int(e), s)
            fa, fb = fine.vertices[fine.edges[f]]
            x_c = a + s * (b - a)
            x_f = fa + sf * (fb - fa)
            assert np.abs(x_c - x_f).max() < 1e-12


def test_locator_rejects_unrelated_meshes():
    with pytest.raises(ValueError):
        NestedLocator(build_unit_square_mesh(2), build_unit_square_mesh(4))


class _ProlongedReference:
    """Coarse solution expressed exactly on a refined mesh (test double)."""

    def __init__(self, coarse_sol, fine_mesh, table):
        self.mesh = fine_mesh
        spaces_f = build_spaces(fine_mesh)
        self.y = self._prolong_scalar(coarse_sol.y, spaces_f.potential)
        self.z = self._prolong_scalar(coarse_sol.z, spaces_f.potential)
        self.p = self._prolong_vector(coarse_sol.p, spaces_f.flux)
        self._coarse = coarse_sol
        self._parent_edge = {f: (e, s0, s1)
                             for e, entries in table.items()
                             for s0, s1, f in entries}

    def _prolong_scalar(self, field, dofmap):
        mesh = dofmap.mesh
        coeff = np.empty(dofmap.num_dofs)
        for t in range(mesh.num_elements):
            parent = t // 4
            for i, v in enumerate(mesh.triangles[t]):
                coeff[3 * t + i] = eval_field(field, parent, mesh.vertices[v], tol=1e-9)
        return DiscreteField(dofmap, coeff)

    def _prolong_vector(self, field, dofmap):
        mesh = dofmap.mesh
        coeff = np.empty(dofmap.num_dofs)
        for t in range(mesh.num_elements):
            parent = t // 4
            for i, v in enumerate(mesh.triangles[t]):
                val = eval_field(field, parent, mesh.vertices[v], tol=1e-9)
                coeff[6 * t + 2 * i] = val[0]
                coeff[6 * t + 2 * i + 1] = val[1]
        return DiscreteField(dofmap, coeff)

    def control_on_edge(self, edge_id, s):
        e, s0, s1 = self._parent_edge[int(edge_id)]
        return self._coarse.control_on_edge(e, s0 + np.asarray(s) * (s1 - s0))


def test_reference_compare_exact_embedding_gives_zero():
    # prolonging a solution onto the refined mesh must produce a zero
    # error row: this pins down the locator and quadrature plumbing
    case = manufactured_example1()
    mesh = build_unit_square_mesh(3)
    ops = assemble_forms(mesh, build_spaces(mesh), case.problem_data())
    sol = pdas_solve(ops, mode="full")
    fine = refine_uniform(mesh)
    table = NestedLocator(mesh, fine)._boundary_table
    ref = _ProlongedReference(sol, fine, table)
    row = reference_compare(sol, ref)
    assert row.err_y < 1e-10
    assert row.err_u < 1e-10
    assert row.err_z < 1e-10
    assert row.err_pn < 1e-10


def test_reference_compare_detects_known_offset():
    # shifting the reference state by a constant must surface as exactly
    # that constant in the domain column and leave the others untouched
    case = manufactured_example1()
    mesh = build_unit_square_mesh(3)
    ops = assemble_forms(mesh, build_spaces(mesh), case.problem_data())
    sol = pdas_solve(ops, mode="full")
    fine = refine_uniform(mesh)
    table = NestedLocator(mesh, fine)._boundary_table
    ref = _ProlongedReference(sol, fine, table)
    ref.y = DiscreteField(ref.y.dofmap, ref.y.coefficients + 0.25)
    row = reference_compare(sol, ref)
    assert row.err_y == pytest.approx(0.25, rel=1e-10)
    assert row.err_u < 1e-10 and row.err_z < 1e-10 and row.err_pn < 1e-10


# ----------------------------------------------------- gap diagnostics


def test_galerkin_diagnostics_terms():
    case = manufactured_example1()
    mesh = build_unit_square_mesh(4)
    ops = assemble_forms(mesh, build_spaces(mesh), case.problem_data())
    diag = galerkin_diagnostics(case, mesh, ops)
    for term in (diag.err_y_state, diag.err_pn_adjoint, diag.err_z_adjoint,
                 diag.err_quasi_interp):
        assert np.isfinite(term) and term > 0.0
    expected = (diag.err_y_state**2 + diag.epsilon * diag.err_pn_adjoint**2
                + diag.weighted_z2)
    assert diag.bound_rhs == pytest.approx(expected, rel=1e-15)


# ---------------------------------------------------------------- report


def test_error_report_rates_and_order():
    report = ErrorReport()
    report.add_row(ErrorReportRow(32, 0.35, 4e-2, 1e-1, 2e-2, 3e-1))
    report.add_row(ErrorReportRow(128, 0.17, 1e-2, 5e-2, 5e-3, 1.5e-1))
    assert len(report) == 2
    rates = report.rates("err_y")
    assert rates[0] is None
    assert rates[1] == pytest.approx(2.0)
    assert np.allclose(report.column("err_u"), [1e-1, 5e-2])
    with pytest.raises(ValueError):
        report.add_row(ErrorReportRow(128, 0.17, 1e-2, 5e-2, 5e-3, 1.5e-1))


def test_unit_square_sequence_is_nested():
    meshes = unit_square_sequence(3, base_n=2)
    assert [m.num_elements for m in meshes] == [8, 32, 128]
    assert meshes[1].parent_mesh is meshes[0]
    assert meshes[2].parent_mesh is meshes[1]
