"""Тесты для конечно-элементной модели."""
import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.linalg import norm as sparse_norm

from pm_robopt.const import *
from pm_robopt.fem import (
    FemError,
    GeometryError,
    Materials,
    Mesh,
    N_MACRO,
    Winding,
    assemble_affine,
    assemble_direct,
    boundary_conditions,
    build_reference_mesh,
    build_slab_mesh,
    check_admissible,
    default_geometry,
    default_materials,
    flux_linkage,
    is_admissible,
    mapped_nodes,
    precompute_affine,
    slot_current_density,
    solve,
    write_mesh_csv,
)


@pytest.fixture(scope="module")
def geom():
    """Шаблон полюса по умолчанию."""
    return default_geometry()


@pytest.fixture(scope="module")
def mesh(geom):
    """Опорная сетка уровня 0."""
    return build_reference_mesh(geom, 0)


@pytest.fixture(scope="module")
def materials(mesh):
    """Материалы по умолчанию."""
    return default_materials(len(mesh.slot_areas))


@pytest.fixture(scope="module")
def system(mesh, geom, materials):
    """Предвычисленная аффинная система."""
    return precompute_affine(mesh, geom, materials)


def _relative_error(K_a, K_b):
    return sparse_norm(K_a - K_b) / sparse_norm(K_b)


def _random_admissible(geom, rng):
    limits = geom.fit_limits
    p1 = rng.uniform(3.0, limits.p1_max - 0.5)
    p3 = rng.uniform(limits.p3_min + 0.1, 8.0)
    p2 = rng.uniform(2.0, limits.p23_max - p3 - 0.1)
    return (p1, p2, p3)


class TestGeometry:
    """Тесты для геометрии полюса."""

    def test_default(self, geom):
        """Тест шаблона по умолчанию."""
        assert geom.p[0] * geom.p[1] == pytest.approx(133.0)
        assert geom.n_poles == 6
        assert is_admissible(geom, geom.p)
        assert is_admissible(geom, geom.reference_p)

    def test_magnet_too_thick(self):
        """Тест магнита толще ротора."""
        with pytest.raises(GeometryError):
            default_geometry(p=(10.0, 25.0, 5.0))

    def test_inadmissible(self, geom):
        """Тест недопустимых параметров магнита."""
        for p in ((25.0, 5.0, 3.0), (10.0, 5.0, 0.5), (10.0, -1.0, 3.0), (10.0, 5.0)):
            with pytest.raises(GeometryError):
                check_admissible(geom, p)

    def test_radii(self):
        """Тест порядка радиусов."""
        with pytest.raises(GeometryError):
            default_geometry(rotor_radius=0.010)

    def test_slot_cuts_window(self):
        """Тест пересечения окна пазом."""
        with pytest.raises(GeometryError):
            build_reference_mesh(default_geometry(slot_fill=0.9), 0)


class TestMesh:
    """Тесты для опорной сетки."""

    def test_level0(self, mesh):
        """Тест инвариантов сетки уровня 0."""
        assert mesh.n_triangles > 0
        assert set(np.unique(mesh.regions)) == {
            REGION_ROTOR, REGION_STATOR, REGION_AIR, REGION_BARRIER, REGION_PM, REGION_SLOT}
        assert len(mesh.slot_areas) == 3
        assert np.all(mesh.slot_areas > 0)
        assert set(np.unique(mesh.blocks)) == set(range(-1, N_MACRO))
        with pytest.raises(ValueError):
            mesh.nodes[0, 0] = 1.0

    def test_refinement(self, mesh, geom):
        """Тест измельчения."""
        fine = build_reference_mesh(geom, 1)
        assert fine.n_triangles >= 4 * mesh.n_triangles

    def test_pm_area(self, mesh, geom):
        """Тест площади магнита в опорной конфигурации."""
        from pm_robopt.fem import element_geometry

        areas, _ = element_geometry(mesh.nodes, mesh.triangles)
        p1, p2, _ = geom.reference_p
        assert areas[mesh.regions == REGION_PM].sum() == pytest.approx(p1 * p2 * 1e-6, rel=1e-12)

    def test_mapped_pm_area(self, mesh, geom):
        """Тест площади магнита после деформации."""
        from pm_robopt.fem import element_geometry

        nodes = mapped_nodes(mesh, geom.p)
        areas, _ = element_geometry(nodes, mesh.triangles)
        assert np.all(areas > 0)
        assert areas[mesh.regions == REGION_PM].sum() == pytest.approx(133e-6, rel=1e-10)
        outside = mesh.blocks < 0
        ids = np.unique(mesh.triangles[outside])
        moved = np.any(nodes[ids] != mesh.nodes[ids], axis=1)
        window_nodes = np.unique(mesh.triangles[~outside])
        assert not np.any(moved & ~np.isin(ids, window_nodes))

    def test_csv(self, mesh, tmp_path):
        """Тест экспорта сетки."""
        nodes_path, tris_path = write_mesh_csv(mesh, tmp_path)
        nodes = open(nodes_path).read().splitlines()
        tris = open(tris_path).read().splitlines()
        assert nodes[0] == "id,x,y,boundary_tag"
        assert tris[0] == "n1,n2,n3,region"
        assert len(nodes) == 1 + mesh.n_nodes
        assert len(tris) == 1 + mesh.n_triangles


class TestAssembly:
    """Тесты для сборки системы."""

    def test_unit_square(self):
        """Тест матрицы жёсткости единичного квадрата."""
        winding = Winding(phases=(), signs=(), turns=1, axes={}, d_axis=0.0, n_poles=1, length=1.0)
        square = Mesh(
            nodes=[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
            triangles=[(0, 1, 2), (0, 2, 3)],
            regions=[REGION_AIR, REGION_AIR],
            slots=[-1, -1],
            blocks=[-1, -1],
            node_tags=[""] * 4,
            winding=winding,
            coupled=False,
        )
        K, rhs = assemble_direct(square, None, Materials(nu={REGION_AIR: 1.0}))
        expected = np.array([
            [1.0, -0.5, 0.0, -0.5],
            [-0.5, 1.0, -0.5, 0.0],
            [0.0, -0.5, 1.0, -0.5],
            [-0.5, 0.0, -0.5, 1.0],
        ])
        np.testing.assert_allclose(K.toarray(), expected, atol=1e-15)
        np.testing.assert_array_equal(rhs, np.zeros(4))

    def test_no_sources(self, mesh, geom, materials):
        """Тест нулевой правой части без источников."""
        _, rhs = assemble_direct(mesh, geom.p, materials.pm_off)
        np.testing.assert_array_equal(rhs, np.zeros(mesh.n_nodes))

    def test_symmetric(self, mesh, geom, materials):
        """Тест симметрии матрицы жёсткости."""
        K, _ = assemble_direct(mesh, geom.p, materials)
        assert sparse_norm(K - K.T) <= 1e-14 * sparse_norm(K)

    def test_affine_reference(self, mesh, geom, system, materials):
        """Тест совпадения в опорной точке."""
        K_a, rhs_a = assemble_affine(system, geom.reference_p)
        K_d, rhs_d = assemble_direct(mesh, geom.reference_p, materials)
        assert _relative_error(K_a, K_d) <= 1e-12
        np.testing.assert_allclose(rhs_a, rhs_d, rtol=0, atol=1e-12 * np.abs(rhs_d).max())

    def test_affine_sweep(self, mesh, geom, system, materials):
        """Тест совпадения для случайных допустимых магнитов."""
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = _random_admissible(geom, rng)
            K_a, rhs_a = assemble_affine(system, p)
            K_d, rhs_d = assemble_direct(mesh, p, materials)
            assert _relative_error(K_a, K_d) <= 1e-10
            assert np.linalg.norm(rhs_a - rhs_d) <= 1e-10 * np.linalg.norm(rhs_d)

    def test_terms_immutable(self, geom, system):
        """Тест неизменности предвычисленных слагаемых."""
        before = system.term_data.copy()
        p = geom.p
        theta_a, _ = system.theta(p)
        assemble_affine(system, (2.0 * p[0] * 0.9, p[1], p[2]))
        theta_b, _ = system.theta((2.0 * p[0] * 0.9, p[1], p[2]))
        assert (system.term_data != before).nnz == 0
        assert not np.allclose(theta_a, theta_b)
        assert system.n_terms == 55

    def test_boundary_weights(self, geom, system):
        """Тест весов на границе допустимой области."""
        limits = geom.fit_limits
        p = (limits.p1_max, limits.p23_max - limits.p3_min, limits.p3_min)
        theta, _ = system.theta(p)
        assert np.all(np.isfinite(theta))
        assert np.max(np.abs(theta)) < 1e4

    def test_inadmissible(self, system):
        """Тест ошибки для недопустимого магнита."""
        with pytest.raises(GeometryError):
            assemble_affine(system, (30.0, 5.0, 3.0))


class TestSolve:
    """Тесты для решения системы."""

    def test_zero_rhs(self, mesh, geom, system):
        """Тест однородной задачи."""
        K, _ = assemble_affine(system, geom.p)
        solution = solve(K, np.zeros(mesh.n_nodes), boundary_conditions(mesh))
        np.testing.assert_array_equal(solution.u, np.zeros(mesh.n_nodes))

    def test_linear_and_antiperiodic(self, mesh, geom, system):
        """Тест линейности и антипериодичности решения."""
        K, rhs = assemble_affine(system, geom.p)
        bc = boundary_conditions(mesh)
        first = solve(K, rhs, bc)
        second = solve(K, 2.0 * rhs, bc)
        assert first.residual <= 1e-10
        np.testing.assert_allclose(second.u, 2.0 * first.u, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(first.u[bc.right], -first.u[bc.left], atol=1e-15)
        np.testing.assert_array_equal(first.u[bc.dirichlet], 0.0)

    def test_pm_slab(self):
        """Тест слоя магнита между слоями воздуха."""
        t_air, t_pm, t_top = 0.004, 0.003, 0.005
        mesh = build_slab_mesh([(t_air, REGION_AIR), (t_pm, REGION_PM), (t_top, REGION_AIR)], refinement=2)
        nu_pm = NU0 / 1.05
        hx = 1.2 * nu_pm
        materials = Materials(nu={REGION_AIR: NU0, REGION_PM: nu_pm}, h_pm=(hx, 0.0))
        K, rhs = assemble_direct(mesh, None, materials)
        solution = solve(K, rhs, boundary_conditions(mesh))

        compliance = t_air / NU0 + t_pm / nu_pm + t_top / NU0
        c = -hx * (t_pm / nu_pm) / compliance

        def analytic(y):
            a = np.minimum(y, t_air) * c / NU0
            a += np.clip(y - t_air, 0.0, t_pm) * (c + hx) / nu_pm
            a += np.clip(y - t_air - t_pm, 0.0, None) * c / NU0
            return a

        expected = analytic(mesh.nodes[:, 1])
        assert np.max(np.abs(solution.u - expected)) <= 0.01 * np.max(np.abs(expected))

    def test_singular(self):
        """Тест вырожденной системы."""
        mesh = build_slab_mesh([(0.004, REGION_AIR)])
        bc = boundary_conditions(mesh)
        K = sparse.csr_matrix((mesh.n_nodes, mesh.n_nodes))
        rhs = np.ones(mesh.n_nodes)
        empty = type(bc)(bc.n_nodes, np.zeros(0, dtype=np.int64))
        with pytest.raises(FemError):
            solve(K, rhs, empty)


class TestFluxLinkage:
    """Тесты для потокосцепления."""

    def test_zero_and_scaling(self, mesh, geom, system):
        """Тест нулевого поля и линейности."""
        assert flux_linkage(np.zeros(mesh.n_nodes), mesh, "u") == 0.0
        K, rhs = assemble_affine(system, geom.p)
        solution = solve(K, rhs, boundary_conditions(mesh))
        psi = flux_linkage(solution, mesh, "v")
        assert flux_linkage(2.0 * solution.u, mesh, "v") == pytest.approx(2.0 * psi, rel=1e-14)

    def test_unknown_phase(self, mesh):
        """Тест неизвестной фазы."""
        with pytest.raises(FemError):
            flux_linkage(np.zeros(mesh.n_nodes), mesh, "x")

    def test_coil_slab(self):
        """Тест потокосцепления катушки в слое."""
        a, b, length = 0.004, 0.007, 0.012
        mesh = build_slab_mesh([(a, REGION_AIR), (b - a, REGION_SLOT), (length - b, REGION_AIR)], refinement=2)
        j = 2e6
        materials = Materials(nu={REGION_AIR: NU0, REGION_SLOT: NU0}, j_src=(j,))
        K, rhs = assemble_direct(mesh, None, materials)
        solution = solve(K, rhs, boundary_conditions(mesh))
        c1 = j * (b - a) * (2 * length - a - b) / (2 * NU0 * length)
        expected = c1 * (a + b) / 2 - j * (b - a) ** 2 / (6 * NU0)
        assert flux_linkage(solution, mesh, "u") == pytest.approx(expected, rel=0.01)

    def test_coil_slab_convergence(self):
        """Тест сходимости потокосцепления катушки по уровням сетки."""
        a, b, length = 0.004, 0.007, 0.012
        j = 2e6
        c1 = j * (b - a) * (2 * length - a - b) / (2 * NU0 * length)
        expected = c1 * (a + b) / 2 - j * (b - a) ** 2 / (6 * NU0)
        materials = Materials(nu={REGION_AIR: NU0, REGION_SLOT: NU0}, j_src=(j,))
        errors = []
        for level in range(4):
            mesh = build_slab_mesh([(a, REGION_AIR), (b - a, REGION_SLOT), (length - b, REGION_AIR)],
                                   refinement=level)
            K, rhs = assemble_direct(mesh, None, materials)
            solution = solve(K, rhs, boundary_conditions(mesh))
            errors.append(abs(flux_linkage(solution, mesh, "u") - expected) / abs(expected))
        assert errors[2] <= 0.01
        # среднее по пазу от линейной интерполяции: ошибка O(h^2)
        for coarse, fine in zip(errors, errors[1:]):
            assert fine < coarse / 3.0

    def test_current_density(self, mesh):
        """Тест плотностей тока пазов."""
        j_src = slot_current_density(mesh, {"u": 2.0})
        winding = mesh.winding
        for s, phase in enumerate(winding.phases):
            if phase == "u":
                assert j_src[s] == pytest.approx(winding.signs[s] * winding.turns * 2.0 / mesh.slot_areas[s])
            else:
                assert j_src[s] == 0.0
