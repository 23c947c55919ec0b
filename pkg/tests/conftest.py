import numpy as np
import pytest

from gmsfem import adapt, cli, fine_fem, mesh, ms_space


@pytest.fixture(scope="session")
def grid44():
    return mesh.build_grids(4, 4)


@pytest.fixture(scope="session")
def unit_field44(grid44):
    return fine_fem.CoefficientField.constant(grid44.nf)


@pytest.fixture(scope="session")
def unit_offline44(grid44, unit_field44):
    """Full offline data for the small unit-coefficient grid."""
    return _offline(grid44, unit_field44)


def _offline(grid, field):
    neighborhoods = mesh.all_neighborhoods(grid)
    pu = ms_space.compute_partition_of_unity(grid, field, neighborhoods)
    weight = ms_space.compute_spectral_weight(grid, field, pu)
    spectra = []
    for neigh in neighborhoods:
        patch_A = fine_fem.patch_stiffness(grid, field, neigh)
        patch_S = fine_fem.patch_weighted_mass(grid, weight, neigh)
        snaps = ms_space.compute_snapshots(neigh, field, patch_matrix=patch_A)
        spectra.append(ms_space.local_spectral_decomposition(neigh, patch_A, patch_S, snaps))
    return {
        "grid": grid,
        "field": field,
        "neighborhoods": neighborhoods,
        "pu": pu,
        "weight": weight,
        "spectra": spectra,
    }


def benchmark_densities(grid):
    f_density = cli.box_fraction(grid, cli.K1_BOX) - cli.box_fraction(grid, cli.K2_BOX)
    g_density = cli.box_fraction(grid, cli.K2_BOX)
    return f_density, g_density


@pytest.fixture(scope="session")
def channel_problem():
    """The benchmark channel medium at contrast 1e4 on the nc=10, r=10 grids."""
    grid = mesh.build_grids(10, 10)
    field = cli.generate_field("channel", 1e4, grid.nf, seed=7)
    f_density, g_density = benchmark_densities(grid)
    return adapt.build_problem(grid, field, f_density, g_density)


@pytest.fixture(scope="session")
def small_problem(grid44, unit_field44):
    f_density, g_density = benchmark_densities(grid44)
    return adapt.build_problem(grid44, unit_field44, f_density, g_density)


def poisson_center_value(terms=120):
    """Series value of the center of the unit-square Poisson problem -Lap(u)=1.

    Independent oracle: u(1/2,1/2) = (16/pi^4) * sum over odd m,n of
    sin(m pi/2) sin(n pi/2) / (m n (m^2 + n^2)).
    """
    total = 0.0
    for m in range(1, 2 * terms, 2):
        sm = (-1.0) ** ((m - 1) // 2)
        for n in range(1, 2 * terms, 2):
            sn = (-1.0) ** ((n - 1) // 2)
            total += sm * sn / (m * n * (m * m + n * n))
    return 16.0 / np.pi**4 * total
