import math

import pytest

from weaves.apps.pde import (
    PdeDomainSpec,
    solve_mediated_pde,
    solve_mediated_pde_on_grid,
    solve_poisson_dirichlet,
)
from weaves.errors import NoConvergenceError


def test_single_domain_solver_exact_on_quadratic():
    # -u'' = 1, u(0)=u(1)=0 -> u = x(1-x)/2; central differences are exact here
    n = 16
    f = [1.0] * (n - 1)
    u = solve_poisson_dirichlet(0.0, 1.0, n, 0.0, 0.0, f)
    for i, v in enumerate(u):
        x = i / n
        assert abs(v - x * (1 - x) / 2) < 1e-12


def test_laplace_interface_is_half():
    left = PdeDomainSpec(0.0, 0.5, 32, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 32, bc=1.0)
    report = solve_mediated_pde(left, right, source=lambda x: 0.0, theta=0.5, tol=1e-12)
    assert abs(report.interface_value - 0.5) < 1e-6
    # whole solution is u(x) = x
    for x, v in zip(report.left_x, report.left):
        assert abs(v - x) < 1e-9
    for x, v in zip(report.right_x, report.right):
        assert abs(v - x) < 1e-9


def test_unit_source_interface_value():
    # -u'' = 1 with zero boundaries: u(x) = x(1-x)/2, interface at 0.5 -> 0.125
    left = PdeDomainSpec(0.0, 0.5, 40, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 40, bc=0.0)
    report = solve_mediated_pde(left, right, source=lambda x: 1.0, theta=0.5, tol=1e-12)
    assert abs(report.interface_value - 0.125) < 1e-6


def test_symmetric_problem_converges_in_one_round_with_full_relaxation():
    left = PdeDomainSpec(0.0, 0.5, 24, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 24, bc=0.0)
    report = solve_mediated_pde(left, right, source=lambda x: 1.0, theta=1.0,
                                tol=1e-12, u_gamma0=0.37)
    assert report.iterations <= 2  # relaxed value lands exactly, second round confirms
    assert abs(report.interface_value - 0.125) < 1e-9


def test_second_order_convergence_on_smooth_problem():
    # -u'' = pi^2 sin(pi x) -> u = sin(pi x); interface away from the midpoint
    exact = lambda x: math.sin(math.pi * x)
    src = lambda x: math.pi**2 * math.sin(math.pi * x)
    errors = []
    for n in (16, 32, 64):
        left = PdeDomainSpec(0.0, 0.4, n, bc=0.0)
        right = PdeDomainSpec(0.4, 1.0, n, bc=0.0)
        report = solve_mediated_pde(left, right, src, theta=0.5, tol=1e-12, max_iters=400)
        err = max(
            max(abs(v - exact(x)) for x, v in zip(report.left_x, report.left)),
            max(abs(v - exact(x)) for x, v in zip(report.right_x, report.right)),
        )
        errors.append(err)
    r1 = errors[0] / errors[1]
    r2 = errors[1] / errors[2]
    assert abs(r1 - 4.0) <= 0.8, errors  # within 20% of the ideal halving ratio
    assert abs(r2 - 4.0) <= 0.8, errors


def test_no_convergence_raises():
    left = PdeDomainSpec(0.0, 0.5, 16, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 16, bc=1.0)
    with pytest.raises(NoConvergenceError):
        solve_mediated_pde(left, right, lambda x: 0.0, theta=0.5, tol=1e-12,
                           max_iters=3, u_gamma0=5.0)


def test_grid_run_matches_local_run():
    left = PdeDomainSpec(0.0, 0.5, 24, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 24, bc=1.0)
    local = solve_mediated_pde(left, right, lambda x: 0.0, theta=0.5, tol=1e-10)
    grid = solve_mediated_pde_on_grid(left, right, lambda x: 0.0, theta=0.5, tol=1e-10)
    assert grid.interface_value == local.interface_value
    assert grid.iterations == local.iterations
    assert grid.left == local.left and grid.right == local.right


def test_migration_mid_run_is_transparent():
    src = lambda x: math.pi**2 * math.sin(math.pi * x)
    left = PdeDomainSpec(0.0, 0.5, 24, bc=0.0)
    right = PdeDomainSpec(0.5, 1.0, 24, bc=0.0)
    plain = solve_mediated_pde_on_grid(left, right, src, theta=0.5, tol=1e-10)
    moved = solve_mediated_pde_on_grid(left, right, src, theta=0.5, tol=1e-10,
                                       migrate_at_tick=5)
    assert moved.interface_value == plain.interface_value
    assert moved.iterations == plain.iterations
    assert moved.left == plain.left
    assert moved.right == plain.right
