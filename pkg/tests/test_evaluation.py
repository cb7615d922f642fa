import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from fedmap.evaluation import (
    PlanMetrics,
    Route,
    RouteSamplingError,
    astar,
    evaluate_routes,
    path_cost,
    path_metrics,
    psnr,
    psnr_arrays,
    sample_routes,
    ssim,
    ssim_arrays,
    validate_path,
)
from fedmap.mapping import GridMap

from oracles import dijkstra_cost, random_grids


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_is_inf():
    m = GridMap(np.random.default_rng(0).random((8, 8)))
    assert psnr(m, m) == math.inf


def test_psnr_constants():
    assert psnr(GridMap(np.zeros((4, 4))), GridMap(np.ones((4, 4)))) == 0.0
    assert psnr(GridMap(np.zeros((4, 4))), GridMap(np.full((4, 4), 0.5))) == pytest.approx(
        10 * math.log10(4), abs=1e-12)
    assert 10 * math.log10(4) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_dim_mismatch():
    with pytest.raises(ValueError):
        psnr(GridMap(np.zeros((4, 4))), GridMap(np.zeros((4, 5))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_psnr_symmetric_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    noise = rng.normal(0, 0.1, a.shape)
    assert psnr_arrays(a, a + noise) == psnr_arrays(a + noise, a)
    values = [psnr_arrays(a, a + s * noise) for s in (0.5, 1.0, 2.0)]
    assert values[0] > values[1] > values[2]


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_self_is_exactly_one():
    x = np.random.default_rng(1).random((32, 40))
    assert ssim_arrays(x, x) == 1.0


def test_ssim_constant_images():
    assert ssim_arrays(np.zeros((16, 16)), np.ones((16, 16))) < 0.01


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim_arrays(np.zeros((10, 20)), np.zeros((10, 20)))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((64, 64))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert abs(ssim_arrays(a, b) - ref) < 1e-4


def test_ssim_symmetric_rgb_reduced():
    rng = np.random.default_rng(2)
    a = GridMap(rng.random((20, 20, 3)))
    b = GridMap(rng.random((20, 20, 3)))
    assert ssim(a, b) == ssim(b, a)
    assert ssim(a, b) == ssim_arrays(a.gray(), b.gray())


# ---------------------------------------------------------------------------
# A*


def test_astar_empty_grid_diagonal():
    res = astar(np.ones((5, 5), bool), (0, 0), (4, 4))
    assert res.found
    assert res.cost == pytest.approx(4 * math.sqrt(2))
    assert dijkstra_cost(np.ones((5, 5), bool), (0, 0), (4, 4)) == pytest.approx(res.cost)


def test_astar_walled_goal():
    occ = np.ones((6, 6), bool)
    occ[3, :] = False
    assert not astar(occ, (0, 0), (5, 5)).found


def test_astar_blocked_endpoints_and_bounds():
    occ = np.ones((4, 4), bool)
    occ[0, 0] = False
    assert not astar(occ, (0, 0), (3, 3)).found
    with pytest.raises(IndexError):
        astar(occ, (0, 0), (4, 4))


def test_astar_no_corner_cutting():
    occ = np.array([[1, 0], [0, 1]], bool)
    assert not astar(occ, (0, 0), (1, 1)).found


def test_astar_matches_dijkstra_random():
    for occ, a, b in random_grids(100):
        res = astar(occ, a, b)
        oracle = dijkstra_cost(occ, a, b)
        if math.isinf(oracle):
            assert not res.found
        else:
            assert res.found
            assert res.cost == pytest.approx(oracle, abs=1e-9)
            assert validate_path(occ, res.cells)
            assert res.cells[0] == a and res.cells[-1] == b
            assert path_cost(res.cells) == pytest.approx(res.cost, abs=1e-9)


def test_astar_deterministic():
    occ = np.ones((20, 20), bool)
    a = astar(occ, (0, 0), (19, 7))
    b = astar(occ, (0, 0), (19, 7))
    assert a.cells == b.cells


def test_validator_rejects_bad_paths():
    occ = np.ones((4, 4), bool)
    assert not validate_path(occ, [(0, 0), (0, 2)])
    occ[0, 1] = False
    assert not validate_path(occ, [(0, 0), (0, 1)])
    assert not validate_path(np.array([[1, 0], [0, 1]], bool), [(0, 0), (1, 1)])


# ---------------------------------------------------------------------------
# routes and plan metrics


def test_sample_routes_open_map():
    occ = np.ones((50, 50), bool)
    routes = sample_routes(occ, 75, seed=1)
    assert len(routes) == 75
    diag = math.hypot(50, 50)
    for r in routes:
        assert astar(occ, r.start, r.goal).found
        assert math.dist(r.start, r.goal) >= 0.1 * diag
    assert routes == sample_routes(occ, 75, seed=1)
    assert routes != sample_routes(occ, 75, seed=2)


def test_sample_routes_reachable_only():
    occ = np.ones((40, 40), bool)
    occ[:, 20] = False
    for r in sample_routes(occ, 30, seed=0):
        assert (r.start[1] < 20) == (r.goal[1] < 20)


def test_sample_routes_cap():
    occ = np.zeros((30, 30), bool)
    occ[0, 0] = occ[0, 1] = True
    with pytest.raises(RouteSamplingError, match="0 of 5"):
        sample_routes(occ, 5, seed=0)


def test_plan_metrics_perfect_map():
    occ = np.ones((30, 30), bool)
    occ[5:25, 15] = False
    routes = sample_routes(occ, 20, seed=0)
    m = path_metrics(occ, occ, routes)
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)


def test_plan_metrics_all_traversable_learned():
    gt = np.ones((40, 40), bool)
    gt[:37, 20] = False  # wall with a gap near the bottom edge
    routes = [Route((r, 2), (r, 37)) for r in range(0, 30, 3)]
    m = path_metrics(gt, np.ones_like(gt), routes)
    assert m.fp > m.tp
    assert m.precision < 1


def test_plan_metrics_all_blocked():
    gt = np.ones((20, 20), bool)
    routes = sample_routes(gt, 10, seed=0)
    m = path_metrics(gt, np.zeros_like(gt), routes)
    assert m.recall == 0 and m.f1 == 0 and m.fn == 10


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_zero_iff_no_tp(tp, fp, fn):
    m = PlanMetrics.from_counts(tp, fp, fn)
    assert (m.f1 == 0) == (tp == 0)
    assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1


def test_route_outcomes_costs():
    gt = np.ones((10, 10), bool)
    out = evaluate_routes(gt, gt, [Route((0, 0), (0, 9))])
    assert out[0].found and out[0].gt_valid
    assert out[0].cost_learned == out[0].cost_gt == 9.0
