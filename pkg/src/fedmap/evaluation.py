"""Map-quality metrics (PSNR, SSIM) and A* route evaluation."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from fedmap.mapping import GridMap
from fedmap.seeding import substream

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# image metrics


def psnr_arrays(a, b, max_val: float = 1.0) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def psnr(a: GridMap, b: GridMap, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical maps."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"map shapes differ: {a.values.shape} vs {b.values.shape}")
    return psnr_arrays(a.values, b.values, max_val)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_arrays(x, y, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (population
    statistics, ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"expected two equal 2D arrays, got {x.shape} and {y.shape}")
    if min(x.shape) < win_size:
        raise ValueError(f"image {x.shape} smaller than {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    pad = win_size // 2

    def blur(img):
        out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
        out = ndimage.correlate1d(out, w, axis=1, mode="reflect")
        return out[pad:-pad, pad:-pad]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ux, uy = blur(x), blur(y)
    uxx, uyy, uxy = blur(x * x), blur(y * y), blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a: GridMap, b: GridMap) -> float:
    """Structural similarity of the single-channel (gray) views of two maps."""
    if a.shape != b.shape:
        raise ValueError(f"map dims differ: {a.shape} vs {b.shape}")
    return ssim_arrays(a.gray(), b.gray())


# ---------------------------------------------------------------------------
# planning

Cell = tuple[int, int]  # (row, col)

_MOVES_4 = ((-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0))
_MOVES_8 = _MOVES_4 + ((-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2))


@dataclass(frozen=True)
class Route:
    start: Cell
    goal: Cell


@dataclass
class PathResult:
    found: bool
    cells: list[Cell] = field(default_factory=list)
    cost: float = math.inf


def _heuristic(r, c, gr, gc, connectivity):
    dr, dc = abs(r - gr), abs(c - gc)
    if connectivity == 4:
        return float(dr + dc)
    return (SQRT2 - 1.0) * min(dr, dc) + max(dr, dc)


def astar(occ, start: Cell, goal: Cell, connectivity: int = 8) -> PathResult:
    """Optimal grid path on a boolean traversability grid (True = free).

    Straight steps cost 1, diagonal steps sqrt(2) and may not cut a blocked
    corner (both orthogonal neighbours must be free). Octile heuristic; ties
    break on (f, h, flat cell index) so results are deterministic.
    """
    occ = np.asarray(occ, bool)
    h, w = occ.shape
    for name, (r, c) in (("start", start), ("goal", goal)):
        if not (0 <= r < h and 0 <= c < w):
            raise IndexError(f"{name} {(r, c)} outside {h}x{w} grid")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    if tuple(start) == tuple(goal):
        raise ValueError("start and goal must differ")
    sr, sc = start
    gr, gc = goal
    if not occ[sr, sc] or not occ[gr, gc]:
        return PathResult(False)
    free = occ.ravel().tolist()
    moves = _MOVES_8 if connectivity == 8 else _MOVES_4
    start_i, goal_i = sr * w + sc, gr * w + gc
    g_score = {start_i: 0.0}
    parent = {start_i: -1}
    closed = set()
    h0 = _heuristic(sr, sc, gr, gc, connectivity)
    heap = [(h0, h0, start_i)]
    while heap:
        f, hh, i = heapq.heappop(heap)
        if i in closed:
            continue
        if i == goal_i:
            break
        closed.add(i)
        r, c = divmod(i, w)
        gi = g_score[i]
        for dr, dc, step in moves:
            nr, nc = r + dr, c + dc
            if nr < 0 or nr >= h or nc < 0 or nc >= w:
                continue
            j = nr * w + nc
            if not free[j] or j in closed:
                continue
            if dr and dc and not (free[r * w + nc] and free[nr * w + c]):
                continue
            ng = gi + step
            if ng < g_score.get(j, math.inf):
                g_score[j] = ng
                parent[j] = i
                hj = _heuristic(nr, nc, gr, gc, connectivity)
                heapq.heappush(heap, (ng + hj, hj, j))
    else:
        return PathResult(False)
    cells = []
    i = goal_i
    while i != -1:
        cells.append(divmod(i, w))
        i = parent[i]
    cells.reverse()
    return PathResult(True, [(int(r), int(c)) for r, c in cells], g_score[goal_i])


def validate_path(occ, cells: list[Cell], connectivity: int = 8) -> bool:
    """Check adjacency, traversability and the no-corner-cutting rule."""
    occ = np.asarray(occ, bool)
    if not cells:
        return False
    h, w = occ.shape
    for r, c in cells:
        if not (0 <= r < h and 0 <= c < w) or not occ[r, c]:
            return False
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        dr, dc = abs(r1 - r0), abs(c1 - c0)
        if max(dr, dc) != 1:
            return False
        if dr and dc:
            if connectivity == 4 or not (occ[r0, c1] and occ[r1, c0]):
                return False
    return True


def path_cost(cells: list[Cell]) -> float:
    total = 0.0
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        total += SQRT2 if (r0 != r1 and c0 != c1) else 1.0
    return total


class RouteSamplingError(RuntimeError):
    pass


def sample_routes(gt_occ, n: int = 75, seed: int = 0, min_separation: float = 0.1) -> list[Route]:
    """Draw ``n`` routes with free, mutually reachable endpoints in the ground truth.

    Endpoints are at least ``min_separation`` of the map diagonal apart.
    Reachability uses 4-connected components, which coincide with the
    components reachable under diagonal moves that may not cut corners.
    """
    occ = np.asarray(gt_occ, bool)
    free = np.flatnonzero(occ.ravel())
    if len(free) < 2:
        raise RouteSamplingError("ground truth has fewer than 2 traversable cells")
    h, w = occ.shape
    labels, _ = ndimage.label(occ)
    flat_labels = labels.ravel()
    min_dist = min_separation * math.hypot(h, w)
    rng = substream(seed, "routes")
    routes: list[Route] = []
    attempts = 0
    cap = 100 * n
    while len(routes) < n:
        if attempts >= cap:
            raise RouteSamplingError(
                f"only {len(routes)} of {n} routes found after {cap} attempts"
            )
        attempts += 1
        a, b = free[rng.integers(len(free), size=2)]
        if a == b or flat_labels[a] != flat_labels[b]:
            continue
        (ar, ac), (br, bc) = divmod(int(a), w), divmod(int(b), w)
        if math.hypot(ar - br, ac - bc) < min_dist:
            continue
        routes.append(Route((ar, ac), (br, bc)))
    return routes


@dataclass
class PlanMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> PlanMetrics:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, fn, precision, recall, f1)


@dataclass
class RouteOutcome:
    route_id: int
    found: bool
    gt_valid: bool
    cost_learned: float
    cost_gt: float


def evaluate_routes(gt_occ, learned_occ, routes: list[Route], gt_costs: bool = True) -> list[RouteOutcome]:
    """Plan every route on the learned grid and check the path against the ground truth."""
    gt = np.asarray(gt_occ, bool)
    learned = np.asarray(learned_occ, bool)
    if gt.shape != learned.shape:
        raise ValueError(f"grid shapes differ: {gt.shape} vs {learned.shape}")
    outcomes = []
    for i, route in enumerate(routes):
        res = astar(learned, route.start, route.goal)
        valid = res.found and all(gt[r, c] for r, c in res.cells)
        cost_gt = astar(gt, route.start, route.goal).cost if gt_costs else math.nan
        outcomes.append(RouteOutcome(i, res.found, bool(valid), res.cost, cost_gt))
    return outcomes


def metrics_from_outcomes(outcomes: list[RouteOutcome]) -> PlanMetrics:
    tp = sum(o.found and o.gt_valid for o in outcomes)
    fp = sum(o.found and not o.gt_valid for o in outcomes)
    fn = sum(not o.found for o in outcomes)
    return PlanMetrics.from_counts(tp, fp, fn)


def path_metrics(gt_occ, learned_occ, routes: list[Route]) -> PlanMetrics:
    """TP: path found and entirely free in the ground truth; FP: found but
    crosses a ground-truth obstacle; FN: no path found on the learned grid."""
    return metrics_from_outcomes(evaluate_routes(gt_occ, learned_occ, routes, gt_costs=False))
