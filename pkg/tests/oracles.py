"""Independent reference computations shared by the unit and acceptance suites."""

import math

import networkx as nx
import numpy as np

from fedmap.encoding import EncoderConfig, FourierEncoder
from fedmap.mapping import GridMap
from fedmap.network import NetworkConfig, TrainBatch, count_params, forward, init_params, mse_loss


def finite_difference_grads(params, feats, targets, h=1e-5):
    """Central differences of the train-mode MSE for every trainable coordinate."""
    out = {}
    for name, arr in params.trainables.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = mse_loss(forward(params, feats, "train", update_stats=False), targets)
            arr[idx] = old - h
            fm = mse_loss(forward(params, feats, "train", update_stats=False), targets)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def max_rel_error(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)))


def random_tiny_case(seed):
    rng = np.random.default_rng(seed)
    while True:
        cfg = NetworkConfig(
            in_channels=4,
            hidden_channels=int(rng.integers(1, 5)),
            hidden_layers=int(rng.integers(0, 3)),
            out_channels=int(rng.integers(1, 4)),
            use_batchnorm=bool(rng.integers(2)),
        )
        if count_params(cfg) <= 100:
            break
    p = init_params(cfg, rng, dtype=np.float64)
    p = p.map(lambda a: a + rng.normal(0, 0.3, a.shape))
    enc = FourierEncoder(EncoderConfig(mapping_size=2, scale=1.0, seed=seed))
    n = int(rng.integers(3, 9))
    batch = TrainBatch(rng.random((n, 2)), rng.random((n, cfg.out_channels)))
    return p, enc, batch


def hand_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        trace.append(x)
    return trace


def adam_oracle(x, deltas, eta=1e-2, b1=0.9, b2=0.99, tau=1e-3, yogi=False):
    m = v = 0.0
    xs = []
    for d in deltas:
        m = b1 * m + (1 - b1) * d
        if yogi:
            v = v - (1 - b2) * d * d * math.copysign(1.0, v - d * d) if v != d * d else v
        else:
            v = b2 * v + (1 - b2) * d * d
        x = x + eta * m / (math.sqrt(v) + tau)
        xs.append(x)
    return xs


def dijkstra_cost(occ, start, goal):
    """Independent oracle: networkx Dijkstra over the same move model."""
    h, w = occ.shape
    g = nx.Graph()
    for r in range(h):
        for c in range(w):
            if not occ[r, c]:
                continue
            g.add_node((r, c))
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not occ[rr, cc]:
                    continue
                if dr and dc and not (occ[r, cc] and occ[rr, c]):
                    continue
                g.add_edge((r, c), (rr, cc), weight=math.sqrt(2) if dr and dc else 1.0)
    if start not in g or goal not in g:
        return math.inf
    try:
        return nx.dijkstra_path_length(g, start, goal)
    except nx.NetworkXNoPath:
        return math.inf


def random_grids(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        occ = rng.random((size, size)) > rng.uniform(0.1, 0.4)
        free = np.argwhere(occ)
        a, b = free[rng.choice(len(free), 2, replace=False)]
        yield occ, tuple(int(v) for v in a), tuple(int(v) for v in b)


def blob(n, shape=(40, 40)):
    occ = np.ones(shape, bool)
    cells = [(r, c) for r in range(5, 35) for c in range(5, 35)][:n]
    for r, c in cells:
        occ[r, c] = False
    return occ


def clean_fixture():
    v = np.zeros((60, 60))
    v[10:30, 10:30] = 1.0  # 400-cell obstacle
    v[40:55, 35:50] = 1.0  # 225-cell obstacle
    # a square corner sees 5 free neighbours and would be filled, so trim them
    for r, c in [(10, 10), (10, 29), (29, 10), (29, 29), (40, 35), (40, 49), (54, 35), (54, 49)]:
        v[r, c] = 0.0
    return GridMap(v)


def salt_fixture():
    rng = np.random.default_rng(0)
    v = np.zeros((100, 100))
    idx = rng.choice(100 * 100, 100, replace=False)
    v.ravel()[idx] = 1.0
    return GridMap(v)


