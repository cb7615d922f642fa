"""Grid maps: raster I/O, synthetic terrain, agent partitioning and refinement."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from fedmap.seeding import substream

LOW_IS_TRAVERSABLE = "low-is-traversable"
HIGH_IS_TRAVERSABLE = "high-is-traversable"
POLARITIES = (LOW_IS_TRAVERSABLE, HIGH_IS_TRAVERSABLE)


@dataclass
class GridMap:
    """Dense ``(height, width, channels)`` array of values in [0, 1].

    With the default polarity, dark cells are passable (0 = free, 1 = obstacle).
    """

    values: np.ndarray
    traversable_threshold: float = 0.5
    polarity: str = LOW_IS_TRAVERSABLE

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"values must be (H, W), (H, W, 1) or (H, W, 3), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("map must have at least one cell")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if np.any(~np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("map values must lie in [0, 1]")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def gray(self) -> np.ndarray:
        """Single-channel ``(H, W)`` view; RGB is reduced by channel average."""
        if self.channels == 1:
            return self.values[:, :, 0]
        return self.values.mean(axis=2)

    def with_values(self, values) -> GridMap:
        return GridMap(values, self.traversable_threshold, self.polarity)


@dataclass(frozen=True)
class Region:
    """Half-open cell rectangle ``[x0, x1) x [y0, y1)`` explored by one agent."""

    agent_id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty region {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"region {self} starts outside the map")

    @property
    def n_cells(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def mask(self, width: int, height: int) -> np.ndarray:
        if self.x1 > width or self.y1 > height:
            raise ValueError(f"region {self} exceeds {width}x{height} map")
        m = np.zeros((height, width), bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


@dataclass(frozen=True)
class RefineConfig:
    min_component_size: int = 200
    connectivity: int = 8
    majority_window: int = 3

    def __post_init__(self):
        if self.min_component_size < 1:
            raise ValueError("min_component_size must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.majority_window < 3 or self.majority_window % 2 == 0:
            raise ValueError("majority_window must be an odd integer >= 3")


# ---------------------------------------------------------------------------
# raster I/O


class MapFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def _pnm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in b" \t\r\n":
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise MapFormatError("truncated header", pos)
        tok = data[start:pos]
        if not tok.isdigit():
            raise MapFormatError(f"expected integer, got {tok[:16]!r}", start)
        tokens.append((int(tok), start))
    return tokens, pos


def _read_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise MapFormatError(f"unsupported netpbm magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    tokens, pos = _pnm_tokens(data, 3, 2)
    (w, wo), (h, ho), (maxval, mo) = tokens
    if w < 1:
        raise MapFormatError("width must be positive", wo)
    if h < 1:
        raise MapFormatError("height must be positive", ho)
    if maxval != 255:
        raise MapFormatError(f"unsupported maxval {maxval} (only 8-bit, maxval 255)", mo)
    if pos >= len(data) or data[pos] not in b" \t\r\n":
        raise MapFormatError("missing whitespace after header", pos)
    pos += 1
    need = w * h * channels
    if len(data) - pos < need:
        raise MapFormatError(f"expected {need} data bytes, found {len(data) - pos}", pos)
    arr = np.frombuffer(data, np.uint8, count=need, offset=pos)
    return arr.reshape(h, w, channels)


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _read_png(data: bytes) -> np.ndarray:
    from PIL import Image

    if len(data) < 33 or data[12:16] != b"IHDR":
        raise MapFormatError("missing IHDR chunk", 12)
    bit_depth, color_type, interlace = data[24], data[25], data[28]
    if bit_depth != 8:
        raise MapFormatError(f"unsupported bit depth {bit_depth}", 24)
    if color_type not in (0, 2):
        raise MapFormatError(f"unsupported color type {color_type} (gray or RGB only)", 25)
    if interlace != 0:
        raise MapFormatError("interlaced PNG not supported", 28)
    img = Image.open(io.BytesIO(data))
    img.load()
    arr = np.asarray(img, dtype=np.uint8)
    return arr[:, :, None] if arr.ndim == 2 else arr


def load_map(path, traversable_threshold: float = 0.5, polarity: str = LOW_IS_TRAVERSABLE) -> GridMap:
    """Load an 8-bit PGM/PPM (binary) or PNG raster, scaling values to [0, 1]."""
    data = Path(path).read_bytes()
    if data.startswith(_PNG_SIG):
        arr = _read_png(data)
    elif data[:1] == b"P":
        arr = _read_pnm(data)
    else:
        raise MapFormatError("unrecognized raster signature", 0)
    return GridMap(arr.astype(np.float64) / 255.0, traversable_threshold, polarity)


def quantize(values) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_map(grid: GridMap, path) -> Path:
    """Write ``grid`` as 8-bit PGM/PPM/PNG chosen by file extension."""
    path = Path(path)
    arr = quantize(grid.values)
    ext = path.suffix.lower()
    if ext in (".pgm", ".ppm"):
        if (ext == ".pgm") != (grid.channels == 1):
            raise ValueError(f"{ext} does not match a {grid.channels}-channel map")
        magic = b"P5" if grid.channels == 1 else b"P6"
        header = magic + b"\n%d %d\n255\n" % (grid.width, grid.height)
        path.write_bytes(header + arr.tobytes())
    elif ext == ".png":
        from PIL import Image

        img = Image.fromarray(arr[:, :, 0] if grid.channels == 1 else arr)
        img.save(path, format="PNG")
    else:
        raise ValueError(f"unsupported map extension {ext!r}")
    return path


# ---------------------------------------------------------------------------
# synthetic terrain

SYNTHETIC_KINDS = ("crevasse", "crater", "blocks")


def _stamp_segment(obst, p, q, radius, value=True):
    """Set cells within ``radius`` of segment pq (coords as (x, y)) to ``value``."""
    h, w = obst.shape
    x0 = int(max(0, np.floor(min(p[0], q[0]) - radius)))
    x1 = int(min(w, np.ceil(max(p[0], q[0]) + radius) + 1))
    y0 = int(max(0, np.floor(min(p[1], q[1]) - radius)))
    y1 = int(min(h, np.ceil(max(p[1], q[1]) + radius) + 1))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    cx, cy = xs + 0.5, ys + 0.5
    d = np.subtract(q, p)
    denom = float(d @ d) or 1.0
    t = np.clip(((cx - p[0]) * d[0] + (cy - p[1]) * d[1]) / denom, 0.0, 1.0)
    dist2 = (cx - p[0] - t * d[0]) ** 2 + (cy - p[1] - t * d[1]) ** 2
    hit = dist2 <= radius * radius
    if value:
        obst[y0:y1, x0:x1] |= hit
    else:
        obst[y0:y1, x0:x1] &= ~hit


def _connect_free_space(obst, min_pocket=16):
    """Make free space a single 4-connected region.

    Pockets under ``min_pocket`` cells are filled; larger ones get a corridor
    carved to the largest free region.
    """
    for _ in range(10_000):
        labels, n = ndimage.label(~obst)
        if n <= 1:
            return
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        main = int(np.argmax(sizes))
        other = next(i for i in range(1, n + 1) if i != main)
        if sizes[other] < min_pocket:
            obst[labels == other] = True
            continue
        dist, idx = ndimage.distance_transform_edt(labels != main, return_indices=True)
        cells = np.argwhere(labels == other)
        r, c = cells[int(np.argmin(dist[cells[:, 0], cells[:, 1]]))]
        tr, tc = idx[0, r, c], idx[1, r, c]
        _stamp_segment(obst, (c + 0.5, r + 0.5), (tc + 0.5, tr + 0.5), 1.5, value=False)
    raise RuntimeError("free space did not connect")


def _crevasse(obst, size, rng):
    radius = max(2.0, size / 50.0) * rng.uniform(0.8, 1.3)
    length = rng.uniform(0.35, 0.65) * size
    n_seg = int(rng.integers(4, 9))
    step = length / n_seg
    pt = rng.uniform(0.05, 0.95, 2) * size
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(n_seg):
        heading += rng.normal(0, 0.35)
        nxt = pt + step * np.array([np.cos(heading), np.sin(heading)])
        _stamp_segment(obst, pt, nxt, radius)
        pt = nxt


def _crater(obst, size, rng):
    h, w = obst.shape
    r = rng.uniform(size / 14, size / 6)
    rim = max(2.0, r / 3)
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    dist = np.hypot(dx, dy)
    ring = np.abs(dist - r) <= rim / 2
    # breach in the rim keeps the floor reachable
    gap_dir = rng.uniform(-np.pi, np.pi)
    ang = np.angle(np.exp(1j * (np.arctan2(dy, dx) - gap_dir)))
    ring &= np.abs(ang) > rng.uniform(0.35, 0.7)
    obst |= ring


def _block(obst, size, rng):
    h, w = obst.shape
    bw = int(rng.uniform(size / 10, size / 5)) + 1
    bh = int(rng.uniform(size / 10, size / 5)) + 1
    x0 = int(rng.integers(0, max(1, w - bw)))
    y0 = int(rng.integers(0, max(1, h - bh)))
    obst[y0:y0 + bh, x0:x0 + bw] = True


_STAMPS = {"crevasse": _crevasse, "crater": _crater, "blocks": _block}


def generate_synthetic(kind: str, size: int, seed: int, density: float | None = None) -> GridMap:
    """Deterministic binary terrain (0 = passable, 1 = obstacle).

    ``crevasse``: long thin meandering fissures (glacier-like); ``crater``:
    breached circular rims; ``blocks``: rectangular obstacles. Features are
    added until the obstacle fraction reaches ``density`` (drawn from
    [0.12, 0.3] when not given). Free space is then made 4-connected.
    """
    if kind not in _STAMPS:
        raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    rng = substream(seed, "data", SYNTHETIC_KINDS.index(kind), size)
    target = rng.uniform(0.12, 0.3) if density is None else float(density)
    if not 0.1 <= target <= 0.4:
        raise ValueError("density must lie in [0.1, 0.4]")
    obst = np.zeros((size, size), bool)
    for _ in range(10_000):
        if obst.mean() >= target:
            break
        _STAMPS[kind](obst, size, rng)
    _connect_free_space(obst)
    return GridMap(obst.astype(np.float64))


def generate_quadrant_map(
    size: int,
    seed: int,
    kinds=("crevasse", "crater", "blocks", "crevasse"),
    min_feature_cells: int = 200,
) -> GridMap:
    """Heterogeneous map whose four quadrants come from different terrain generators.

    The result is a fixed point of :func:`refine` with ``min_feature_cells`` as
    the speckle threshold, so a perfect reconstruction survives refinement
    unchanged. Pass ``min_feature_cells=0`` to get the raw tiles.
    """
    if size % 2 or size < 64:
        raise ValueError("size must be even and >= 64")
    half = size // 2
    tiles = [generate_synthetic(k, half, seed * 4 + i).gray() for i, k in enumerate(kinds)]
    top = np.concatenate(tiles[:2], axis=1)
    bottom = np.concatenate(tiles[2:], axis=1)
    grid = GridMap(np.concatenate([top, bottom], axis=0))
    if min_feature_cells <= 0:
        return grid
    cfg = RefineConfig(min_component_size=min_feature_cells)
    # refine only turns obstacles into free cells, so this terminates
    while True:
        nxt = refine(grid, cfg)
        if np.array_equal(nxt.values, grid.values):
            return grid
        grid = nxt


# ---------------------------------------------------------------------------
# partitioning


def _grid_factors(n: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    return rows, n // rows


def _bounds(extent: int, parts: int) -> list[tuple[int, int]]:
    edges = [extent * i // parts for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def partition(grid: GridMap, n_agents: int, layout: str = "grid") -> list[Region]:
    """Split the map into ``n_agents`` disjoint rectangles covering it.

    ``grid`` tiles rows x cols with rows the largest divisor of n not above
    sqrt(n) (4 agents give quadrants); ``strips`` cuts vertical strips.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if n_agents > grid.width * grid.height:
        raise ValueError(f"{n_agents} agents exceed {grid.width * grid.height} cells")
    if layout == "grid":
        rows, cols = _grid_factors(n_agents)
    elif layout == "strips":
        rows, cols = 1, n_agents
    else:
        raise ValueError(f"layout must be 'grid' or 'strips', got {layout!r}")
    if rows > grid.height or cols > grid.width:
        raise ValueError(f"{rows}x{cols} tiling does not fit a {grid.width}x{grid.height} map")
    regions = []
    for r, (y0, y1) in enumerate(_bounds(grid.height, rows)):
        for c, (x0, x1) in enumerate(_bounds(grid.width, cols)):
            regions.append(Region(r * cols + c, x0, y0, x1, y1))
    return regions


# ---------------------------------------------------------------------------
# binarization and refinement


def binarize(grid: GridMap, threshold: float | None = None) -> np.ndarray:
    """Boolean ``(H, W)`` grid, True = traversable. Values exactly at the
    threshold count as traversable."""
    t = grid.traversable_threshold if threshold is None else threshold
    g = grid.gray()
    if grid.polarity == LOW_IS_TRAVERSABLE:
        return g <= t
    return g >= t


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def fill_gaps(occ, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    """One synchronous majority-vote pass: an obstacle cell whose window
    (excluding itself) holds a majority of traversable neighbours becomes
    traversable. Border cells count only neighbours inside the map but keep
    the same absolute vote count (5 of 8 for a 3x3 window)."""
    occ = np.asarray(occ, bool)
    k = cfg.majority_window
    kernel = np.ones((k, k), np.int32)
    kernel[k // 2, k // 2] = 0
    votes = ndimage.convolve(occ.astype(np.int32), kernel, mode="constant", cval=0)
    need = (k * k - 1) // 2 + 1
    return occ | (votes >= need)


def component_sizes(mask, connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Label True cells; returns ``(labels, sizes)`` with ``sizes[0] = 0``."""
    labels, n = ndimage.label(np.asarray(mask, bool), structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    return labels, sizes


def remove_speckles(occ, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    """Obstacle components smaller than ``min_component_size`` become traversable."""
    occ = np.asarray(occ, bool)
    labels, sizes = component_sizes(~occ, cfg.connectivity)
    small = sizes < cfg.min_component_size
    small[0] = False
    return occ | small[labels]


def occupancy_to_map(occ, like: GridMap | None = None) -> GridMap:
    """Embed a traversability grid as a {0, 1} single-channel map honoring polarity."""
    occ = np.asarray(occ, bool)
    polarity = LOW_IS_TRAVERSABLE if like is None else like.polarity
    threshold = 0.5 if like is None else like.traversable_threshold
    vals = (~occ if polarity == LOW_IS_TRAVERSABLE else occ).astype(np.float64)
    return GridMap(vals, threshold, polarity)


def refine(grid: GridMap, cfg: RefineConfig = RefineConfig()) -> GridMap:
    """binarize -> fill_gaps -> remove_speckles -> {0, 1} map."""
    occ = binarize(grid)
    occ = fill_gaps(occ, cfg)
    occ = remove_speckles(occ, cfg)
    return occupancy_to_map(occ, grid)
