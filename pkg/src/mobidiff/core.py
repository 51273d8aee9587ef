"""Spatial grid, trajectory resampling, population fields, and a synthetic world.

A trajectory is a day of equal-interval grid-cell visits. A population field is
the per-slot probability of presence over all cells of the grid. Both are the
raw material for the diffusion engine and the evaluation metrics.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_DAY = 86400
DEFAULT_SLOT_MINUTES = 30
DEFAULT_MIN_RECORDS = 10

EARTH_RADIUS_M = 6_371_000.0
_M_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0


class GridBoundsError(ValueError):
    """A point fell outside the grid bounding box."""


@dataclass(frozen=True)
class GridSpec:
    """Regular grid anchored at a lat/lon origin corner.

    Local coordinates are an equirectangular projection: meters east/north of
    the origin, with the longitude scale fixed at the origin latitude. Cell ids
    are row-major: ``cell = row * n_cols + col``.
    """

    origin_lat: float
    origin_lon: float
    cell_size_m: float = 1000.0
    n_rows: int = 64
    n_cols: int = 64

    def __post_init__(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")
        if not (-90.0 <= self.origin_lat <= 90.0 and -180.0 <= self.origin_lon <= 180.0):
            raise ValueError(f"invalid grid origin ({self.origin_lat}, {self.origin_lon})")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def _lon_scale(self) -> float:
        return math.cos(math.radians(self.origin_lat))


@dataclass(frozen=True)
class RawPoint:
    """One timestamped GPS observation of one user."""

    user_id: str
    timestamp: int
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")


@dataclass(eq=False)
class Trajectory:
    """One user-day as a fixed-length sequence of cell ids."""

    user_id: str
    day_index: int
    cells: np.ndarray  # shape (n_slots,), integer cell ids

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 1 or self.cells.size == 0:
            raise ValueError("cells must be a non-empty 1-d sequence")
        if (self.cells < 0).any():
            raise ValueError("cell ids must be nonnegative")

    @property
    def n_slots(self) -> int:
        return int(self.cells.size)


@dataclass(eq=False)
class PopulationField:
    """Per-slot probability distribution of presence over cells."""

    probs: np.ndarray  # shape (n_slots, n_cells), rows sum to 1

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("population field must be a 2-d matrix")
        if (self.probs < 0).any():
            raise ValueError("population field entries must be nonnegative")
        row_sums = self.probs.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-9):
            raise ValueError("population field rows must each sum to 1")

    @property
    def n_slots(self) -> int:
        return self.probs.shape[0]

    @property
    def n_cells(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class Hotspot:
    """A cell that attracts visits during a half-open range of slots."""

    slot_start: int
    slot_end: int
    cell: int
    weight: float

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError("hotspot weight must be positive")
        if not 0 <= self.slot_start < self.slot_end:
            raise ValueError("hotspot slot range must be non-empty and nonnegative")


@dataclass(frozen=True)
class SynthWorldConfig:
    """Configuration for the deterministic synthetic mobility world."""

    n_cells_side: int
    n_users: int
    n_days: int
    hotspots: tuple[Hotspot, ...]
    seed: int
    home_bias: float = 2.0
    n_slots: int = 48

    def __post_init__(self) -> None:
        if self.n_cells_side < 1 or self.n_users < 1 or self.n_days < 1:
            raise ValueError("world dimensions must be positive")
        if not self.hotspots:
            raise ValueError("at least one hotspot is required")
        if self.home_bias < 0:
            raise ValueError("home_bias must be nonnegative")
        n_cells = self.n_cells_side * self.n_cells_side
        for h in self.hotspots:
            if h.cell >= n_cells:
                raise ValueError(f"hotspot cell {h.cell} outside the {n_cells}-cell grid")
            if h.slot_end > self.n_slots:
                raise ValueError("hotspot slot range exceeds the day")


def map_to_grid(lat: float, lon: float, grid: GridSpec) -> int:
    """Map a coordinate to its cell id; raise GridBoundsError outside the box."""
    x = (lon - grid.origin_lon) * _M_PER_DEG * grid._lon_scale
    y = (lat - grid.origin_lat) * _M_PER_DEG
    col = math.floor(x / grid.cell_size_m)
    row = math.floor(y / grid.cell_size_m)
    if not (0 <= row < grid.n_rows and 0 <= col < grid.n_cols):
        raise GridBoundsError(f"point ({lat}, {lon}) falls outside the grid (row={row}, col={col})")
    return row * grid.n_cols + col


def cell_center(cell: int, grid: GridSpec) -> tuple[float, float]:
    """Return the (lat, lon) of a cell's center."""
    if not 0 <= cell < grid.n_cells:
        raise ValueError(f"cell {cell} outside the grid")
    row, col = divmod(cell, grid.n_cols)
    y = (row + 0.5) * grid.cell_size_m
    x = (col + 0.5) * grid.cell_size_m
    return (grid.origin_lat + y / _M_PER_DEG,
            grid.origin_lon + x / (_M_PER_DEG * grid._lon_scale))


def cell_centers_km(grid: GridSpec) -> np.ndarray:
    """Planar (x, y) cell-center coordinates in kilometers, one row per cell."""
    rows, cols = np.divmod(np.arange(grid.n_cells), grid.n_cols)
    size_km = grid.cell_size_m / 1000.0
    return np.stack([(cols + 0.5) * size_km, (rows + 0.5) * size_km], axis=1)


def resample_trajectory(points: list[RawPoint], grid: GridSpec,
                        slot_minutes: int = DEFAULT_SLOT_MINUTES,
                        min_records: int = DEFAULT_MIN_RECORDS) -> list[Trajectory]:
    """Turn one user's raw points into equal-interval day trajectories.

    Points must be sorted by timestamp and belong to a single user. Days with
    fewer than ``min_records`` points are dropped. Each slot takes the cell of
    the latest observation on record when the slot begins; slots before the
    first observation of the day take the first observed cell.
    """
    if not points:
        return []
    user = points[0].user_id
    for a, b in zip(points, points[1:]):
        if b.timestamp < a.timestamp:
            raise ValueError("points must be sorted by timestamp")
        if b.user_id != user:
            raise ValueError("points must all belong to one user")

    if (24 * 60) % slot_minutes != 0:
        raise ValueError("slot_minutes must divide a day")
    n_slots = (24 * 60) // slot_minutes
    slot_seconds = slot_minutes * 60

    by_day: dict[int, list[RawPoint]] = {}
    for p in points:
        by_day.setdefault(p.timestamp // SECONDS_PER_DAY, []).append(p)

    out = []
    for day in sorted(by_day):
        day_pts = by_day[day]
        if len(day_pts) < min_records:
            continue
        offsets = [p.timestamp - day * SECONDS_PER_DAY for p in day_pts]
        day_cells = [map_to_grid(p.lat, p.lon, grid) for p in day_pts]
        cells = np.empty(n_slots, dtype=np.int64)
        for n in range(n_slots):
            # last observation on record when slot n opens, else carry the
            # first observation backward
            i = bisect_right(offsets, n * slot_seconds)
            cells[n] = day_cells[i - 1] if i > 0 else day_cells[0]
        out.append(Trajectory(user_id=user, day_index=day, cells=cells))
    return out


def compute_population_field(trajectories: list[Trajectory], n_cells: int) -> PopulationField:
    """Empirical per-slot distribution over cells across a trajectory set."""
    if not trajectories:
        raise ValueError("cannot compute a population field from an empty dataset")
    n_slots = trajectories[0].n_slots
    counts = np.zeros((n_slots, n_cells), dtype=np.float64)
    slots = np.arange(n_slots)
    for t in trajectories:
        if t.n_slots != n_slots:
            raise ValueError("all trajectories must share the same slot count")
        if (t.cells >= n_cells).any():
            raise ValueError("trajectory references a cell outside the grid")
        np.add.at(counts, (slots, t.cells), 1.0)
    return PopulationField(counts / len(trajectories))


def synth_world(cfg: SynthWorldConfig) -> tuple[list[Trajectory], PopulationField]:
    """Generate a deterministic synthetic trajectory set and its population field.

    Each agent has a fixed home cell. At every slot the agent samples a cell
    with probability proportional to the attraction weights of the hotspots
    active in that slot plus ``home_bias`` on its own home. When no weight is
    active anywhere the agent stays where it is.
    """
    rng = np.random.default_rng(cfg.seed)
    n_cells = cfg.n_cells_side * cfg.n_cells_side

    base = np.zeros((cfg.n_slots, n_cells), dtype=np.float64)
    for h in cfg.hotspots:
        base[h.slot_start:h.slot_end, h.cell] += h.weight

    homes = rng.integers(0, n_cells, size=cfg.n_users)
    trajectories = []
    for u in range(cfg.n_users):
        home = int(homes[u])
        for day in range(cfg.n_days):
            cells = np.empty(cfg.n_slots, dtype=np.int64)
            prev = home
            for slot in range(cfg.n_slots):
                w = base[slot].copy()
                w[home] += cfg.home_bias
                total = w.sum()
                if total <= 0:
                    cells[slot] = prev
                else:
                    cells[slot] = rng.choice(n_cells, p=w / total)
                prev = int(cells[slot])
            trajectories.append(Trajectory(user_id=f"u{u:04d}", day_index=day, cells=cells))

    return trajectories, compute_population_field(trajectories, n_cells)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_points_csv(path: str) -> list[RawPoint]:
    """Read raw points from `user_id,timestamp,lat,lon` CSV (header required)."""
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["user_id", "timestamp", "lat", "lon"]:
            raise ValueError(f"{path}: expected header 'user_id,timestamp,lat,lon'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                points.append(RawPoint(user_id=row[0], timestamp=int(row[1]),
                                       lat=float(row[2]), lon=float(row[3])))
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}: {exc}") from exc
    return points


def write_trajectories_csv(path: str, trajectories: list[Trajectory],
                           extra_column: str | None = None,
                           extra_values: list[str] | None = None) -> None:
    """Write `user_id,day_index,c_0..c_{N-1}` rows, optionally with a trailing column."""
    n_slots = trajectories[0].n_slots if trajectories else 48
    header = ["user_id", "day_index"] + [f"c_{i}" for i in range(n_slots)]
    if extra_column is not None:
        header.append(extra_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(trajectories):
            row = [t.user_id, str(t.day_index)] + [str(int(c)) for c in t.cells]
            if extra_column is not None:
                row.append(extra_values[i] if extra_values else str(i))
            writer.writerow(row)


def read_trajectories_csv(path: str) -> list[Trajectory]:
    """Read trajectories written by :func:`write_trajectories_csv` (extra columns ignored)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["user_id", "day_index"]:
            raise ValueError(f"{path}: expected a trajectory CSV header")
        n_slots = sum(1 for h in header if h.startswith("c_"))
        if n_slots == 0:
            raise ValueError(f"{path}: header has no cell columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cells = np.array([int(v) for v in row[2:2 + n_slots]], dtype=np.int64)
                out.append(Trajectory(user_id=row[0], day_index=int(row[1]), cells=cells))
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
    return out


def write_population_field(path: str, pop: PopulationField) -> None:
    """Write the field as a plain-text matrix, one slot per row."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in pop.probs:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_population_field(path: str) -> PopulationField:
    with open(path, encoding="utf-8") as fh:
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty population field file")
    return PopulationField(np.array(rows, dtype=np.float64))
