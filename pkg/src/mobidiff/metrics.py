"""Statistical comparison of a generated trajectory set against a real one.

Six per-feature divergences (trip distance, radius of gyration, stay duration,
daily visited locations, global and individual visit-rank curves), an aggregate
population-distribution divergence at selectable resolution, and the cosine
similarity of origin-destination transition matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GridSpec, Trajectory, cell_centers_km

LN2 = math.log(2.0)

DISTANCE_EDGES = np.concatenate([[0.0], np.logspace(-1.0, 2.0, 51)])  # km, underflow + 50 log bins
RANK_K_GLOBAL = 100
RANK_K_INDIVIDUAL = 10


@dataclass
class Histogram:
    """Fixed-edge histogram with raw counts and normalized masses."""

    edges: np.ndarray
    counts: np.ndarray

    @property
    def masses(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total > 0 else self.counts.astype(float)

    @property
    def empty(self) -> bool:
        return self.counts.sum() == 0


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; 0 log 0 counts as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions have different support: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must each sum to 1")
    mix = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / mix[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def _log_binned(values: np.ndarray) -> Histogram:
    clipped = np.clip(values, 0.0, DISTANCE_EDGES[-1] * (1 - 1e-12))
    counts, _ = np.histogram(clipped, bins=DISTANCE_EDGES)
    return Histogram(edges=DISTANCE_EDGES.copy(), counts=counts)


def trajectory_features(trajectories: list[Trajectory], grid: GridSpec) -> dict[str, Histogram]:
    """Per-trajectory mobility features, each binned with fixed edges.

    distance: consecutive-slot center-to-center hops (km), one value per hop;
    radius: RMS distance of each trajectory's points to their centroid (km);
    duration: lengths of maximal constant-cell runs (hours);
    dailyloc: distinct cells visited per trajectory.
    """
    if not trajectories:
        raise ValueError("feature histograms need a nonempty trajectory set")
    centers = cell_centers_km(grid)
    n_slots = trajectories[0].n_slots
    slot_hours = 24.0 / n_slots

    distances, radii = [], []
    run_counts = np.zeros(n_slots, dtype=np.int64)
    dailyloc_counts = np.zeros(n_slots, dtype=np.int64)
    for t in trajectories:
        pts = centers[t.cells]
        hops = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=1))
        distances.append(hops)
        centroid = pts.mean(axis=0)
        radii.append(math.sqrt(float(((pts - centroid) ** 2).sum(axis=1).mean())))
        boundaries = np.flatnonzero(np.diff(t.cells)) + 1
        for run in np.split(t.cells, boundaries):
            run_counts[len(run) - 1] += 1
        dailyloc_counts[len(np.unique(t.cells)) - 1] += 1

    duration_edges = np.arange(n_slots + 1) * slot_hours
    return {
        "distance": _log_binned(np.concatenate(distances)),
        "radius": _log_binned(np.array(radii)),
        "duration": Histogram(edges=duration_edges, counts=run_counts),
        "dailyloc": Histogram(edges=np.arange(1, n_slots + 2, dtype=float),
                              counts=dailyloc_counts),
    }


def _rank_curve(counts: np.ndarray, k: int) -> np.ndarray:
    """Normalized visit frequency by rank, ties broken by ascending cell id."""
    order = np.lexsort((np.arange(counts.size), -counts))
    top = counts[order[:k]].astype(np.float64)
    curve = np.zeros(k)
    curve[:top.size] = top / counts.sum()
    return curve


def rank_distributions(trajectories: list[Trajectory], n_cells: int,
                       k_global: int = RANK_K_GLOBAL,
                       k_individual: int = RANK_K_INDIVIDUAL) -> tuple[np.ndarray, np.ndarray]:
    """Global and per-user visit-rank curves, each renormalized to sum to 1."""
    if not trajectories:
        raise ValueError("rank curves need a nonempty trajectory set")
    global_counts = np.zeros(n_cells, dtype=np.int64)
    per_user: dict[str, np.ndarray] = {}
    for t in trajectories:
        np.add.at(global_counts, t.cells, 1)
        user = per_user.setdefault(t.user_id, np.zeros(n_cells, dtype=np.int64))
        np.add.at(user, t.cells, 1)

    g_curve = _rank_curve(global_counts, k_global)
    g_curve = g_curve / g_curve.sum()
    i_curve = np.mean([_rank_curve(c, k_individual) for c in per_user.values()], axis=0)
    i_curve = i_curve / i_curve.sum()
    return g_curve, i_curve


def visit_distribution(trajectories: list[Trajectory], grid: GridSpec,
                       resolution: int) -> np.ndarray:
    """Aggregate visit counts block-summed onto a resolution x resolution grid."""
    if grid.n_rows != grid.n_cols:
        raise ValueError("population heatmaps need a square grid")
    if resolution < 1 or grid.n_rows % resolution != 0:
        raise ValueError(f"resolution {resolution} does not divide the {grid.n_rows}-cell side")
    counts = np.zeros(grid.n_cells, dtype=np.float64)
    for t in trajectories:
        np.add.at(counts, t.cells, 1.0)
    block = grid.n_rows // resolution
    heat = counts.reshape(grid.n_rows, grid.n_cols)
    heat = heat.reshape(resolution, block, resolution, block).sum(axis=(1, 3))
    return heat / heat.sum()


def population_metric(real: list[Trajectory], gen: list[Trajectory], grid: GridSpec,
                      resolution: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Divergence between aggregate visit distributions, plus both heatmaps."""
    if not real or not gen:
        raise ValueError("both trajectory sets must be nonempty")
    real_heat = visit_distribution(real, grid, resolution)
    gen_heat = visit_distribution(gen, grid, resolution)
    return jsd(real_heat.ravel(), gen_heat.ravel()), real_heat, gen_heat


def od_matrix(trajectories: list[Trajectory], n_cells: int,
              hour: int | None = None) -> np.ndarray:
    """Counts of consecutive-slot transitions, optionally only those starting in one hour."""
    if hour is not None and not 0 <= hour < 24:
        raise ValueError("hour must lie in [0, 24)")
    od = np.zeros((n_cells, n_cells), dtype=np.float64)
    for t in trajectories:
        origins = t.cells[:-1]
        dests = t.cells[1:]
        if hour is not None:
            if t.n_slots % 24 != 0:
                raise ValueError("hourly aggregation needs a slot count divisible by 24")
            per_hour = t.n_slots // 24
            slots = np.arange(t.n_slots - 1)
            keep = (slots // per_hour) == hour
            origins, dests = origins[keep], dests[keep]
        np.add.at(od, (origins, dests), 1.0)
    return od


def od_similarity(real_od: np.ndarray, gen_od: np.ndarray) -> float:
    """Cosine similarity of flattened transition counts; 0 when either is all-zero."""
    a = np.asarray(real_od, dtype=np.float64).ravel()
    b = np.asarray(gen_od, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"matrices differ in shape: {real_od.shape} vs {gen_od.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def hourly_od_similarity(real: list[Trajectory], gen: list[Trajectory],
                         n_cells: int) -> list[float]:
    return [od_similarity(od_matrix(real, n_cells, hour=h),
                          od_matrix(gen, n_cells, hour=h)) for h in range(24)]


@dataclass
class MetricReport:
    """All eight scores plus the binning conventions they were computed with."""

    distance_jsd: float | None
    radius_jsd: float | None
    duration_jsd: float | None
    dailyloc_jsd: float | None
    grank_jsd: float
    irank_jsd: float
    popdist_jsd: float
    od_cosine: float
    binning: dict = field(default_factory=dict)
    heatmaps: dict = field(default_factory=dict)  # resolution -> (real, gen) arrays

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in (
            "distance_jsd", "radius_jsd", "duration_jsd", "dailyloc_jsd",
            "grank_jsd", "irank_jsd", "popdist_jsd", "od_cosine")}
        payload["binning"] = self.binning
        return json.dumps(payload, indent=2, sort_keys=True)


def _feature_jsd(real_h: Histogram, gen_h: Histogram) -> float | None:
    if real_h.empty or gen_h.empty:
        return None
    return jsd(real_h.masses, gen_h.masses)


def report(real: list[Trajectory], gen: list[Trajectory], grid: GridSpec,
           resolution: int | None = None) -> MetricReport:
    """Run every metric with the fixed binning and package the scores."""
    if not real or not gen:
        raise ValueError("both trajectory sets must be nonempty")
    if resolution is None:
        resolution = grid.n_rows
    real_f = trajectory_features(real, grid)
    gen_f = trajectory_features(gen, grid)
    real_g, real_i = rank_distributions(real, grid.n_cells)
    gen_g, gen_i = rank_distributions(gen, grid.n_cells)
    pop_jsd, real_heat, gen_heat = population_metric(real, gen, grid, resolution)
    od_cos = od_similarity(od_matrix(real, grid.n_cells), od_matrix(gen, grid.n_cells))

    binning = {
        "distance_km_edges": "underflow below 0.1, then 50 log bins over [0.1, 100]",
        "radius_km_edges": "same as distance",
        "duration_hours": "one bin per run length in slots",
        "dailyloc": "integer bins 1..n_slots",
        "rank_k": {"global": RANK_K_GLOBAL, "individual": RANK_K_INDIVIDUAL},
        "rank_ties": "broken by ascending cell id",
        "population_resolution": resolution,
        "log_base": "natural",
    }
    return MetricReport(
        distance_jsd=_feature_jsd(real_f["distance"], gen_f["distance"]),
        radius_jsd=_feature_jsd(real_f["radius"], gen_f["radius"]),
        duration_jsd=_feature_jsd(real_f["duration"], gen_f["duration"]),
        dailyloc_jsd=_feature_jsd(real_f["dailyloc"], gen_f["dailyloc"]),
        grank_jsd=jsd(real_g, gen_g),
        irank_jsd=jsd(real_i, gen_i),
        popdist_jsd=pop_jsd,
        od_cosine=od_cos,
        binning=binning,
        heatmaps={resolution: (real_heat, gen_heat)},
    )


def write_heatmap(path: str, heat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in heat:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
