"""Command-line pipeline: synth, ingest, embed, train, generate, evaluate.

Configuration is an INI-style key=value file; every Table-equivalent default
can be overridden per key. Heavy modules are imported lazily so the
MOBIDIFF_THREADS cap can be applied before numpy loads its BLAS.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys


DEFAULTS = {
    "paths": {
        "out_dir": "runs/default",
        "raw_points": "",
        "trajectories": "trajectories.csv",
        "population": "population.txt",
        "embeddings": "embeddings.txt",
        "graph_dump": "",
        "checkpoint": "checkpoint.txt",
        "loss_curve": "losses.csv",
        "generated": "generated.csv",
        "report": "report.json",
    },
    "grid": {
        "origin_lat": "0.0",
        "origin_lon": "0.0",
        "cell_size_m": "1000",
        "n_rows": "64",
        "n_cols": "64",
    },
    "resample": {
        "slot_minutes": "30",
        "min_records": "10",
    },
    "line": {
        "d": "128",
        "k_neighbors": "8",
        "n_negative": "5",
        "n_epochs": "50",
        "learning_rate": "0.025",
        "kernel_bandwidth": "",
    },
    "denoiser": {
        "n_heads": "8",
        "n_layers": "4",
        "conv_channels": "64",
        "value_source": "population",
    },
    "train": {
        "lambda": "0.5",
        "learning_rate": "1e-3",
        "batch_size": "16",
        "diffusion_steps": "1000",
        "beta_start": "1e-4",
        "beta_end": "0.02",
        "epochs": "5",
    },
    "sample": {
        "count": "100",
    },
    "eval": {
        "resolutions": "",
    },
    "synth": {
        "n_cells_side": "16",
        "n_users": "200",
        "n_days": "5",
        "home_bias": "2.0",
        "hotspots": "18-36:136:6.0",
        "n_slots": "48",
    },
    "run": {
        "seed": "",
    },
}


class CommandError(RuntimeError):
    pass


class RunConfig:
    """Merged defaults + config file + command-line overrides."""

    def __init__(self, path: str | None, overrides: argparse.Namespace) -> None:
        parser = configparser.ConfigParser()
        parser.read_dict(DEFAULTS)
        if path:
            if not os.path.exists(path):
                raise CommandError(f"config file not found: {path}")
            parser.read(path)
        self._cfg = parser
        if getattr(overrides, "out", None):
            parser.set("paths", "out_dir", overrides.out)
        if getattr(overrides, "seed", None) is not None:
            parser.set("run", "seed", str(overrides.seed))
        if getattr(overrides, "lam", None) is not None:
            parser.set("train", "lambda", str(overrides.lam))
        self.resolution_override = getattr(overrides, "resolution", None)

    def get(self, section: str, key: str) -> str:
        return self._cfg.get(section, key)

    def getint(self, section: str, key: str) -> int:
        return self._cfg.getint(section, key)

    def getfloat(self, section: str, key: str) -> float:
        return self._cfg.getfloat(section, key)

    def seed(self) -> int:
        raw = self.get("run", "seed")
        if raw == "":
            raise CommandError("a seed is required (set [run] seed or pass --seed)")
        return int(raw)

    def out_dir(self) -> str:
        return self.get("paths", "out_dir")

    def path(self, key: str, must_exist: bool = False) -> str:
        raw = self.get("paths", key)
        if not raw:
            raise CommandError(f"no path configured for [paths] {key}")
        full = raw if os.path.isabs(raw) else os.path.join(self.out_dir(), raw)
        if must_exist and not os.path.exists(full):
            raise CommandError(f"missing input artifact: {full}")
        return full

    def grid(self):
        from .core import GridSpec
        return GridSpec(
            origin_lat=self.getfloat("grid", "origin_lat"),
            origin_lon=self.getfloat("grid", "origin_lon"),
            cell_size_m=self.getfloat("grid", "cell_size_m"),
            n_rows=self.getint("grid", "n_rows"),
            n_cols=self.getint("grid", "n_cols"),
        )


def _parse_hotspots(raw: str):
    from .core import Hotspot
    hotspots = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            slots, cell, weight = chunk.split(":")
            start, end = slots.split("-")
            hotspots.append(Hotspot(slot_start=int(start), slot_end=int(end),
                                    cell=int(cell), weight=float(weight)))
        except ValueError as exc:
            raise CommandError(f"bad hotspot spec {chunk!r} "
                               "(expected start-end:cell:weight)") from exc
    return tuple(hotspots)


def cmd_synth(cfg: RunConfig) -> None:
    from . import core
    world = core.SynthWorldConfig(
        n_cells_side=cfg.getint("synth", "n_cells_side"),
        n_users=cfg.getint("synth", "n_users"),
        n_days=cfg.getint("synth", "n_days"),
        hotspots=_parse_hotspots(cfg.get("synth", "hotspots")),
        home_bias=cfg.getfloat("synth", "home_bias"),
        n_slots=cfg.getint("synth", "n_slots"),
        seed=cfg.seed(),
    )
    trajectories, pop = core.synth_world(world)
    core.write_trajectories_csv(cfg.path("trajectories"), trajectories)
    core.write_population_field(cfg.path("population"), pop)
    print(f"synth: wrote {len(trajectories)} trajectories over "
          f"{world.n_cells_side ** 2} cells")


def cmd_ingest(cfg: RunConfig) -> None:
    from . import core
    raw_path = cfg.get("paths", "raw_points")
    if not raw_path:
        raise CommandError("no [paths] raw_points configured")
    if not os.path.exists(raw_path):
        raise CommandError(f"missing input artifact: {raw_path}")
    points = core.read_points_csv(raw_path)
    if not points:
        raise CommandError(f"no usable records in {raw_path}")
    grid = cfg.grid()
    slot_minutes = cfg.getint("resample", "slot_minutes")
    min_records = cfg.getint("resample", "min_records")

    by_user: dict[str, list] = {}
    for p in points:
        by_user.setdefault(p.user_id, []).append(p)
    trajectories = []
    users_kept = 0
    for user in sorted(by_user):
        pts = sorted(by_user[user], key=lambda p: p.timestamp)
        days = core.resample_trajectory(pts, grid, slot_minutes, min_records)
        trajectories.extend(days)
        users_kept += bool(days)
    if not trajectories:
        raise CommandError("no usable records after resampling")
    pop = core.compute_population_field(trajectories, grid.n_cells)
    core.write_trajectories_csv(cfg.path("trajectories"), trajectories)
    core.write_population_field(cfg.path("population"), pop)
    print(f"ingest: kept {users_kept}/{len(by_user)} users, "
          f"{len(trajectories)} trajectories")


def cmd_embed(cfg: RunConfig) -> None:
    from . import core, graph
    trajectories = core.read_trajectories_csv(cfg.path("trajectories", must_exist=True))
    visited = set()
    for t in trajectories:
        visited.update(int(c) for c in t.cells)
    bandwidth = cfg.get("line", "kernel_bandwidth")
    line_cfg = graph.LineConfig(
        d=cfg.getint("line", "d"),
        k_neighbors=cfg.getint("line", "k_neighbors"),
        n_negative=cfg.getint("line", "n_negative"),
        n_epochs=cfg.getint("line", "n_epochs"),
        learning_rate=cfg.getfloat("line", "learning_rate"),
        kernel_bandwidth=float(bandwidth) if bandwidth else None,
        seed=cfg.seed(),
    )
    g = graph.build_spatial_graph(cfg.grid(), visited, line_cfg.k_neighbors,
                                  line_cfg.kernel_bandwidth)
    table = graph.train_line(g, line_cfg)
    graph.write_embeddings(cfg.path("embeddings"), table)
    if cfg.get("paths", "graph_dump"):
        graph.write_graph(cfg.path("graph_dump"), g)
    print(f"embed: {len(g.nodes)} nodes, {len(g.edges)} edges, "
          f"table {table.shape[0]}x{table.shape[1]}")


def cmd_train(cfg: RunConfig) -> None:
    from . import core, diffusion, graph
    from .denoiser import DenoiserConfig
    trajectories = core.read_trajectories_csv(cfg.path("trajectories", must_exist=True))
    pop = core.read_population_field(cfg.path("population", must_exist=True))
    table = graph.read_embeddings(cfg.path("embeddings", must_exist=True))
    train_cfg = diffusion.TrainConfig(
        lambda_pop=cfg.getfloat("train", "lambda"),
        learning_rate=cfg.getfloat("train", "learning_rate"),
        batch_size=cfg.getint("train", "batch_size"),
        diffusion_steps=cfg.getint("train", "diffusion_steps"),
        beta_start=cfg.getfloat("train", "beta_start"),
        beta_end=cfg.getfloat("train", "beta_end"),
        epochs=cfg.getint("train", "epochs"),
        seed=cfg.seed(),
    )
    dcfg = DenoiserConfig(
        n_cells=table.shape[0] - 1,
        d=table.shape[1],
        n_heads=cfg.getint("denoiser", "n_heads"),
        n_layers=cfg.getint("denoiser", "n_layers"),
        conv_channels=cfg.getint("denoiser", "conv_channels"),
        value_source=cfg.get("denoiser", "value_source"),
    )
    result = diffusion.train(trajectories, pop, table, train_cfg, dcfg)
    diffusion.save_model(cfg.path("checkpoint"), result.denoiser, train_cfg)
    diffusion.write_loss_curve(cfg.path("loss_curve"), result.curve)
    print(f"train: {len(result.curve)} steps, "
          f"final loss {result.curve[-1][3]:.6f}")


def cmd_generate(cfg: RunConfig) -> None:
    from . import core, diffusion, graph
    model, sched = diffusion.load_model(cfg.path("checkpoint", must_exist=True))
    pop = core.read_population_field(cfg.path("population", must_exist=True))
    table = graph.read_embeddings(cfg.path("embeddings", must_exist=True))
    count = cfg.getint("sample", "count")
    batch = diffusion.sample(count, pop, model, table, sched, seed=cfg.seed())
    core.write_trajectories_csv(cfg.path("generated"), batch.trajectories,
                                extra_column="sample_id",
                                extra_values=[str(i) for i in range(count)])
    print(f"generate: wrote {count} trajectories")


def cmd_evaluate(cfg: RunConfig) -> None:
    from . import core, metrics
    real = core.read_trajectories_csv(cfg.path("trajectories", must_exist=True))
    gen = core.read_trajectories_csv(cfg.path("generated", must_exist=True))
    grid = cfg.grid()
    raw = cfg.get("eval", "resolutions")
    if cfg.resolution_override is not None:
        resolutions = [cfg.resolution_override]
    elif raw:
        resolutions = [int(v) for v in raw.replace(",", " ").split()]
    else:
        resolutions = [grid.n_rows]
    rep = metrics.report(real, gen, grid, resolution=resolutions[0])
    for res in resolutions[1:]:
        extra, real_heat, gen_heat = metrics.population_metric(real, gen, grid, res)
        rep.heatmaps[res] = (real_heat, gen_heat)
        rep.binning[f"popdist_jsd_{res}"] = extra
    with open(cfg.path("report"), "w", encoding="utf-8") as fh:
        fh.write(rep.to_json() + "\n")
    for res, (real_heat, gen_heat) in sorted(rep.heatmaps.items()):
        metrics.write_heatmap(os.path.join(cfg.out_dir(), f"heatmap_real_{res}.txt"), real_heat)
        metrics.write_heatmap(os.path.join(cfg.out_dir(), f"heatmap_gen_{res}.txt"), gen_heat)
    print(f"evaluate: popdist_jsd={rep.popdist_jsd:.6f} od_cosine={rep.od_cosine:.6f}")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "embed": cmd_embed,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("MOBIDIFF_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobidiff",
                                     description="population-conditioned trajectory synthesis")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="population loss weight override (train)")
        p.add_argument("--resolution", type=int, default=None,
                       help="heatmap resolution override (evaluate)")
        p.add_argument("--out", default=None, help="output directory override")
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig(args.config, args)
        os.makedirs(cfg.out_dir(), exist_ok=True)
        COMMANDS[args.command](cfg)
    except (CommandError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
