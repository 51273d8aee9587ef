"""Scratch: inspect per-slot behavior of trained models on a hotspot-driven world."""
import sys
import numpy as np

from mobidiff.core import SynthWorldConfig, Hotspot, synth_world, GridSpec
from mobidiff.graph import build_spatial_graph, train_line, LineConfig
from mobidiff.denoiser import DenoiserConfig
from mobidiff.diffusion import TrainConfig, train, sample
from mobidiff.metrics import report

SEED = 11

def make_world(seed):
    # strongly peaked per-slot marginals: residential cells at night, work by day
    hotspots = (
        Hotspot(0, 16, 17, 8.0),    # main residential
        Hotspot(0, 16, 20, 1.5),
        Hotspot(0, 16, 49, 0.9),
        Hotspot(16, 38, 136, 8.0),  # main work
        Hotspot(16, 38, 139, 1.5),
        Hotspot(38, 48, 17, 8.0),
        Hotspot(38, 48, 60, 2.0),   # evening spot
    )
    return SynthWorldConfig(n_cells_side=16, n_users=200, n_days=3, seed=seed,
                            hotspots=hotspots, home_bias=0.4)

def main(lam, temp):
    grid = GridSpec(0.0, 0.0, 1000, 16, 16)
    trajs, pop = synth_world(make_world(SEED))
    real_cells = np.stack([t.cells for t in trajs])
    print("real per-slot top cell:", [int(np.bincount(real_cells[:, s]).argmax())
                                      for s in (2, 20, 40)])
    print("real night marginal top shares:",
          np.sort(pop.probs[2])[-4:][::-1].round(3))
    visited = {int(c) for t in trajs for c in t.cells}
    print("n visited:", len(visited))
    g = build_spatial_graph(grid, visited, k=8)
    M = train_line(g, LineConfig(d=32, n_epochs=30, seed=SEED))

    dcfg = DenoiserConfig(n_cells=256, d=32, n_heads=4, n_layers=2, conv_channels=16)
    tcfg = TrainConfig(lambda_pop=lam, learning_rate=1e-3, batch_size=16,
                       diffusion_steps=100, beta_start=1e-3, beta_end=0.2,
                       epochs=20, seed=SEED, recovery_temperature=temp)
    res = train(trajs, pop, M, tcfg, dcfg)
    batch = sample(400, pop, res.denoiser, M, res.schedule, seed=SEED + 9999, temperature=temp)
    gen_cells = np.stack([t.cells for t in batch.trajectories])
    print("gen sample 0:", gen_cells[0][:24], gen_cells[0][24:])
    print("gen per-slot top cells:", [int(np.bincount(gen_cells[:, s], minlength=256).argmax())
                                      for s in (2, 20, 40)])
    for s in (2, 20):
        counts = np.bincount(gen_cells[:, s], minlength=256) / gen_cells.shape[0]
        top = counts.argsort()[-4:][::-1]
        print(f"  slot {s} gen shares {[(int(c), round(float(counts[c]),3)) for c in top]} "
              f"real {[(int(c), round(float(pop.probs[s][c]),3)) for c in np.argsort(pop.probs[s])[-4:][::-1]]}")
    rep = report(trajs, batch.trajectories, grid, resolution=16)
    print(f"lam={lam} temp={temp}: pop={rep.popdist_jsd:.4f} od={rep.od_cosine:.4f} "
          f"dist={rep.distance_jsd:.4f} daily={rep.dailyloc_jsd:.4f} | "
          f"li {res.curve[-1][1]:.3f} lp {res.curve[-1][2]:.3f}")

if __name__ == "__main__":
    main(float(sys.argv[1]), float(sys.argv[2]))
