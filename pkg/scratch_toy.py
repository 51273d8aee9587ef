"""Scratch: end-to-end toy pipeline to tune criteria 7/8 directions."""
import sys
import time
import numpy as np

from mobidiff.core import SynthWorldConfig, Hotspot, synth_world, GridSpec
from mobidiff.graph import build_spatial_graph, train_line, LineConfig
from mobidiff.denoiser import DenoiserConfig
from mobidiff.diffusion import TrainConfig, train, sample
from mobidiff.metrics import report

_cache = {}

def world_and_embeddings(seed, d=32):
    key = (seed, d)
    if key not in _cache:
        grid = GridSpec(origin_lat=0.0, origin_lon=0.0, cell_size_m=1000, n_rows=16, n_cols=16)
        world = SynthWorldConfig(
            n_cells_side=16, n_users=200, n_days=3, seed=seed,
            hotspots=(Hotspot(18, 36, 136, 6.0), Hotspot(36, 44, 60, 2.0)),
            home_bias=2.0)
        trajs, pop = synth_world(world)
        visited = {int(c) for t in trajs for c in t.cells}
        g = build_spatial_graph(grid, visited, k=8)
        M = train_line(g, LineConfig(d=d, n_epochs=30, seed=seed))
        _cache[key] = (grid, trajs, pop, M)
    return _cache[key]

def run(seed, lam, temp, epochs=20, T=100, d=32, lr=1e-3, n_gen=400):
    grid, trajs, pop, M = world_and_embeddings(seed, d)
    t1 = time.time()
    dcfg = DenoiserConfig(n_cells=256, d=d, n_heads=4, n_layers=2, conv_channels=16)
    tcfg = TrainConfig(lambda_pop=lam, learning_rate=lr, batch_size=16,
                       diffusion_steps=T, beta_start=1e-3, beta_end=0.2,
                       epochs=epochs, seed=seed, recovery_temperature=temp)
    res = train(trajs, pop, M, tcfg, dcfg)
    t2 = time.time()
    batch = sample(n_gen, pop, res.denoiser, M, res.schedule, seed=seed + 9999,
                   temperature=temp)
    t3 = time.time()
    rep = report(trajs, batch.trajectories, grid, resolution=16)
    print(f"  seed={seed} lam={lam} temp={temp}: pop={rep.popdist_jsd:.4f} od={rep.od_cosine:.4f} "
          f"dist={rep.distance_jsd:.4f} radius={rep.radius_jsd:.4f} daily={rep.dailyloc_jsd:.4f} "
          f"| li {res.curve[-1][1]:.3f} lp {res.curve[-1][2]:.3f} "
          f"| train {t2-t1:.0f}s gen {t3-t2:.0f}s", flush=True)
    return rep

if __name__ == "__main__":
    temp = float(sys.argv[1]) if len(sys.argv) > 1 else 12.0
    lams = [float(x) for x in sys.argv[2:]] or [0.0, 0.25, 0.5, 1.0]
    for seed in (11,):
        for lam in lams:
            run(seed, lam, temp)
