"""Throwaway calibration for the training acceptance thresholds."""
import sys
import time

import numpy as np

from litemvs.config import NetworkConfig
from litemvs.network import DepthNetwork
from litemvs.scenes import default_specs, render
from litemvs.training import RMSprop, compute_normalization, heldout_depth_mae, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
variants = sys.argv[2].split(",") if len(sys.argv) > 2 else ["cider", "agc", "agc-idr"]

specs = default_specs(3, 20)
scenes = [render(s) for s in specs]
train_scenes, held = scenes[:16], scenes[16:]
wide = [s for s in scenes if s.meta["wide_range"]]
print(f"train {len(train_scenes)}, held {len(held)}, wide {len(wide)}")

for variant in variants:
    t0 = time.time()
    model = DepthNetwork(NetworkConfig(num_depths=32, variant=variant), rng=np.random.default_rng(1))
    model.set_normalization(*compute_normalization(train_scenes))
    _, hist = train(model, train_scenes, iterations=iters, seed=5, quiet=True)
    dt = time.time() - t0
    mae_held = heldout_depth_mae(model, held)
    mae_wide = heldout_depth_mae(model, wide)
    rel = np.mean([v["mae_rel_range"] for v in mae_held.values()])
    relw = np.mean([v["mae_rel_range"] for v in mae_wide.values()])
    maew = np.mean([v["mae"] for v in mae_wide.values()])
    print(f"{variant}: {iters} iters in {dt/60:.1f} min; "
          f"loss {np.mean(hist[:10]):.4f} -> {np.mean(hist[-10:]):.4f}; "
          f"held-out rel MAE {rel:.4f}; wide rel {relw:.4f} abs {maew:.4f}")
    for k, v in mae_held.items():
        print(f"   held {k}: mae {v['mae']:.4f} rel {v['mae_rel_range']:.4f}")
