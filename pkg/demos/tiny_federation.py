"""
Training a tiny denoiser with each method
=========================================

A 12x12 version of the synthetic garments, a 20-step noise schedule and a
small UNet keep this to a few seconds.  Scores are Frechet distances on raw
pixels, lower is better; under udec and ulatdec every client keeps its own
encoder, so each client gets its own score.
"""

import numpy as np

from feddiffuse.data import PartitionSpec, make_partition, synthetic_fashion
from feddiffuse.diffusion import build_schedule
from feddiffuse.evaluation import FeatureExtractor, fit_stats, score_model
from feddiffuse.federation import FederationConfig, init_params, run_training
from feddiffuse.model import ModelConfig

config = ModelConfig(base_channels=8, depth=2, emb_dim=16, image_size=12, pad=2, groups=4)
sched = build_schedule(20, 1e-3, 0.2)
ds = synthetic_fashion(600, seed=0, size=12)
part = make_partition(ds, PartitionSpec("label_skew", 3, 0.5, seed=0))
print("shard sizes", part.sizes)

fx = FeatureExtractor.raw_pixels()
reference = fit_stats(ds.as_float(), fx)
print("untrained", round(score_model(init_params(config, 0), reference, 200, fx, sched), 1))

#%%

for method in ("full", "usplit", "ulatdec", "udec"):
    cfg = FederationConfig(num_clients=3, rounds=4, epochs=2, batch_size=32, lr=2e-3, method=method)
    res = run_training(cfg, ds, part, sched, config)
    scores = score_model(res.scored_models(), reference, 200, fx, sched)
    losses = [round(m.mean_loss, 1) for m in res.metrics]
    shown = np.round(scores.scores, 1).tolist() if hasattr(scores, "scores") else round(scores, 1)
    print(f"{method:>8}: N={res.ledger.total:,} losses {losses} score {shown}")
