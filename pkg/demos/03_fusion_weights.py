# How target features are blended from the two encoders.
#
# Every channel j of the 68-wide feature gets a weight w_j on the source
# encoder: fused = w * F_s + (1 - w) * F_t.  The weight starts from a prior
# that depends only on the channel's depth, and in adaptive mode a small MLP
# nudges it per sample by at most alpha.
import numpy as np

from scanadapt.cdff import DomainAdaptiveIFNet, FusionConfig, prior_weights
from scanadapt.grid import voxelize
from scanadapt.ifnet import EncoderConfig
from scanadapt.scan import simulate_scan, target_params
from scanadapt.shapes import generate_shape

cfg = EncoderConfig()
lmap = np.asarray(cfg.channel_layer_map())
print("channels per level:", cfg.channels, " d =", cfg.d)

for mode in ("adaptive", "contradictory", "non-adaptive"):
    w0 = prior_weights(lmap, cfg.levels, mode)
    per_level = [w0[lmap == l][0] for l in range(1, cfg.levels + 1)]
    print(f"{mode:>14} prior by level:", np.round(per_level, 3))

# A batch of four target scans through an untrained two-encoder model.
scans = [simulate_scan(generate_shape(c, s), target_params(), seed=s)
         for c, s in (("table", 0), ("lamp", 1), ("blocky", 2), ("lamp", 3))]
x = np.stack([voxelize(s, 32).values for s in scans])[:, None].astype(np.float32)

# Untrained features are small, so h sits near its bias and the per-sample
# spread is tiny; it grows once the encoders are trained.
for alpha in (0.0, 0.2, 0.5):
    model = DomainAdaptiveIFNet(cfg, FusionConfig(alpha=alpha), seed=0)
    model.init_target_from_source()
    w = model.fusion_weights(x)
    shift = w - model.w0
    print(f"alpha {alpha}: |w - w0| max {np.abs(shift).max():.3f}, "
          f"spread across samples {w.std(axis=0).max():.2e}")

# Deep channels already lean on the source encoder, so the clip at 1 bites
# there first as alpha grows.
model = DomainAdaptiveIFNet(cfg, FusionConfig(alpha=0.5), seed=0)
w = model.fusion_weights(x)
for l in range(1, cfg.levels + 1):
    wl = w[:, lmap == l]
    print(f"level {l}: mean w {wl.mean():.3f}, clipped at 1: {int((wl == 1).sum())} of {wl.size}")
