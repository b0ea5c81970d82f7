# Self-training on unlabeled target scans.
#
# A scan is split into K parts by k-means.  View A keeps K_A parts, view B
# keeps fewer (K_B < K_A), so A is the more complete view.  The model's
# prediction on A acts as teacher for B, but only where it is confident.
import numpy as np

from scanadapt.cdff import DomainAdaptiveIFNet
from scanadapt.grid import voxelize
from scanadapt.scan import make_view_pair, simulate_scan, target_params
from scanadapt.shapes import generate_shape
from scanadapt.vcst import (AUGMENTATIONS, ConfidenceBand, augmentation_variant, loss_ct,
                            pseudo_label, sample_ct_queries)

scan = simulate_scan(generate_shape("lamp", 4), target_params(), seed=4)
print("target scan:", len(scan), "points")

for seed in range(4):
    vp = make_view_pair(scan.points, seed=seed)
    print(f"seed {seed}: K_A={vp.k_a} ({len(vp.view_a)} pts)  K_B={vp.k_b} ({len(vp.view_b)} pts)")

# The other augmentations drop boxes or random points instead of whole
# k-means parts, sized so the expected number of removed points matches.
for kind in AUGMENTATIONS:
    kept = [len(v.view_a) + len(v.view_b)
            for v in (augmentation_variant(scan.points, kind, seed=s, n_points=10 ** 6)
                      for s in range(50))]
    print(f"{kind:>22}: mean points kept over both views {np.mean(kept):.1f}")

# Pseudo-labels: hard 0/1 outside the band, ignored inside it.
labels, mask = pseudo_label(np.array([0.02, 0.1, 0.4, 0.6, 0.9, 0.97]))
print("teacher [0.02 0.1 0.4 0.6 0.9 0.97] -> labels", labels, "used", mask.astype(int))

# One consistency step on an untrained model.  Its outputs hover near 0.5,
# so the default band masks everything; a band at the teacher's own
# quartiles shows the plumbing.
vp = make_view_pair(scan.points, seed=0)
xa = voxelize(vp.view_a, 32).values[None, None].astype(np.float32)
xb = voxelize(vp.view_b, 32).values[None, None].astype(np.float32)
q = sample_ct_queries(scan, 512, 512, sigma=0.05, seed=0)[None]
model = DomainAdaptiveIFNet(seed=0)
model.init_target_from_source()
teacher = model.predict(xa, q)
lo, hi = np.quantile(teacher, [0.25, 0.75])
print(f"untrained teacher range [{teacher.min():.4f}, {teacher.max():.4f}]")
for band in (ConfidenceBand(), ConfidenceBand(float(lo), float(hi))):
    r = loss_ct(model, xa, xb, q, band, backward=False)
    print(f"band ({band.low:.4f}, {band.high:.4f}): {r.n_masked} of {q.shape[1]} queries used, "
          f"L_CT {r.loss:.4f}")
