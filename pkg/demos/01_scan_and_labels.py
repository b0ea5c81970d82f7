# From a procedural shape to a training sample: mesh, two kinds of scan,
# occupancy labels, and the input voxel grid.
import numpy as np

from scanadapt.grid import voxelize
from scanadapt.mesh import connected_component_count, is_watertight
from scanadapt.occupancy import sample_occupancy
from scanadapt.scan import simulate_scan, source_params, target_params
from scanadapt.shapes import generate_shape

mesh = generate_shape("table", seed=3)
print("table mesh:", len(mesh.vertices), "vertices,", len(mesh.triangles), "triangles")
print("watertight:", is_watertight(mesh), " components:", connected_component_count(mesh))
lo, hi = mesh.bounds()
print("extent:", np.round(hi - lo, 3))

# Same shape, two scanners.  The source scanner looks from a fixed direction
# with little noise; the target scanner uses a random view, more noise and
# larger dropped regions.
src = simulate_scan(mesh, source_params(), seed=0)
tgt = simulate_scan(mesh, target_params(), seed=0)
for name, s in (("source", src), ("target", tgt)):
    print(f"{name} scan: {len(s)} points, spread {s.points.std(0).round(3)}")

# Labels: uniform points in the padded cube plus points near the surface.
q = sample_occupancy(mesh, 2048, 2048, sigma=0.05, seed=0)
print("labels: %d queries, %.1f%% inside" % (len(q.points), 100 * q.labels.mean()))

# The encoder only ever sees a binary grid.
for name, s in (("source", src), ("target", tgt)):
    g = voxelize(s, 32).values
    print(f"{name} grid: {int(g.sum())} of {g.size} voxels occupied")
