# Fit the occupancy network to a single scan and mesh what it learned.
# A few hundred steps at lr 1e-3 are enough to see the shape appear.
import time

import numpy as np

from scanadapt.grid import cell_centers, voxelize
from scanadapt.ifnet import IFNet, loss_if, predict_grid
from scanadapt.mcubes import marching_cubes
from scanadapt.mesh import is_watertight
from scanadapt.metrics import chamfer_l2, volumetric_iou
from scanadapt.nn import AdamState, adam_step
from scanadapt.occupancy import occupancy_grid, sample_occupancy
from scanadapt.scan import simulate_scan, source_params, surface_sample
from scanadapt.shapes import generate_shape

mesh = generate_shape("blocky", 0)
scan = simulate_scan(mesh, source_params(), seed=0)
q = sample_occupancy(mesh, 4096, 4096, sigma=0.05, seed=0)
x = voxelize(scan, 32).values[None, None]

model = IFNet(seed=0)
params = model.parameters()
print("parameters:", sum(p.data.size for p in params.values()))
state = AdamState(lr=1e-3)

t = time.perf_counter()
for step in range(1, 401):
    rng = np.random.default_rng([0, step])
    idx = rng.choice(len(q.points), 2048, replace=False)[None]
    for p in params.values():
        p.grad = None
    loss = loss_if(model, x, q.points[idx], q.labels[idx].astype(np.float32))
    adam_step(params, state)
    if step % 50 == 0:
        print(f"step {step:4d}  loss {float(loss):.4f}  ({time.perf_counter() - t:.0f} s)")

# Occupancy on the 32^3 evaluation grid, then a mesh at iso 0.5.
prob = predict_grid(model, scan, 32).values
gt = occupancy_grid(mesh, 32)
print("IoU on the 32^3 grid: %.3f" % volumetric_iou(prob > 0.5, gt))

rec = marching_cubes(prob)
print("reconstruction:", len(rec.triangles), "triangles, watertight", is_watertight(rec))

# An open mesh here is not a marching cubes defect: the surface is cut where
# predicted occupancy touches the grid border.  Closing it needs one empty
# shell of nodes around the grid.
border = np.ones_like(prob, bool)
border[1:-1, 1:-1, 1:-1] = False
print("occupied border nodes:", int((prob[border] > 0.5).sum()))
c = cell_centers(32)
coords = np.concatenate([[2 * c[0] - c[1]], c, [2 * c[-1] - c[-2]]])
closed = marching_cubes(np.pad(prob, 1), coords=coords)
print("padded grid: watertight", is_watertight(closed))
a = surface_sample(rec, 5000, seed=1).points
b = surface_sample(mesh, 5000, seed=1).points
print("Chamfer-L2 x 1e3: %.2f" % (1e3 * chamfer_l2(a, b)))
