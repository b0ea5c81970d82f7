"""Chamfer distance, volumetric IoU, mesh reconstruction and the results table."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .grid import VoxelGrid
from .ifnet import predict_grid
from .mcubes import marching_cubes
from .mesh import TriMesh
from .occupancy import occupancy_grid
from .scan import surface_sample

log = logging.getLogger(__name__)

N_EVAL = 128
CD_SAMPLES = 10000
ISO = 0.5
TABLE_COLUMNS = ("category", "n", "CD_e-3", "mIoU_pct")


def _pts(s):
    p = s.points if hasattr(s, "points") else np.asarray(s, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
        raise InputError("chamfer distance needs two non-empty (n, 3) point sets")
    return p


def _directed(a, b):
    """Mean squared distance from each point of ``a`` to its nearest point in ``b``."""
    _, idx = cKDTree(b).query(a)
    # recompute with the plain formula so the value does not depend on the tree
    return ((a - b[idx]) ** 2).sum(axis=-1).mean()


def chamfer_l2(s1, s2):
    """Sum of the two directed mean squared nearest-neighbour distances."""
    a, b = _pts(s1), _pts(s2)
    return float(_directed(a, b) + _directed(b, a))


def chamfer_bruteforce(s1, s2):
    a, b = _pts(s1), _pts(s2)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def _binary(g):
    v = g.values if isinstance(g, VoxelGrid) else np.asarray(g)
    if v.dtype != bool:
        if not np.all((v == 0) | (v == 1)):
            raise InputError("IoU expects binary grids; threshold probabilities first")
        v = v.astype(bool)
    return v


def volumetric_iou(pred, gt):
    """|pred and gt| / |pred or gt|; two empty grids count as a perfect match."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise InputError(f"grid resolution mismatch: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def threshold(prob, iso=ISO):
    """Strict threshold: exactly ``iso`` is outside."""
    v = prob.values if isinstance(prob, VoxelGrid) else np.asarray(prob)
    return v > iso


def mesh_from_grid(prob, iso=ISO) -> TriMesh:
    v = prob.values if isinstance(prob, VoxelGrid) else np.asarray(prob)
    return marching_cubes(v, iso=iso)


def reconstruct(model, scan, n_eval=N_EVAL, domain="target", return_grid=False):
    grid = predict_grid(model, scan, n_eval, domain)
    mesh = mesh_from_grid(grid)
    return (mesh, grid) if return_grid else mesh


@dataclass
class SampleScore:
    sample_id: str
    category: str
    cd: float  # raw squared-distance units, nan for an empty prediction
    iou: float  # fraction in [0, 1]
    empty: bool = False


@dataclass
class EvalResult:
    samples: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def categories(self):
        seen = []
        for s in self.samples:
            if s.category not in seen:
                seen.append(s.category)
        return seen

    def category_means(self, category):
        rows = [s for s in self.samples if s.category == category]
        cds = [s.cd for s in rows if not s.empty]
        cd = float(np.mean(cds)) if cds else math.nan
        return len(rows), cd * 1e3, float(np.mean([s.iou for s in rows])) * 100

    def means(self):
        """Average over categories of the per-category means (CD x 1e-3, IoU %)."""
        per = [self.category_means(c) for c in self.categories()]
        if not per:
            raise InputError("no evaluated samples")
        cds = [p[1] for p in per if not math.isnan(p[1])]
        return (float(np.mean(cds)) if cds else math.nan, float(np.mean([p[2] for p in per])))

    def table(self):
        lines = ["\t".join(TABLE_COLUMNS)]
        for c in self.categories():
            n, cd, iou = self.category_means(c)
            lines.append(f"{c}\t{n}\t{cd:.4f}\t{iou:.2f}")
        cd, iou = self.means()
        lines.append(f"average\t{len(self.samples)}\t{cd:.4f}\t{iou:.2f}")
        return "\n".join(lines) + "\n"

    def summary(self):
        cd, iou = self.means()
        items = [("cd_e-3", f"{cd:.6f}"), ("miou_pct", f"{iou:.4f}"),
                 ("n_samples", len(self.samples)),
                 ("n_empty", sum(s.empty for s in self.samples)),
                 ("n_skipped", len(self.skipped))]
        return "".join(f"{k}={v}\n" for k, v in items)

    def render(self):
        return self.table() + "\n" + self.summary()


def score_prediction(prob, gt_mesh, sample_id="", category="", n_surface=CD_SAMPLES, seed=0,
                     gt_grid=None) -> SampleScore:
    """CD between surface samples of the extracted and GT meshes, IoU on the grids."""
    v = prob.values if isinstance(prob, VoxelGrid) else np.asarray(prob)
    n = v.shape[0]
    gt_occ = occupancy_grid(gt_mesh, n) if gt_grid is None else np.asarray(gt_grid, dtype=bool)
    iou = volumetric_iou(threshold(v), gt_occ)
    mesh = mesh_from_grid(v)
    if mesh.is_empty:
        return SampleScore(sample_id, category, math.nan, iou, empty=True)
    rng = np.random.default_rng(seed)
    a = surface_sample(mesh, n_surface, seed=rng.integers(2 ** 63))
    b = surface_sample(gt_mesh, n_surface, seed=rng.integers(2 ** 63))
    return SampleScore(sample_id, category, chamfer_l2(a, b), iou)


def evaluate_samples(grid_fn, samples, n_eval=N_EVAL, n_surface=CD_SAMPLES, seed=0) -> EvalResult:
    """Score ``grid_fn(sample) -> probability grid`` on every sample.

    Samples are objects with ``sample_id``, ``category`` and ``gt_mesh``
    (None marks missing ground truth; those are skipped with a warning).
    """
    samples = list(samples)
    if not samples:
        raise InputError("empty evaluation split")
    result = EvalResult()
    for i, s in enumerate(samples):
        if s.gt_mesh is None:
            log.warning("sample %s has no ground-truth mesh; skipped", s.sample_id)
            result.skipped.append(s.sample_id)
            continue
        prob = grid_fn(s)
        result.samples.append(score_prediction(prob, s.gt_mesh, s.sample_id, s.category,
                                               n_surface, seed=[seed, i]))
    if not result.samples:
        raise InputError("no sample in the split has ground truth")
    return result


def evaluate_split(model, samples, n_eval=N_EVAL, domain="target", n_surface=CD_SAMPLES,
                   seed=0) -> EvalResult:
    return evaluate_samples(lambda s: predict_grid(model, s.scan, n_eval, domain), samples,
                            n_eval, n_surface, seed)


def gt_grid_fn(n_eval=N_EVAL):
    """A 'perfect model' that pipes ground-truth occupancy through the pipeline."""
    return lambda s: occupancy_grid(s.gt_mesh, n_eval).astype(np.float64)
