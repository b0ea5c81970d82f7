"""Experiment orchestration: dataset build, label splits, training stages and evaluation.

Run directory layout::

    <run_dir>/config.json        resolved configuration
    <run_dir>/checkpoints/       pretrain-*.ckpt, adapt-*.ckpt
    <run_dir>/logs/              one key=value line per training step
    <run_dir>/results/           results.tsv

Every training step draws its randomness from ``default_rng([seed, stage,
step])``, so a resumed run repeats the original one exactly.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cdff import MODES, POOLINGS, DomainAdaptiveIFNet, FusionConfig
from .errors import ConfigError, DataError, InputError, NumericError
from .grid import voxelize
from .ifnet import DECODER_HIDDEN, DEFAULT_CHANNELS, EncoderConfig, loss_if, predict_grid
from .mesh import read_mesh, read_points, write_mesh, write_points
from .metrics import EvalResult, evaluate_samples, mesh_from_grid
from .nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from .occupancy import sample_occupancy
from .scan import ScanParams, simulate_scan, source_params, target_params
from .shapes import CATEGORIES, generate_shape
from .vcst import (AUGMENTATIONS, ConfidenceBand, augmentation_variant, check_view_order, loss_ct,
                   sample_ct_queries)

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
STAGE_IDS = {"pretrain": 1, "adapt": 2}

# parameter groups a checkpoint must carry for each fusion mode
MODE_PREFIXES = {
    "source-only": ("g_s.", "f."),
    "target-only": ("g_t.", "f."),
    "non-adaptive": ("g_s.", "g_t.", "f."),
    "adaptive": ("g_s.", "g_t.", "h.", "f."),
    "contradictory": ("g_s.", "g_t.", "h.", "f."),
}
PRETRAIN_PREFIXES = ("g_s.", "f.")


@dataclass
class ExperimentConfig:
    seed: int = 0
    categories: tuple = CATEGORIES
    n_per_category: int = 40
    source_scan: dict = field(default_factory=lambda: source_params().to_dict())
    target_scan: dict = field(default_factory=lambda: target_params().to_dict())
    shape_resolution: int = 64
    label_uniform: int = 4096
    label_surface: int = 4096
    label_sigma: float = 0.05
    # model
    channels: tuple = DEFAULT_CHANNELS
    resolution: int = 32
    hidden: int = DECODER_HIDDEN
    fusion_mode: str = "adaptive"
    alpha: float = 0.2
    pooling: str = "average"
    h_hidden: int | None = None
    # labels
    label_fraction: float = 0.03
    split_fractions: tuple = (0.03, 0.05)
    # optimisation
    lr: float = 1e-4
    batch_size: int = 4
    points_per_sample: int = 1024
    pretrain_steps: int = 2000
    adapt_steps: int = 2000
    source_lr_scale: float = 0.1
    finetune_source: bool = True
    source_through_fusion: bool = False
    checkpoint_every: int = 500
    # self-training
    vcst: bool = True
    augmentation: str = "surface"
    ct_uniform: int = 512
    ct_near: int = 512
    ct_sigma: float = 0.05
    band_low: float = 0.1
    band_high: float = 0.9
    ct_weight: float = 1.0
    # evaluation
    n_eval: int = 128
    cd_samples: int = 10000
    # runtime
    precision: str = "f32"
    threads: int = 1
    data_dir: str = "data"
    run_dir: str = "run"

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.channels = tuple(int(c) for c in self.channels)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        for name in ("source_scan", "target_scan"):
            setattr(self, name, ScanParams(**getattr(self, name)).to_dict())  # validates, normalizes
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must be in (0, 1]")
        if any(not 0 < f <= 1 for f in self.split_fractions):
            raise ConfigError("split fractions must be in (0, 1]")
        if self.fusion_mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; choose from {MODES}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {self.augmentation!r}; "
                              f"choose from {AUGMENTATIONS}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if min(self.pretrain_steps, self.adapt_steps) < 0:
            raise ConfigError("step counts must be non-negative")
        if self.batch_size < 1 or self.points_per_sample < 1 or self.threads < 1:
            raise ConfigError("batch size, points per sample and threads must be positive")
        if self.n_per_category < 1 or not self.categories:
            raise ConfigError("need at least one category and one shape per category")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown categories {sorted(unknown)}")
        ConfidenceBand(self.band_low, self.band_high)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def band(self):
        return ConfidenceBand(self.band_low, self.band_high)

    def label_fractions(self):
        return tuple(sorted(set(self.split_fractions) | {self.label_fraction}))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None

    def replace(self, **kw):
        return replace(self, **kw)


# -- dataset -----------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    category: str
    domain: str
    index: int
    shape_seed: int
    has_labels: bool


@dataclass
class SplitManifest:
    seed: int
    fractions: tuple
    labeled: dict  # str(fraction) -> sorted sample ids
    test: list

    def labeled_ids(self, fraction):
        key = _fkey(fraction)
        if key not in self.labeled:
            raise ConfigError(f"split has no labeled set for fraction {fraction}")
        return self.labeled[key]

    def to_json(self):
        return json.dumps({"seed": self.seed, "fractions": list(self.fractions),
                           "labeled": self.labeled, "test": self.test},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["seed"], tuple(d["fractions"]), d["labeled"], d["test"])


def _fkey(f):
    return repr(float(f))


def _sid(domain, category, i):
    return f"{domain}-{category}-{i:03d}"


def _shape_seed(seed, domain, category, i):
    ss = np.random.SeedSequence([seed, DOMAINS.index(domain), CATEGORIES.index(category), i])
    return int(ss.generate_state(1)[0])


def label_count(fraction, n):
    """round(fraction * n) with halves rounded up, floored at 1."""
    return max(1, int(math.floor(fraction * n + 0.5)))


def split_labels(target_ids_by_category, fractions=(0.03, 0.05), seed=0) -> SplitManifest:
    """Nested labeled subsets per category from a single seeded permutation.

    Smaller fractions take a prefix of the same permutation, so they are
    always contained in the larger ones.  The test set is every target sample
    outside the largest labeled set.
    """
    fractions = tuple(sorted(float(f) for f in fractions))
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("fractions must be in (0, 1]")
    labeled = {_fkey(f): [] for f in fractions}
    test = []
    for ci, cat in enumerate(sorted(target_ids_by_category)):
        ids = sorted(target_ids_by_category[cat])
        if not ids:
            continue
        rng = np.random.default_rng([seed, 7, ci])
        perm = [ids[i] for i in rng.permutation(len(ids))]
        for f in fractions:
            if f * len(ids) + 0.5 < 1:
                log.warning("fraction %g gives no labeled %s sample; using 1", f, cat)
            labeled[_fkey(f)].extend(perm[:label_count(f, len(ids))])
        test.extend(perm[label_count(fractions[-1], len(ids)):])
    labeled = {k: sorted(v) for k, v in labeled.items()}
    return SplitManifest(int(seed), fractions, labeled, sorted(test))


def _plan(config: ExperimentConfig):
    records = {}
    for domain in DOMAINS:
        for cat in config.categories:
            for i in range(config.n_per_category):
                sid = _sid(domain, cat, i)
                records[sid] = SampleRecord(sid, cat, domain, i,
                                            _shape_seed(config.seed, domain, cat, i), False)
    targets = {c: [r.sample_id for r in records.values() if r.domain == "target" and r.category == c]
               for c in config.categories}
    split = split_labels(targets, config.label_fractions(), config.seed)
    labeled = set(split.labeled_ids(max(config.label_fractions())))
    for r in records.values():
        r.has_labels = r.domain == "source" or r.sample_id in labeled
    return list(records.values()), split


def build_dataset(config: ExperimentConfig, overwrite=False) -> Path:
    """Generate meshes, scans and label pools; returns the manifest path.

    Output is written to a sibling temporary directory and moved into place at
    the end, so a failed build leaves nothing behind.
    """
    out = Path(config.data_dir)
    if out.exists():
        if not overwrite:
            raise DataError(f"{out} already exists (pass overwrite=True to rebuild)")
        shutil.rmtree(out)
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    records, split = _plan(config)
    params = {"source": ScanParams(**config.source_scan), "target": ScanParams(**config.target_scan)}
    try:
        for r in records:
            d = tmp / "samples" / r.sample_id
            d.mkdir(parents=True)
            mesh = generate_shape(r.category, r.shape_seed, config.shape_resolution)
            scan = simulate_scan(mesh, params[r.domain], seed=[r.shape_seed, 1])
            meta = {"sample_id": r.sample_id, "category": r.category, "domain": r.domain,
                    "shape_seed": r.shape_seed, "params": json.dumps(asdict(params[r.domain]),
                                                                     sort_keys=True)}
            (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
            write_mesh(d / "mesh.txt", mesh)
            write_points(d / "scan.xyz", scan)
            if r.has_labels:
                q = sample_occupancy(mesh, config.label_uniform, config.label_surface,
                                     config.label_sigma, seed=[r.shape_seed, 2])
                np.save(d / "points.npy", q.points)
                np.save(d / "occupancy.npy", q.labels.astype(np.uint8))
        manifest = {"seed": config.seed, "categories": list(config.categories),
                    "n_per_category": config.n_per_category,
                    "records": [asdict(r) for r in records]}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (tmp / "split.json").write_text(split.to_json())
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out / "manifest.json"


class Dataset:
    """Read access to a built dataset, with in-memory caches."""

    def __init__(self, data_dir):
        self.root = Path(data_dir)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no dataset manifest at {mpath}; run build-data first")
        m = json.loads(mpath.read_text())
        self.seed = m["seed"]
        self.records = [SampleRecord(**r) for r in m["records"]]
        self.by_id = {r.sample_id: r for r in self.records}
        self.split = SplitManifest.from_json((self.root / "split.json").read_text())
        self._cache = {}

    def _dir(self, sid):
        return self.root / "samples" / sid

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def ids(self, domain):
        return [r.sample_id for r in self.records if r.domain == domain]

    def scan(self, sid):
        return self._cached(("scan", sid), lambda: read_points(self._dir(sid) / "scan.xyz"))

    def mesh(self, sid):
        path = self._dir(sid) / "mesh.txt"
        return read_mesh(path) if path.exists() else None

    def voxels(self, sid, resolution):
        return self._cached(("vox", sid, resolution),
                            lambda: voxelize(self.scan(sid), resolution).values)

    def labels(self, sid):
        def load():
            d = self._dir(sid)
            if not (d / "points.npy").exists():
                raise DataError(f"sample {sid} has no occupancy labels")
            return np.load(d / "points.npy"), np.load(d / "occupancy.npy")
        return self._cached(("lab", sid), load)

    def labeled_target(self, fraction):
        return self.split.labeled_ids(fraction)

    def unlabeled_target(self, fraction):
        lab = set(self.labeled_target(fraction))
        return [s for s in self.ids("target") if s not in lab]

    def test_ids(self):
        return list(self.split.test)


# -- models and checkpoints --------------------------------------------------

def build_model(config: ExperimentConfig, mode=None) -> DomainAdaptiveIFNet:
    fusion = FusionConfig(mode or config.fusion_mode, config.alpha, config.pooling, config.h_hidden)
    return DomainAdaptiveIFNet(EncoderConfig(config.channels, config.resolution), fusion,
                               seed=config.seed, dtype=config.dtype, hidden=config.hidden)


def arch_tensors(model):
    """Architecture description stored next to the weights."""
    return {"meta.channels": np.array(model.config.channels),
            "meta.resolution": np.array([model.config.resolution]),
            "meta.hidden": np.array([model.decoder.widths[1]]),
            "meta.h_hidden": np.array([model.h.widths[1]])}


def arch_from_checkpoint(tensors, config: ExperimentConfig) -> ExperimentConfig:
    """``config`` with its architecture fields replaced by the checkpoint's."""
    if "meta.channels" not in tensors:
        return config
    return config.replace(channels=tuple(int(c) for c in tensors["meta.channels"]),
                          resolution=int(tensors["meta.resolution"][0]),
                          hidden=int(tensors["meta.hidden"][0]),
                          h_hidden=int(tensors["meta.h_hidden"][0]))


def save_run_checkpoint(path, model, prefixes, state: AdamState | None = None, step=0):
    tensors = arch_tensors(model)
    tensors.update({k: p.data for k, p in model.parameters().items() if k.startswith(prefixes)})
    names = [k for k in tensors if not k.startswith("meta.")]
    if state is not None:
        for k in names:
            if k in state.m:
                tensors[f"adam.m.{k}"] = state.m[k]
                tensors[f"adam.v.{k}"] = state.v[k]
        tensors["adam.step"] = np.array([state.step])
    tensors["meta.step"] = np.array([step])
    save_checkpoint(path, tensors)
    return Path(path)


def load_into(model, tensors, prefixes, source=""):
    """Copy checkpoint tensors into ``model``; every prefix must be present."""
    for pre in prefixes:
        if not any(k.startswith(pre) for k in tensors):
            raise DataError(f"checkpoint {source} has no '{pre}' tensors required by "
                            f"fusion mode {model.mode!r}")
    params = model.parameters()
    for k, p in params.items():
        if k.startswith(prefixes):
            if k not in tensors:
                raise DataError(f"checkpoint {source} is missing tensor {k}")
            if tensors[k].shape != p.shape:
                raise ConfigError(f"tensor {k}: checkpoint shape {tensors[k].shape} "
                                  f"!= model shape {p.shape}")
            p.data = tensors[k].astype(p.data.dtype)


def _restore_adam(tensors, dtype):
    st = AdamState()
    st.step = int(tensors["adam.step"][0])
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            st.m[k[7:]] = v.astype(dtype)
        elif k.startswith("adam.v."):
            st.v[k[7:]] = v.astype(dtype)
    return st


def load_model(config: ExperimentConfig, checkpoint, mode=None) -> DomainAdaptiveIFNet:
    """Model for ``mode`` (default: the config's) with architecture and weights from a checkpoint."""
    tensors = load_checkpoint(checkpoint)
    model = build_model(arch_from_checkpoint(tensors, config), mode)
    load_into(model, tensors, MODE_PREFIXES[model.mode], str(checkpoint))
    return model


# -- training ----------------------------------------------------------------

def parse_log(path):
    """Training log lines as dicts; numeric fields become floats, 'none' becomes None."""
    rows = []
    for line in Path(path).read_text().splitlines():
        row = {}
        for item in line.split():
            k, _, v = item.partition("=")
            if v == "none":
                row[k] = None
            else:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return rows


def _fmt(v):
    return "none" if v is None else f"{float(v):.17g}"


@contextmanager
def _threads(config):
    with threadpool_limits(limits=config.threads):
        yield


def _prepare_run_dir(config):
    run = Path(config.run_dir)
    for sub in ("checkpoints", "logs", "results"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(config.to_json())
    return run


def _zero(params):
    for p in params.values():
        p.grad = None


def _supervised_batch(rng, ids, data: Dataset, config, replace_ok=False):
    replace_ok = replace_ok or len(ids) < config.batch_size
    pick = rng.choice(len(ids), size=config.batch_size, replace=replace_ok)
    xs, pts, labs = [], [], []
    for i in pick:
        sid = ids[i]
        P, occ = data.labels(sid)
        sel = rng.choice(len(P), size=config.points_per_sample, replace=False)
        xs.append(data.voxels(sid, config.resolution))
        pts.append(P[sel])
        labs.append(occ[sel])
    dt = config.dtype
    return (np.stack(xs)[:, None].astype(dt), np.stack(pts), np.stack(labs).astype(dt),
            [ids[i] for i in pick])


def _dump_batch(run, stage, step, **arrays):
    path = Path(run) / "logs" / f"nan-{stage}-{step:06d}.npz"
    np.savez(path, **{k: np.asarray(v) for k, v in arrays.items()})
    return path


def run_pretrain(config: ExperimentConfig, resume_from=None) -> Path:
    """Train g_s and the decoder on source data; returns the final checkpoint path."""
    with _threads(config):
        data = Dataset(config.data_dir)
        run = _prepare_run_dir(config)
        model = build_model(config, "source-only")
        params = {k: p for k, p in model.parameters().items() if k.startswith(PRETRAIN_PREFIXES)}
        state = AdamState(lr=config.lr)
        start = 0
        if resume_from is not None:
            t = load_checkpoint(resume_from)
            load_into(model, t, PRETRAIN_PREFIXES, str(resume_from))
            state = _restore_adam(t, config.dtype)
            state.lr = config.lr
            start = int(t["meta.step"][0])
        ids = data.ids("source")
        logf = run / "logs" / "pretrain.log"
        with open(logf, "a" if start else "w") as fh:
            for step in range(start + 1, config.pretrain_steps + 1):
                rng = np.random.default_rng([config.seed, STAGE_IDS["pretrain"], step])
                x, pts, lab, used = _supervised_batch(rng, ids, data, config)
                _zero(params)
                try:
                    loss = loss_if(model, x, pts, lab, "source")
                    adam_step(params, state)
                except NumericError as e:
                    dump = _dump_batch(run, "pretrain", step, x=x, points=pts, labels=lab)
                    raise NumericError(f"pretrain step {step}: {e}; batch {used} dumped to {dump}") from e
                fh.write(f"stage=pretrain step={step} kind=source L_IF={_fmt(loss)} "
                         f"L_CT=none masked=none loss={_fmt(loss)}\n")
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_run_checkpoint(run / "checkpoints" / f"pretrain-{step:06d}.ckpt", model,
                                        PRETRAIN_PREFIXES, state, step)
        final = run / "checkpoints" / "pretrain.ckpt"
        save_run_checkpoint(final, model, PRETRAIN_PREFIXES, state, config.pretrain_steps)
        return final


def adapt_schedule(config: ExperimentConfig, has_labeled=True):
    """Cycle of step kinds: source, target-labeled, then two target-unlabeled."""
    cycle = ["source", "target_labeled", "target_unlabeled", "target_unlabeled"]
    keep = []
    for k in cycle:
        if k == "source" and config.fusion_mode == "target-only":
            continue
        if k == "target_labeled" and not has_labeled:
            continue
        if k == "target_unlabeled" and not config.vcst:
            continue
        keep.append(k)
    if not keep:
        raise ConfigError("adaptation schedule is empty for this configuration")
    return keep


def _trainable(config, model):
    prefixes = list(MODE_PREFIXES[config.fusion_mode])
    if not config.finetune_source and config.fusion_mode != "source-only" and "g_s." in prefixes:
        prefixes.remove("g_s.")
    params = {k: p for k, p in model.parameters().items() if k.startswith(tuple(prefixes))}
    scale = 1.0 if config.fusion_mode == "source-only" else config.source_lr_scale
    lr_scale = {k: scale for k in params if k.startswith("g_s.")}
    return params, lr_scale


def _vcst_batch(rng, ids, data: Dataset, config):
    pick = rng.choice(len(ids), size=min(config.batch_size, len(ids)), replace=False)
    xa, xb, qs = [], [], []
    for i in pick:
        scan = data.scan(ids[i])
        pair = check_view_order(augmentation_variant(scan, config.augmentation,
                                                     seed=rng.integers(2 ** 63)))
        xa.append(voxelize(pair.view_a, config.resolution).values)
        xb.append(voxelize(pair.view_b, config.resolution).values)
        qs.append(sample_ct_queries(scan, config.ct_uniform, config.ct_near, config.ct_sigma,
                                    seed=rng.integers(2 ** 63)))
    dt = config.dtype
    return (np.stack(xa)[:, None].astype(dt), np.stack(xb)[:, None].astype(dt), np.stack(qs),
            [ids[i] for i in pick])


def run_adapt(config: ExperimentConfig, pretrained, resume_from=None) -> Path:
    """Joint adaptation stage; returns the final checkpoint path."""
    with _threads(config):
        data = Dataset(config.data_dir)
        run = _prepare_run_dir(config)
        model = build_model(config)
        prefixes = MODE_PREFIXES[config.fusion_mode]
        state = AdamState(lr=config.lr)
        start = 0
        if resume_from is None:
            load_into(model, load_checkpoint(pretrained), PRETRAIN_PREFIXES, str(pretrained))
            model.init_target_from_source()
        else:
            t = load_checkpoint(resume_from)
            load_into(model, t, prefixes, str(resume_from))
            state = _restore_adam(t, config.dtype)
            state.lr = config.lr
            start = int(t["meta.step"][0])
        params, lr_scale = _trainable(config, model)
        src_ids = data.ids("source")
        lab_ids = data.labeled_target(config.label_fraction)
        unl_ids = data.unlabeled_target(config.label_fraction)
        schedule = adapt_schedule(config, bool(lab_ids))
        src_domain = "target" if config.source_through_fusion else "source"
        logf = run / "logs" / "adapt.log"
        with open(logf, "a" if start else "w") as fh:
            for step in range(start + 1, config.adapt_steps + 1):
                kind = schedule[(step - 1) % len(schedule)]
                rng = np.random.default_rng([config.seed, STAGE_IDS["adapt"], step])
                _zero(params)
                l_if = l_ct = masked = None
                try:
                    if kind == "source":
                        x, pts, lab, used = _supervised_batch(rng, src_ids, data, config)
                        l_if = loss_if(model, x, pts, lab, src_domain)
                    elif kind == "target_labeled":
                        x, pts, lab, used = _supervised_batch(rng, lab_ids, data, config, True)
                        l_if = loss_if(model, x, pts, lab, "target")
                    else:
                        xa, xb, q, used = _vcst_batch(rng, unl_ids, data, config)
                        r = loss_ct(model, xa, xb, q, config.band, "target", weight=config.ct_weight)
                        l_ct, masked = r.loss, r.masked_fraction
                    adam_step(params, state, lr_scale)
                except NumericError as e:
                    arrays = ({"x": x, "points": pts, "labels": lab} if kind != "target_unlabeled"
                              else {"x_a": xa, "x_b": xb, "points": q})
                    dump = _dump_batch(run, "adapt", step, **arrays)
                    raise NumericError(f"adapt step {step} ({kind}): {e}; batch {used} "
                                       f"dumped to {dump}") from e
                total = (l_if or 0.0) + (l_ct or 0.0)
                fh.write(f"stage=adapt step={step} kind={kind} L_IF={_fmt(l_if)} L_CT={_fmt(l_ct)} "
                         f"masked={_fmt(masked)} loss={_fmt(total)}\n")
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_run_checkpoint(run / "checkpoints" / f"adapt-{step:06d}.ckpt", model,
                                        prefixes, state, step)
        final = run / "checkpoints" / "adapt.ckpt"
        save_run_checkpoint(final, model, prefixes, state, config.adapt_steps)
        return final


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalSample:
    sample_id: str
    category: str
    scan: object
    gt_mesh: object


def evaluation_samples(data: Dataset):
    out = []
    for sid in data.test_ids():
        r = data.by_id[sid]
        out.append(EvalSample(sid, r.category, data.scan(sid), data.mesh(sid)))
    return out


def run_eval(config: ExperimentConfig, checkpoint, mode=None, out_name="results.tsv"):
    """Evaluate a checkpoint on the target test split; returns (EvalResult, table path)."""
    with _threads(config):
        data = Dataset(config.data_dir)
        run = _prepare_run_dir(config)
        if not Path(checkpoint).exists():
            raise DataError(f"checkpoint {checkpoint} does not exist")
        model = load_model(config, checkpoint, mode)
        result = evaluate_samples(lambda s: predict_grid(model, s.scan, config.n_eval, "target"),
                                  evaluation_samples(data), config.n_eval, config.cd_samples, config.seed)
        path = run / "results" / out_name
        path.write_text(result.render())
        return result, path


def reconstruct_scan(config: ExperimentConfig, checkpoint, scan, mode=None, domain="target"):
    with _threads(config):
        model = load_model(config, checkpoint, mode)
        return mesh_from_grid(predict_grid(model, scan, config.n_eval, domain))


def run_pipeline(config: ExperimentConfig, pretrained=None, build=True):
    """build -> pretrain -> adapt -> eval.  Returns a dict of paths, result and stage timings."""
    timings = {}
    t = time.perf_counter()
    if build and not (Path(config.data_dir) / "manifest.json").exists():
        build_dataset(config)
    timings["build"] = time.perf_counter() - t
    t = time.perf_counter()
    if pretrained is None:
        pretrained = run_pretrain(config)
    timings["pretrain"] = time.perf_counter() - t
    t = time.perf_counter()
    adapted = run_adapt(config, pretrained)
    timings["adapt"] = time.perf_counter() - t
    t = time.perf_counter()
    result, table = run_eval(config, adapted)
    timings["eval"] = time.perf_counter() - t
    return {"pretrained": pretrained, "adapted": adapted, "result": result, "table": table,
            "timings": timings}


def baseline_config(config: ExperimentConfig, run_dir=None):
    """Naive reconstruction baseline: source encoder only, no self-training."""
    return config.replace(fusion_mode="source-only", vcst=False,
                          run_dir=run_dir or str(Path(config.run_dir).with_name(
                              Path(config.run_dir).name + "-baseline")))


# -- timing report -----------------------------------------------------------

def bench(config: ExperimentConfig, repeats=3):
    """Wall-clock timings of the main kernels on random inputs (seconds)."""
    from .mcubes import marching_cubes
    from .metrics import chamfer_l2

    with _threads(config):
        rng = np.random.default_rng(config.seed)
        model = build_model(config)
        B, P, N = config.batch_size, config.points_per_sample, config.resolution
        x = (rng.random((B, 1, N, N, N)) < 0.03).astype(config.dtype)
        pts = rng.uniform(-0.5, 0.5, (B, P, 3))
        lab = (rng.random((B, P)) < 0.3).astype(config.dtype)
        out = {}

        def timed(name, fn):
            best = math.inf
            for _ in range(repeats):
                t = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t)
            out[name] = best

        timed("step_source", lambda: loss_if(model, x, pts, lab, "source"))
        if model.mode != "target-only":
            timed("step_fused", lambda: loss_if(model, x, pts, lab, "target"))
        scan = rng.uniform(-0.4, 0.4, (300, 3))
        grid = predict_grid(model, scan, config.n_eval)
        timed("predict_grid", lambda: predict_grid(model, scan, config.n_eval))
        c = np.linspace(-0.5, 0.5, config.n_eval)
        sphere = 0.35 - np.sqrt(sum(a ** 2 for a in np.meshgrid(c, c, c, indexing="ij")))
        timed("marching_cubes", lambda: marching_cubes(sphere, iso=0.0))
        a, b = rng.random((config.cd_samples, 3)), rng.random((config.cd_samples, 3))
        timed("chamfer", lambda: chamfer_l2(a, b))
        del grid
        return out
