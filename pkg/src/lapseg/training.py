"""Stage-wise SGD training: schedule, optimizer, checkpoints, loss CSV.

Stage 1 trains the coarsest branch alone; later stages add the finer
branches and the dilation/erosion objectives. Every random draw is keyed by
(seed, iteration), so training is bit-reproducible and a run resumed from a
checkpoint matches the uninterrupted one exactly.
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import model
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentSpec, augment, extract_class_patches, load_manifest
from .evaluation import ConfusionMatrix, metrics, trimap_band
from .losses import assemble_losses, build_de_targets, stack_de_targets
from .model import ModelConfig
from .reconstruction import build_bank, downsample_basis, fit_basis_pca
from .rng import Stream, derive_key
from .tensor import NumericalError

log = logging.getLogger(__name__)

CSV_COLUMNS = ["iteration", "stage", "loss_32x", "loss_16x", "loss_8x", "loss_4x",
               "loss_dil", "loss_ero", "total"]
ALL_BRANCHES = (32, 16, 8, 4)


@dataclass(frozen=True)
class Stage:
    strides: tuple      # coarse-first prefix of (32, 16, 8, 4)
    use_de: bool
    iterations: int
    lr: float


@dataclass
class TrainConfig:
    train_manifest: str
    out_dir: str
    val_manifest: str = ""
    num_classes: int = 5
    bases_per_class: int = 10
    basis_init: str = "pca"            # pca | tent
    patch_count: int = 10000
    patch_size: int = 32
    patch_min_coverage: float = 0.02
    stages: tuple = (Stage((32,), False, 400, 1e-2),
                     Stage(ALL_BRANCHES, True, 400, 1e-3))
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0005
    de_radius: int = 32
    de_weight: float = 1.0
    masking: bool = True
    confidence_tau: float = 0.0
    mask_pool: int = 9
    augment: bool = True
    aug_min: int = 96
    aug_max: int = 224
    aug_crop: int = 128
    loss_on_raw: bool = False
    train_bases: bool = False
    seed: int = 0
    deterministic: bool = True
    precision: int = 32
    checkpoint_every: int = 0
    widths: tuple = (16, 32, 64, 128)
    convs_per_stage: int = 2

    def __post_init__(self):
        if self.stages[0].strides != (32,):
            raise ValueError("stage 1 must activate only the 32x branch")
        for st in self.stages:
            if st.strides != ALL_BRANCHES[:len(st.strides)]:
                raise ValueError(f"stage strides {st.strides} must be a coarse-first prefix")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.basis_init not in ("pca", "tent"):
            raise ValueError("basis_init must be pca or tent")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def model_config(self):
        return ModelConfig(num_classes=self.num_classes,
                           bases_per_class=self.bases_per_class,
                           widths=self.widths, convs_per_stage=self.convs_per_stage,
                           mask_pool=self.mask_pool,
                           confidence_tau=self.confidence_tau,
                           masking=self.masking, seed=self.seed)

    def total_iterations(self):
        return sum(st.iterations for st in self.stages)

    def stage_at(self, iteration):
        """Stage index owning a zero-based global iteration."""
        seen = 0
        for i, st in enumerate(self.stages):
            seen += st.iterations
            if iteration < seen:
                return i
        raise IndexError(f"iteration {iteration} past the schedule")

    def digest(self) -> int:
        """FNV-1a hash of the training-relevant config (output paths excluded)."""
        text = canonical_config_text(self, skip=("out_dir", "val_manifest"))
        h = 0xCBF29CE484222325
        for b in text.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
        return h


def _stage_to_text(stages):
    parts = []
    for st in stages:
        tokens = [f"{s}x" for s in st.strides] + (["de"] if st.use_de else [])
        parts.append(f"{'+'.join(tokens)}:{st.iterations}:{st.lr:g}")
    return ", ".join(parts)


def _parse_stages(text):
    stages = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            branches, iters, lr = part.split(":")
        except ValueError:
            raise ValueError(f"bad stage spec {part!r}, expected branches:iters:lr") from None
        use_de = False
        strides = []
        if branches.strip() == "all":
            strides = list(ALL_BRANCHES)
            use_de = True
        else:
            for tok in branches.split("+"):
                tok = tok.strip()
                if tok == "de":
                    use_de = True
                elif tok.endswith("x") and tok[:-1].isdigit():
                    strides.append(int(tok[:-1]))
                else:
                    raise ValueError(f"unknown branch token {tok!r}")
        stages.append(Stage(tuple(strides), use_de, int(iters), float(lr)))
    return tuple(stages)


_BOOL_KEYS = {"masking", "augment", "loss_on_raw", "train_bases", "deterministic"}
_INT_KEYS = {"num_classes", "bases_per_class", "patch_count", "patch_size", "batch_size",
             "de_radius", "mask_pool", "aug_min", "aug_max", "aug_crop", "seed",
             "precision", "checkpoint_every", "convs_per_stage"}
_FLOAT_KEYS = {"patch_min_coverage", "momentum", "weight_decay", "de_weight",
               "confidence_tau"}
_STR_KEYS = {"train_manifest", "val_manifest", "out_dir", "basis_init"}


def parse_config(path):
    """Read a key = value config file; # starts a comment, unknown keys error."""
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in values:
                raise ValueError(f"{path}:{ln}: duplicate key {key!r}")
            if key == "stages":
                values[key] = _parse_stages(val)
            elif key == "widths":
                values[key] = tuple(int(v) for v in val.split(","))
            elif key in _BOOL_KEYS:
                if val.lower() not in ("true", "false"):
                    raise ValueError(f"{path}:{ln}: {key} must be true or false")
                values[key] = val.lower() == "true"
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _STR_KEYS:
                values[key] = val
            else:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
    for req in ("train_manifest", "out_dir"):
        if req not in values:
            raise ValueError(f"{path}: missing required key {req!r}")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("train_manifest", "val_manifest", "out_dir"):
        if values.get(key):
            values[key] = os.path.normpath(os.path.join(base, values[key]))
    return TrainConfig(**values)


def canonical_config_text(cfg: TrainConfig, skip=()) -> str:
    lines = []
    for key in sorted(vars(cfg)):
        if key in skip:
            continue
        val = getattr(cfg, key)
        if key == "stages":
            val = _stage_to_text(val)
        elif isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)


def sgd_step(params, grads, state: OptimState, active=None):
    """v <- m*v - lr*(g + wd*p); p <- p + v. Only `active` names are touched."""
    names = sorted(grads) if active is None else [n for n in sorted(grads) if n in active]
    for name in names:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
        p = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v - state.lr * (g.astype(p.dtype) + state.weight_decay * p)
        state.velocity[name] = v
        params[name] = p + v
    return params, state


def active_param_names(params, stage: Stage, train_bases=False):
    """Backbone plus the heads (and optionally banks) of the stage's branches."""
    names = {n for n in params if n.startswith("backbone.")}
    for s in stage.strides:
        names.add(f"head.{s}.weight")
        names.add(f"head.{s}.bias")
        if train_bases:
            names.add(f"bank.{s}")
    if stage.use_de:
        names.add("de.weight")
        names.add("de.bias")
    return names


# ---------------------------------------------------------------------------
# basis initialization

def fit_bank_from_samples(samples, cfg: TrainConfig):
    """Per-class PCA dictionary, downsampled to the branch support size."""
    mc = cfg.model_config()
    target = 2 * mc.pyramid().recon_stride
    comps = []
    for c in range(cfg.num_classes):
        pset = extract_class_patches(samples, c, count=cfg.patch_count,
                                     patch=cfg.patch_size,
                                     min_coverage=cfg.patch_min_coverage,
                                     seed=cfg.seed)
        full, _ = fit_basis_pca(pset, cfg.bases_per_class)
        comps.append(downsample_basis(full, target) if full.shape[0] else full)
    return build_bank(mc.pyramid().recon_stride, cfg.bases_per_class,
                      cfg.num_classes, comps, dtype=cfg.dtype)


# ---------------------------------------------------------------------------
# the loop

def _digest_tensor(cfg):
    d = cfg.digest()
    return np.array([(d >> (8 * i)) & 0xFF for i in range(8)], dtype=np.float32)


def arch_tensor(mc: ModelConfig):
    """Model structure packed for the checkpoint, so inference can rebuild it."""
    return np.array([mc.num_classes, mc.bases_per_class, *mc.widths, mc.mask_pool,
                     1.0 if mc.masking else 0.0, mc.confidence_tau, mc.seed,
                     mc.convs_per_stage], dtype=np.float32)


def arch_from_tensor(vec):
    return ModelConfig(num_classes=int(vec[0]), bases_per_class=int(vec[1]),
                       widths=tuple(int(v) for v in vec[2:6]), mask_pool=int(vec[6]),
                       masking=bool(vec[7]), confidence_tau=float(vec[8]),
                       seed=int(vec[9]),
                       convs_per_stage=int(vec[10]) if len(vec) > 10 else 2)


def _batch(samples, cfg: TrainConfig, iteration):
    st = Stream(cfg.seed, "batch", iteration)
    idx = [st.randint(0, len(samples)) for _ in range(cfg.batch_size)]
    picked = [samples[i] for i in idx]
    if cfg.augment:
        spec = AugmentSpec(cfg.aug_min, cfg.aug_max, cfg.aug_crop, seed=cfg.seed)
        n_sizes = (cfg.aug_max - cfg.aug_min) // 32 + 1
        size = cfg.aug_min + 32 * st.randint(0, n_sizes)  # one size per batch
        picked = [augment(s, spec, derive_key(cfg.seed, "aug", iteration, slot),
                          size_override=size)
                  for slot, s in enumerate(picked)]
    images = np.stack([s.image for s in picked]).astype(cfg.dtype)
    truth = np.stack([s.truth for s in picked])
    return images, truth


def train(cfg: TrainConfig, resume=None):
    """Run the staged schedule; returns the final checkpoint path."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    samples = load_manifest(cfg.train_manifest)
    if not samples:
        raise ValueError(f"no samples in {cfg.train_manifest}")
    mc = cfg.model_config()

    start_iter = 0
    if resume:
        blob = load_checkpoint(resume)
        if not np.array_equal(blob["meta.config_digest"], _digest_tensor(cfg)):
            raise ValueError("checkpoint was produced by a different config")
        params = {k: v.astype(cfg.dtype) for k, v in blob.items()
                  if not k.startswith(("optim.", "meta."))}
        velocity = {k[len("optim."):]: v.astype(cfg.dtype) for k, v in blob.items()
                    if k.startswith("optim.")}
        start_iter = int(blob["meta.iteration"][0])
        log.info("resumed from %s at iteration %d", resume, start_iter)
    else:
        if cfg.basis_init == "pca":
            bank = fit_bank_from_samples(samples, cfg)
        else:
            bank = build_bank(mc.pyramid().recon_stride, cfg.bases_per_class,
                              cfg.num_classes, dtype=cfg.dtype)
        params = model.init_params(mc, bank, dtype=cfg.dtype)
        velocity = {}

    csv_path = os.path.join(cfg.out_dir, "loss.csv")
    csv_mode = "a" if resume else "w"
    state = OptimState(lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       velocity=velocity)

    def dump(path, iteration, p=None, v=None):
        blob = dict(p if p is not None else params)
        blob.update({f"optim.{k}": val for k, val in (v if v is not None
                                                      else state.velocity).items()})
        blob["meta.iteration"] = np.array([iteration], dtype=np.float32)
        blob["meta.config_digest"] = _digest_tensor(cfg)
        blob["meta.arch"] = arch_tensor(mc)
        save_checkpoint(path, blob)
        return path

    snapshot = None   # (iteration, params copy, velocity copy) from the last finite loss
    total = cfg.total_iterations()
    with open(csv_path, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if not resume:
            writer.writerow(CSV_COLUMNS)
        for it in range(start_iter, total):
            stage_idx = cfg.stage_at(it)
            stage = cfg.stages[stage_idx]
            state.lr = stage.lr
            images, truth = _batch(samples, cfg, it)
            try:
                if stage.use_de:
                    levels, cache, de_logits = model.forward(
                        params, mc, images, active_strides=stage.strides, with_de=True)
                    de_targets = stack_de_targets([
                        build_de_targets(t, cfg.de_radius, model.DE_OUT_FACTOR,
                                         cfg.num_classes) for t in truth])
                else:
                    levels, cache = model.forward(params, mc, images,
                                                  active_strides=stage.strides)
                    de_logits = de_targets = None

                report, level_grads, de_grads = assemble_losses(
                    levels, truth, de_logits=de_logits, de_targets=de_targets,
                    de_weight=cfg.de_weight, on_raw=cfg.loss_on_raw)
                if not np.isfinite(report.total):
                    raise NumericalError(f"loss diverged at iteration {it}")
                grads = model.backward(params, mc, cache, level_grads,
                                       de_grads=de_grads, train_bases=cfg.train_bases)
                sgd_step(params, grads, state,
                         active=active_param_names(params, stage, cfg.train_bases))
            except NumericalError:
                if snapshot is not None:
                    dump(os.path.join(cfg.out_dir, "checkpoint_lastgood.lrrc"),
                         snapshot[0], p=snapshot[1], v=snapshot[2])
                raise

            snapshot = (it + 1, {k: v.copy() for k, v in params.items()},
                        {k: v.copy() for k, v in state.velocity.items()})
            row = {s: report.branch.get(s, 0.0) for s in ALL_BRANCHES}
            writer.writerow([it, stage_idx + 1,
                             f"{row[32]:.6f}", f"{row[16]:.6f}", f"{row[8]:.6f}",
                             f"{row[4]:.6f}", f"{report.de_dilation:.6f}",
                             f"{report.de_erosion:.6f}", f"{report.total:.6f}"])

            done = it + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total:
                dump(os.path.join(cfg.out_dir, f"checkpoint_iter{done:06d}.lrrc"), done)
            if done < total and cfg.stage_at(done) != stage_idx:
                dump(os.path.join(cfg.out_dir, f"checkpoint_stage{stage_idx + 1}.lrrc"), done)
    return dump(os.path.join(cfg.out_dir, "checkpoint_final.lrrc"), total)


# ---------------------------------------------------------------------------
# evaluation helpers over in-memory samples

def evaluate_levels(params, mc: ModelConfig, samples, band_radius=None, batch=8):
    """Mean IoU of the final output and of each branch's upsampled intermediate.

    Returns {"levels": {stride: MetricSummary}, "band": {stride: float}} where
    band holds boundary-band mean IoU when band_radius is given. Samples of
    equal extents are processed in batches.
    """
    cms = {}
    band_cms = {}
    for lo in range(0, len(samples), batch):
        chunk = samples[lo:lo + batch]
        if len({s.truth.shape for s in chunk}) != 1:
            chunk_groups = [[s] for s in chunk]
        else:
            chunk_groups = [chunk]
        for group in chunk_groups:
            images = np.stack([s.image for s in group]).astype(np.float32)
            levels, _ = model.forward(params, mc, images)
            maps = model.level_label_maps(levels, group[0].truth.shape)
            for bi, s in enumerate(group):
                band = trimap_band(s.truth, band_radius) if band_radius else None
                for stride, pred in maps.items():
                    cms.setdefault(stride, ConfusionMatrix(mc.num_classes)) \
                        .accumulate(pred[bi], s.truth)
                    if band is not None:
                        band_cms.setdefault(stride, ConfusionMatrix(mc.num_classes)) \
                            .accumulate(pred[bi], s.truth, region=band)
    out = {"levels": {k: metrics(v) for k, v in cms.items()},
           "band": {k: metrics(v).mean_iou for k, v in band_cms.items()} if band_cms else {}}
    return out
