"""Training protocol: per-iteration update order G -> Seg -> (D_g & D_s)
with a fresh inference between phases, so each adversary always sees outputs
of the counterpart's current weights. Every step is traced (phase tags,
forward counts, parameter-version stamps) and every loss term logged.

All four models use Adam with identical hyperparameters; optimizer state,
parameters, buffers and RNG state go into raw-array checkpoint bundles so
an interrupted run resumes on the exact loss trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import container, contrastive, data as data_mod, nets
from .contrastive import ContrastiveConfig, GlobalFeatureBatch
from .errors import DataError, InvalidMode, LabelLeak, NonFiniteLoss
from .objectives import (GanLossConfig, LossLog, LossReport, gan_d_loss, gan_g_loss,
                         soft_dice_loss, total_generator_loss, total_segmenter_loss)

ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_update(params, grads, state, lr, betas, eps=ADAM_EPS):
    """One adaptive-moment step with bias correction.

    params/grads are parallel tensor lists (a grad may be None, leaving that
    parameter and its state untouched); state is {"step": [...], "m": [...],
    "v": [...]}. Returns (new_params, new_state) without mutating inputs.
    """
    b1, b2 = betas
    new_params, new_state = [], {"step": [], "m": [], "v": []}
    for p, g, t, m, v in zip(params, grads, state["step"], state["m"], state["v"]):
        if g is None:
            new_params.append(p.clone())
            new_state["step"].append(t)
            new_state["m"].append(m.clone())
            new_state["v"].append(v.clone())
            continue
        t = t + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (torch.sqrt(v_hat) + eps))
        new_state["step"].append(t)
        new_state["m"].append(m)
        new_state["v"].append(v)
    return new_params, new_state


class Adam:
    """Minimal Adam over an explicit parameter list, built on adam_update.

    Per-parameter step counts let a backward pass that only reaches a subset
    of the parameters (the encoder-only contrastive step) update just that
    subset.
    """

    def __init__(self, params, lr, betas, eps=ADAM_EPS):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = {"step": [0] * len(self.params),
                      "m": [torch.zeros_like(p) for p in self.params],
                      "v": [torch.zeros_like(p) for p in self.params]}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        # in-place twin of adam_update with the identical operation order
        # (kept equal by test); parameters without a gradient are untouched
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.state["step"][i] += 1
            t = self.state["step"][i]
            m, v = self.state["m"][i], self.state["v"][i]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(self.lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)).sqrt_().add_(self.eps)))

    def state_arrays(self, prefix):
        arrays = {}
        for i, p in enumerate(self.params):
            arrays[f"{prefix}/m/{i:04d}"] = self.state["m"][i].numpy()
            arrays[f"{prefix}/v/{i:04d}"] = self.state["v"][i].numpy()
        arrays[f"{prefix}/t"] = np.asarray(self.state["step"], dtype=np.int64)
        return arrays

    def load_state_arrays(self, prefix, arrays):
        steps = arrays[f"{prefix}/t"]
        for i, p in enumerate(self.params):
            self.state["m"][i] = torch.as_tensor(arrays[f"{prefix}/m/{i:04d}"]).to(p.dtype)
            self.state["v"][i] = torch.as_tensor(arrays[f"{prefix}/v/{i:04d}"]).to(p.dtype)
        self.state["step"] = [int(t) for t in steps]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 200
    seed: int = 0
    mode: str = "cisfa"                     # or "seg-only" for the reference baselines
    use_pcl: bool = True
    use_gcl: bool = True
    pcl_weighted: bool = True
    gcl_mode: str = "sum"                   # or "sequential"
    n_classes: int = 2
    image_size: int = 32
    epoch_ckpt_every: int = 0               # 0 disables per-epoch snapshots
    # per-term coefficients; the published objective writes none, so the
    # defaults stay at the literal 1.0 and desk presets may rebalance
    pcl_coeff: float = 1.0
    gcl_coeff: float = 1.0
    seg_adv_coeff: float = 1.0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    gan: GanLossConfig = field(default_factory=GanLossConfig)
    generator: nets.GeneratorSpec = field(default_factory=nets.GeneratorSpec)
    segmenter: nets.SegmenterSpec = field(default_factory=nets.SegmenterSpec)
    disc_base_channels: int = 16
    head: nets.ProjectionHeadSpec = field(default_factory=nets.ProjectionHeadSpec)

    def __post_init__(self):
        if self.mode not in ("cisfa", "seg-only"):
            raise InvalidMode(f"unknown training mode {self.mode!r}")
        if self.gcl_mode not in ("sum", "sequential"):
            raise InvalidMode(f"unknown gcl combination mode {self.gcl_mode!r}")
        self.segmenter.out_channels = self.n_classes + 1

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["generator"]["feature_layers"] = list(self.generator.feature_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["contrastive"] = ContrastiveConfig(**d["contrastive"])
        d["gan"] = GanLossConfig(**d["gan"])
        gen = dict(d["generator"])
        gen["feature_layers"] = tuple(gen["feature_layers"])
        d["generator"] = nets.GeneratorSpec(**gen)
        d["segmenter"] = nets.SegmenterSpec(**d["segmenter"])
        d["head"] = nets.ProjectionHeadSpec(**d["head"])
        return cls(**d)


@dataclass
class TrainData:
    """Slice pools and evaluation volumes for one fold of one direction."""

    train_source: list
    train_target: list | None
    val_volumes: list
    class_names: list
    plane: str = "transverse"


@dataclass
class StepTrace:
    """Ordered per-iteration event log proving the update protocol."""

    step: int
    events: list = field(default_factory=list)

    def add(self, phase, model, versions, forwards):
        self.events.append({"phase": phase, "model": model,
                            "versions": dict(versions), "forwards": dict(forwards)})

    def phases(self):
        return [e["phase"] for e in self.events]


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class ModelBundle:
    """Owns the four models, the projection heads, their optimizers, the RNG
    streams and the parameter-version stamps."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.G = nets.Generator(cfg.generator)
        self.Seg = nets.Segmenter(cfg.segmenter)
        self.Dg = nets.Discriminator(nets.DiscriminatorSpec(
            in_channels=1, base_channels=cfg.disc_base_channels))
        self.Ds = nets.Discriminator(nets.DiscriminatorSpec(
            in_channels=cfg.n_classes + 1, base_channels=cfg.disc_base_channels))
        self.patch_heads = nets.PatchHeads(cfg.head)
        self.global_head = nets.ProjectionHead(self.Seg.global_feature_dim, cfg.head)
        # patch heads depend on tap shapes; materialize them now so the
        # optimizer can own their parameters from step one
        with torch.no_grad():
            dummy = torch.zeros(1, 1, cfg.image_size, cfg.image_size)
            feats = self.G.encode(dummy)
            feats.pop("_bottleneck")
            self.patch_heads.materialize(feats)
        betas = (cfg.beta1, cfg.beta2)
        self.opt = {
            "G": Adam(list(self.G.parameters()) + list(self.patch_heads.parameters()),
                      cfg.lr, betas),
            "Seg": Adam(list(self.Seg.parameters()) + list(self.global_head.parameters()),
                        cfg.lr, betas),
            "Dg": Adam(self.Dg.parameters(), cfg.lr, betas),
            "Ds": Adam(self.Ds.parameters(), cfg.lr, betas),
        }
        self.versions = {"G": 0, "Seg": 0, "Dg": 0, "Ds": 0}
        self.forwards = {"G": 0, "Seg": 0, "Dg": 0, "Ds": 0}
        self.rng = np.random.default_rng(cfg.seed)
        self.global_step = 0
        self.epoch = 0
        self.best_val = -math.inf

    def modules(self):
        return {"G": self.G, "patch_heads": self.patch_heads, "Seg": self.Seg,
                "global_head": self.global_head, "Dg": self.Dg, "Ds": self.Ds}

    def stepped(self, name):
        self.opt[name].step()
        self.versions[name] += 1

    def train_mode(self):
        for m in self.modules().values():
            m.train()

    def eval_mode(self):
        for m in self.modules().values():
            m.eval()

    # -- checkpointing ------------------------------------------------------

    def save(self, path: Path, extra_meta=None):
        arrays = {}
        for name, module in self.modules().items():
            for pname, p in module.named_parameters():
                arrays[f"param/{name}/{pname}"] = p.detach().numpy()
            for bname, buf in module.named_buffers():
                arrays[f"buffer/{name}/{bname}"] = buf.detach().numpy()
        for name, opt in self.opt.items():
            arrays.update(opt.state_arrays(f"opt/{name}"))
        arrays["rng/torch"] = torch.get_rng_state().numpy()
        meta = {
            "config": self.cfg.to_dict(),
            "versions": self.versions,
            "global_step": self.global_step,
            "epoch": self.epoch,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "rng_numpy": self.rng.bit_generator.state,
            **(extra_meta or {}),
        }
        container.save_bundle(path, arrays, meta)

    @classmethod
    def load(cls, path: Path) -> "ModelBundle":
        arrays, meta = container.load_bundle(path)
        bundle = cls(TrainConfig.from_dict(meta["config"]))
        with torch.no_grad():
            for name, module in bundle.modules().items():
                for pname, p in module.named_parameters():
                    p.copy_(torch.as_tensor(arrays[f"param/{name}/{pname}"]))
                for bname, buf in module.named_buffers():
                    buf.copy_(torch.as_tensor(arrays[f"buffer/{name}/{bname}"]).to(buf.dtype))
        for name, opt in bundle.opt.items():
            opt.load_state_arrays(f"opt/{name}", arrays)
        torch.set_rng_state(torch.as_tensor(arrays["rng/torch"], dtype=torch.uint8))
        bundle.rng.bit_generator.state = meta["rng_numpy"]
        bundle.versions = {k: int(v) for k, v in meta["versions"].items()}
        bundle.global_step = int(meta["global_step"])
        bundle.epoch = int(meta["epoch"])
        bundle.best_val = meta["best_val"] if meta["best_val"] is not None else -math.inf
        return bundle


def load_checkpoint(path: Path) -> ModelBundle:
    """Load a checkpoint bundle for inference or resumption."""
    return ModelBundle.load(path)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _stack_images(batch):
    return torch.stack([torch.as_tensor(s.image, dtype=torch.float32).unsqueeze(0)
                        for s in batch])


def _stack_labels(batch):
    return torch.stack([torch.as_tensor(np.ascontiguousarray(s.label), dtype=torch.long)
                        for s in batch])


def _guard_batches(batch_a, batch_b):
    if not batch_a:
        raise DataError("source batch is empty")
    for s in batch_a:
        if s.label is None:
            raise DataError(f"source slice {s.volume_id}[{s.slice_index}] lacks a label")
    if batch_b is not None:
        if not batch_b:
            raise DataError("target batch is empty")
        for s in batch_b:
            if s.label is not None:
                raise LabelLeak(
                    f"target slice {s.volume_id}[{s.slice_index}] carries a label")


# ---------------------------------------------------------------------------
# the training step
# ---------------------------------------------------------------------------

def _patch_losses(bundle, feats_a, feats_hat, labels, cfg):
    """Weighted patch InfoNCE per tapped layer, averaged over the batch.
    One position draw per layer is shared by the input and its translation;
    the whole batch goes through the projection head in one call (same math
    as contrastive.project_patches, kept equal by test)."""
    ccfg = cfg.contrastive
    per_layer = {}
    taps = [bundle.G._resolve_tap(t) for t in cfg.generator.feature_layers]
    for tap in taps:
        fa, fh = feats_a[tap], feats_hat[tap]
        bsz, ch, h_l, w_l = fa.shape
        positions = contrastive.sample_patch_positions(
            (h_l, w_l), min(ccfg.n_patches_per_layer, h_l * w_l), bundle.rng)
        n = len(positions)
        head = bundle.patch_heads.head_for(tap, ch)
        rows = torch.as_tensor(positions[:, 0], dtype=torch.long)
        cols = torch.as_tensor(positions[:, 1], dtype=torch.long)
        gathered = torch.cat([fa[:, :, rows, cols], fh[:, :, rows, cols]], dim=0)
        flat = gathered.permute(0, 2, 1).reshape(2 * bsz * n, ch)
        proj = F.normalize(head(flat), dim=1, eps=1e-10).reshape(2 * bsz, n, -1)
        losses = []
        for b in range(bsz):
            if cfg.pcl_weighted:
                wmap = contrastive.patch_weight_map(labels[b], (h_l, w_l), ccfg.w)
                weights = contrastive.weights_at_positions(wmap, positions)
            else:
                weights = torch.ones(n)
            keys = contrastive.PatchFeatureSet(tap, proj[b], positions, torch.ones(n))
            queries = contrastive.PatchFeatureSet(tap, proj[bsz + b], positions, weights)
            losses.append(contrastive.patch_nce_loss(keys, queries, ccfg))
        per_layer[tap] = torch.stack(losses).mean()
    return per_layer


def _global_loss(bundle, x_a, x_hat, tau):
    """NT-Xent between the segmenter-encoder embeddings of the inputs and
    their translations; rows 0..t-1 are inputs, t..2t-1 translations."""
    stacked = torch.cat([x_a, x_hat], dim=0)
    bundle.forwards["Seg"] += 1
    z_raw = bundle.Seg.global_feature(stacked)
    z = F.normalize(bundle.global_head(z_raw), dim=1, eps=1e-10)
    return contrastive.global_nce_loss(GlobalFeatureBatch(z), tau)


def train_step(bundle: ModelBundle, batch_a, batch_b, cfg: TrainConfig):
    """One full iteration of the protocol. Returns (bundle, report, trace).

    Raises LabelLeak if any target slice carries a label and NonFiniteLoss
    if any loss term is NaN/Inf.
    """
    _guard_batches(batch_a, batch_b)
    x_a, y_a = _stack_images(batch_a), _stack_labels(batch_a)
    x_b = _stack_images(batch_b)
    report = LossReport(step=bundle.global_step)
    trace = StepTrace(step=bundle.global_step)
    bundle.train_mode()

    # phase 1: generator (adversarial + weighted patch contrastive)
    bundle.opt["G"].zero_grad()
    labels_np = [np.asarray(s.label) for s in batch_a]
    bundle.forwards["G"] += 1
    x_hat, feats_a = bundle.G.forward_with_features(x_a)
    bundle.forwards["Dg"] += 1
    g_adv = gan_g_loss(bundle.Dg(x_hat), cfg.gan)
    pcl = {}
    if cfg.use_pcl:
        bundle.forwards["G"] += 1
        feats_hat = bundle.G.encode(x_hat)
        feats_hat.pop("_bottleneck")
        pcl = _patch_losses(bundle, feats_a, feats_hat, labels_np, cfg)
    loss_g, g_parts = total_generator_loss(g_adv, pcl, pcl_coeff=cfg.pcl_coeff)
    loss_g.backward()
    bundle.stepped("G")
    report.record(g_parts)
    trace.add("G-update", "G", bundle.versions, bundle.forwards)

    # re-infer the translation with the just-updated generator
    with torch.no_grad():
        bundle.forwards["G"] += 1
        x_hat = bundle.G(x_a).detach()
    trace.add("G-reinfer", "G", bundle.versions, bundle.forwards)

    # phase 2: segmenter (dice + adversarial-on-mask [+ global contrastive])
    gcl_value = None
    if cfg.use_gcl and cfg.gcl_mode == "sequential":
        bundle.opt["Seg"].zero_grad()
        gcl = _global_loss(bundle, x_a, x_hat, cfg.contrastive.tau)
        gcl.backward()          # reaches only the downsampling path + head
        bundle.stepped("Seg")
        gcl_value = gcl.detach()
        trace.add("Seg-enc-update", "Seg", bundle.versions, bundle.forwards)
    bundle.opt["Seg"].zero_grad()
    bundle.forwards["Seg"] += 1
    probs = torch.softmax(bundle.Seg(x_hat), dim=1)
    dice = soft_dice_loss(probs, y_a)
    bundle.forwards["Ds"] += 1
    seg_adv = gan_g_loss(bundle.Ds(probs), cfg.gan)
    gcl = None
    if cfg.use_gcl and cfg.gcl_mode == "sum":
        gcl = _global_loss(bundle, x_a, x_hat, cfg.contrastive.tau)
        gcl_value = gcl.detach()
    loss_seg, seg_parts = total_segmenter_loss(dice, seg_adv, gcl, mode=cfg.gcl_mode,
                                                gcl_coeff=cfg.gcl_coeff, adv_coeff=cfg.seg_adv_coeff)
    loss_seg.backward()
    bundle.stepped("Seg")
    if gcl_value is not None and "L_gcl" not in seg_parts:
        seg_parts["L_gcl"] = gcl_value
    report.record(seg_parts)
    trace.add("Seg-update", "Seg", bundle.versions, bundle.forwards)

    # re-infer the masks with the just-updated segmenter
    with torch.no_grad():
        bundle.forwards["Seg"] += 2
        s_b = torch.softmax(bundle.Seg(x_b), dim=1).detach()
        s_hat = torch.softmax(bundle.Seg(x_hat), dim=1).detach()
    trace.add("Seg-reinfer", "Seg", bundle.versions, bundle.forwards)

    # phase 3: discriminators on detached inputs
    bundle.opt["Dg"].zero_grad()
    bundle.forwards["Dg"] += 2
    d_g = gan_d_loss(bundle.Dg(x_b), bundle.Dg(x_hat), cfg.gan)
    d_g.backward()
    bundle.stepped("Dg")
    report.record({"L_D_G": d_g})
    trace.add("Dg-update", "Dg", bundle.versions, bundle.forwards)

    bundle.opt["Ds"].zero_grad()
    bundle.forwards["Ds"] += 2
    d_s = gan_d_loss(bundle.Ds(s_b), bundle.Ds(s_hat), cfg.gan)
    d_s.backward()
    bundle.stepped("Ds")
    report.record({"L_D_S": d_s})
    trace.add("Ds-update", "Ds", bundle.versions, bundle.forwards)

    if not report.finite():
        raise NonFiniteLoss(f"non-finite loss at step {bundle.global_step}: "
                            f"{json.dumps(report.scalars)}")
    bundle.global_step += 1
    return bundle, report, trace


def seg_only_step(bundle: ModelBundle, batch_a, cfg: TrainConfig):
    """Supervised dice-only step for the reference modes (no adaptation /
    fully supervised)."""
    _guard_batches(batch_a, None)
    x, y = _stack_images(batch_a), _stack_labels(batch_a)
    report = LossReport(step=bundle.global_step)
    trace = StepTrace(step=bundle.global_step)
    bundle.train_mode()
    bundle.opt["Seg"].zero_grad()
    bundle.forwards["Seg"] += 1
    probs = torch.softmax(bundle.Seg(x), dim=1)
    dice = soft_dice_loss(probs, y)
    dice.backward()
    bundle.stepped("Seg")
    report.record({"L_dice": dice, "L_seg_total": dice})
    trace.add("Seg-update", "Seg", bundle.versions, bundle.forwards)
    if not report.finite():
        raise NonFiniteLoss(f"non-finite loss at step {bundle.global_step}: "
                            f"{json.dumps(report.scalars)}")
    bundle.global_step += 1
    return bundle, report, trace


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

@torch.no_grad()
def translate_slices(bundle: ModelBundle, images, chunk=16):
    """Run the generator over a list/array of 2D slices; returns an array."""
    bundle.G.eval()
    out = []
    tensor = torch.as_tensor(np.stack(images), dtype=torch.float32).unsqueeze(1)
    for i in range(0, tensor.shape[0], chunk):
        out.append(bundle.G(tensor[i:i + chunk]).squeeze(1).numpy())
    return np.concatenate(out)


@torch.no_grad()
def segment_slices(seg: nets.Segmenter, images, chunk=16):
    """Argmax segmentation of 2D slices; returns an int array D x H x W."""
    seg.eval()
    tensor = torch.as_tensor(np.stack(images), dtype=torch.float32).unsqueeze(1)
    out = []
    for i in range(0, tensor.shape[0], chunk):
        logits = seg(tensor[i:i + chunk])
        out.append(logits.argmax(dim=1).numpy().astype(np.int16))
    return np.concatenate(out)


def _foreground_dice(pred, gt, n_classes):
    from .metrics import dice_score
    return float(np.mean([dice_score(pred == c, gt == c) for c in range(1, n_classes + 1)]))


def validate(bundle: ModelBundle, volumes, cfg: TrainConfig, plane="transverse",
             translate: bool = True):
    """Mean foreground dice over validation volumes; in the adaptation mode
    the source validation images are first pushed through the generator."""
    bundle.eval_mode()
    scores = []
    for vol in volumes:
        slices = [s.image for s in data_mod.decompose_slices(vol, plane)]
        imgs = translate_slices(bundle, slices) if translate else np.stack(slices)
        pred = segment_slices(bundle.Seg, imgs)
        axis = data_mod.PLANE_AXES[plane]
        gt = np.moveaxis(vol.labels, axis, 0)
        scores.append(_foreground_dice(pred, gt, cfg.n_classes))
    bundle.train_mode()
    return float(np.mean(scores)) if scores else float("nan")


# ---------------------------------------------------------------------------
# the fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    run_dir: Path
    history: list
    best_val: float
    ckpt_last: Path
    ckpt_best: Path


def fit(cfg: TrainConfig, train_data: TrainData, run_dir: Path,
        resume_from: Path | None = None) -> FitResult:
    """Train per the configured mode, checkpointing 'last' and
    'best-validation' every epoch. Deterministic for a fixed seed."""
    run_dir = container.ensure_dir(run_dir)
    ckpt_last, ckpt_best = run_dir / "ckpt_last", run_dir / "ckpt_best"
    if resume_from is not None:
        bundle = ModelBundle.load(resume_from)
        if bundle.cfg.to_dict() != cfg.to_dict():
            raise InvalidMode("resume config differs from checkpoint config")
    else:
        bundle = ModelBundle(cfg)
    loss_log = LossLog(run_dir)
    history_path = run_dir / "history.json"
    history = json.loads(history_path.read_text()) if history_path.exists() else []

    if cfg.mode == "cisfa":
        if train_data.train_target is None:
            raise DataError("adaptation training needs target-domain slices")
        batcher = data_mod.TrainBatcher(train_data.train_source, train_data.train_target,
                                        cfg.batch_size, bundle.rng)
    else:
        batcher = None

    try:
        for epoch in range(bundle.epoch, cfg.epochs):
            if cfg.mode == "cisfa":
                for batch_a, batch_b in batcher.epoch():
                    bundle, report, _ = train_step(bundle, batch_a, batch_b, cfg)
                    loss_log.append(report)
            else:
                pool = train_data.train_source
                perm = bundle.rng.permutation(len(pool))
                n_iter = max(1, len(pool) // cfg.batch_size)
                for i in range(n_iter):
                    idx = [perm[j % len(pool)] for j in
                           range(i * cfg.batch_size, (i + 1) * cfg.batch_size)]
                    bundle, report, _ = seg_only_step(bundle, [pool[j] for j in idx], cfg)
                    loss_log.append(report)
            val = validate(bundle, train_data.val_volumes, cfg, plane=train_data.plane,
                           translate=(cfg.mode == "cisfa"))
            bundle.epoch = epoch + 1
            history.append({"epoch": epoch, "val_dice": val, "step": bundle.global_step})
            if val > bundle.best_val:
                bundle.best_val = val
                bundle.save(ckpt_best)
            bundle.save(ckpt_last)
            if cfg.epoch_ckpt_every and (epoch + 1) % cfg.epoch_ckpt_every == 0:
                bundle.save(run_dir / f"ckpt_epoch_{epoch}")
            history_path.write_text(json.dumps(history, indent=1))
    except NonFiniteLoss as err:
        (run_dir / "nonfinite_dump.json").write_text(json.dumps(
            {"error": str(err), "history": history}, indent=1))
        raise
    if not ckpt_best.exists():
        bundle.save(ckpt_best)
    return FitResult(run_dir=run_dir, history=history, best_val=bundle.best_val,
                     ckpt_last=ckpt_last, ckpt_best=ckpt_best)


def build_train_data(root: Path, folds: data_mod.FoldAssignment, source: str, target: str,
                     heldout_fold: int, plane: str = "transverse",
                     train_domain: str | None = None, class_names=None) -> TrainData:
    """Assemble slice pools for one fold: training slices come from every
    fold but the held-out one; the source-domain held-out fold is the
    validation set. ``train_domain`` switches the seg-only reference modes
    between source (no adaptation) and target (supervised ceiling)."""
    if train_domain is None:
        train_domain = source
    train_source = data_mod.training_slices(root, folds, train_domain, heldout_fold)
    train_target = data_mod.training_slices(root, folds, target, heldout_fold)
    val_volumes = data_mod.fold_volumes(root, folds, train_domain, heldout_fold)
    return TrainData(train_source=train_source, train_target=train_target,
                     val_volumes=val_volumes,
                     class_names=list(class_names or []), plane=plane)
