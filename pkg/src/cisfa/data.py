"""Dataset ingestion, preprocessing, fold splitting, slice decomposition,
and a synthetic two-domain dataset for desk-scale experiments.

Volumes live on disk in the portable container layout
(``<root>/<domain>/<volume_id>/{image.bin,label.bin,meta.json}``); in memory
they are :class:`Volume` objects. Training consumes 2D :class:`SliceSample`
batches produced by :class:`TrainBatcher`, which enforces the target-domain
label firewall: it never emits a label for a target-domain slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import container
from .errors import DataError, DegenerateVolume, InvalidROI, TooFewVolumes

PLANE_AXES = {"transverse": 0, "axial": 0, "coronal": 1, "sagittal": 2}

MODALITIES = ("source", "target", "synthetic-A", "synthetic-B")


@dataclass
class Volume:
    """3D intensity array with spacing, modality tag and optional labels."""

    voxels: np.ndarray          # D x H x W float
    spacing: tuple              # per-axis spacing in mm
    modality: str
    id: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DataError(f"volume {self.id}: voxels must be 3D")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"volume {self.id}: spacing must be 3 positive values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.voxels.shape:
                raise DataError(f"volume {self.id}: labels shape differs from voxels")
            if self.labels.min() < 0:
                raise DataError(f"volume {self.id}: negative label values")


@dataclass
class SliceSample:
    """One 2D training sample; ``label`` is None for unlabeled domains."""

    image: np.ndarray           # H x W float32
    label: np.ndarray | None
    domain: str
    volume_id: str
    slice_index: int


@dataclass
class FoldAssignment:
    k: int
    mapping: dict               # volume_id -> fold index
    seed: int

    def volumes_in_fold(self, fold: int) -> list[str]:
        return sorted(v for v, f in self.mapping.items() if f == fold)

    def save(self, path: Path) -> None:
        with open(path, "w") as fh:
            json.dump({"k": self.k, "seed": self.seed, "mapping": self.mapping},
                      fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: Path) -> "FoldAssignment":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(k=int(raw["k"]), mapping={k: int(v) for k, v in raw["mapping"].items()},
                   seed=int(raw["seed"]))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_volume(v: Volume) -> Volume:
    """Rescale intensities to zero mean, unit variance over the whole volume."""
    vox = v.voxels.astype(np.float64)
    std = vox.std()
    if std < 1e-8:
        raise DegenerateVolume(f"volume {v.id}: std {std:.3g} below 1e-8")
    out = ((vox - vox.mean()) / std).astype(np.float32)
    return Volume(out, v.spacing, v.modality, v.id, labels=v.labels)


def _resize_plane(img: np.ndarray, target, order: int) -> np.ndarray:
    """Resize a 2D array; bilinear (order=1) or nearest-neighbor (order=0).

    Index mapping follows the align-corners convention so that an identity
    target size reproduces the input exactly.
    """
    th, tw = target
    h, w = img.shape

    def src_idx(t, s):
        if t == 1:
            return np.array([(s - 1) / 2.0])
        return np.arange(t) * (s - 1) / (t - 1)

    ys, xs = src_idx(th, h), src_idx(tw, w)
    if order == 0:
        yi = np.clip(np.rint(ys).astype(int), 0, h - 1)
        xi = np.clip(np.rint(xs).astype(int), 0, w - 1)
        return img[np.ix_(yi, xi)]
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def crop_and_resize(v: Volume, roi, target, plane: str = "transverse") -> Volume:
    """Crop to an axis-aligned box then resample every slice of ``plane`` to
    ``target`` (bilinear for intensities, nearest-neighbor for labels).

    ``roi`` is ``(z0, z1, y0, y1, x0, x1)`` with half-open bounds, or None for
    the full extent.
    """
    th, tw = (target, target) if np.isscalar(target) else target
    if th <= 0 or tw <= 0:
        raise InvalidROI("target size must be positive")
    shape = v.voxels.shape
    if roi is None:
        roi = (0, shape[0], 0, shape[1], 0, shape[2])
    z0, z1, y0, y1, x0, x1 = (int(b) for b in roi)
    for lo, hi, n in ((z0, z1, shape[0]), (y0, y1, shape[1]), (x0, x1, shape[2])):
        if lo < 0 or hi > n or lo >= hi:
            raise InvalidROI(f"roi {roi} invalid for shape {shape}")
    vox = v.voxels[z0:z1, y0:y1, x0:x1]
    lab = v.labels[z0:z1, y0:y1, x0:x1] if v.labels is not None else None

    axis = PLANE_AXES[plane]
    vox = np.moveaxis(vox, axis, 0)
    old_hw = vox.shape[1:]
    out = np.stack([_resize_plane(s, (th, tw), order=1) for s in vox])
    out = np.moveaxis(out, 0, axis).astype(np.float32)
    if lab is not None:
        lab = np.moveaxis(lab, axis, 0)
        lab = np.stack([_resize_plane(s, (th, tw), order=0) for s in lab])
        lab = np.moveaxis(lab, 0, axis)

    spacing = list(v.spacing)
    inplane = [a for a in range(3) if a != axis]
    spacing[inplane[0]] *= old_hw[0] / th
    spacing[inplane[1]] *= old_hw[1] / tw
    return Volume(out, tuple(spacing), v.modality, v.id, labels=lab)


def split_folds(volumes, k: int, seed: int) -> FoldAssignment:
    """Assign volumes to k folds, sizes differing by at most one; the split is
    a deterministic function of (sorted volume ids, k, seed)."""
    ids = sorted(v.id if isinstance(v, Volume) else str(v) for v in volumes)
    if len(ids) < k:
        raise TooFewVolumes(f"{len(ids)} volumes for {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    mapping = {ids[j]: int(i % k) for i, j in enumerate(order)}
    return FoldAssignment(k=k, mapping=mapping, seed=seed)


def decompose_slices(v: Volume, plane: str = "transverse") -> list[SliceSample]:
    """One SliceSample per index along the slicing axis."""
    axis = PLANE_AXES[plane]
    vox = np.moveaxis(v.voxels, axis, 0)
    lab = np.moveaxis(v.labels, axis, 0) if v.labels is not None else None
    return [SliceSample(image=np.ascontiguousarray(vox[i], dtype=np.float32),
                        label=None if lab is None else np.ascontiguousarray(lab[i]),
                        domain=v.modality, volume_id=v.id, slice_index=i)
            for i in range(vox.shape[0])]


def restack_slices(samples: list[SliceSample]) -> np.ndarray:
    """Inverse of decompose_slices for round-trip checks."""
    ordered = sorted(samples, key=lambda s: s.slice_index)
    return np.stack([s.image for s in ordered])


# ---------------------------------------------------------------------------
# synthetic two-domain dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Desk-scale surrogate task: two unpaired domains rendering random
    ellipse/rectangle organs under disjoint intensity laws.

    Domain A draws bright organs on a dark background with a smooth additive
    bias field; domain B inverts the contrast, uses a larger organ-size law
    and a speckle noise texture. Labels are generated for both domains; B's
    are for evaluation only.
    """

    size: int = 32
    classes: int = 2
    volumes_per_domain: int = 8
    depth: int = 12

    def class_names(self):
        return [f"organ{c}" for c in range(1, self.classes + 1)]


def _ellipsoid_mask(shape, center, radii):
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d = (((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
         + ((xx - center[2]) / radii[2]) ** 2)
    return d <= 1.0


def _box_mask(shape, center, half):
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return ((np.abs(zz - center[0]) <= half[0]) & (np.abs(yy - center[1]) <= half[1])
            & (np.abs(xx - center[2]) <= half[2]))


def _synth_labels(spec: SynthSpec, rng: np.random.Generator, domain: str) -> np.ndarray:
    """Place one organ per class; classes alternate ellipsoid / box shapes.

    Domain B's organs are drawn from a larger size law than A's, so the two
    domains differ in shape statistics as well as texture: a translator with
    no structure constraint is pushed to distort organ geometry.
    """
    s, d = spec.size, spec.depth
    shape = (d, s, s)
    lo, hi = (0.11, 0.18) if domain == "a" else (0.14, 0.23)
    for _ in range(64):
        labels = np.zeros(shape, dtype=np.int16)
        for cls in range(1, spec.classes + 1):
            r_plane = rng.uniform(lo * s, hi * s, size=2)
            r_depth = rng.uniform(0.30 * d, 0.55 * d)
            margin = r_plane + 1
            # organs may clip along the slicing axis but stay inside in-plane
            center = (rng.uniform(0.35 * d, 0.65 * d),
                      rng.uniform(margin[0], s - margin[0]),
                      rng.uniform(margin[1], s - margin[1]))
            if cls % 2 == 1:
                mask = _ellipsoid_mask(shape, center, (r_depth, r_plane[0], r_plane[1]))
            else:
                mask = _box_mask(shape, center, (r_depth, r_plane[0], r_plane[1]))
            labels[mask] = cls
        if all((labels == c).any() for c in range(1, spec.classes + 1)):
            return labels
    raise DataError("failed to place all organ classes")  # pragma: no cover


def _bias_field(shape, rng, amplitude):
    coarse = rng.normal(0.0, 1.0, size=(3, 5, 5))
    zoom = [t / c for t, c in zip(shape, coarse.shape)]
    field = np.stack([_resize_plane(coarse[min(int(i / zoom[0]), 2)], shape[1:], order=1)
                      for i in range(shape[0])])
    return amplitude * field / (np.abs(field).max() + 1e-9)


def _level_image(labels, levels, default):
    lut = np.array([levels.get(c, default) for c in range(int(labels.max()) + 1)])
    return lut[labels].astype(np.float64)


def _render_volume(labels: np.ndarray, domain: str, rng: np.random.Generator) -> np.ndarray:
    shape = labels.shape
    if domain == "a":
        img = _level_image(labels, {0: 0.20, 1: 0.85, 2: 0.55, 3: 0.70, 4: 0.40}, 0.6)
        img += _bias_field(shape, rng, amplitude=0.08)
        img = gaussian_filter(img, sigma=(0.0, 0.7, 0.7))
        img += rng.normal(0.0, 0.03, size=shape)
    else:
        img = _level_image(labels, {0: 0.80, 1: 0.15, 2: 0.45, 3: 0.30, 4: 0.60}, 0.4)
        img = gaussian_filter(img, sigma=(0.0, 0.7, 0.7))
        speckle = gaussian_filter(rng.normal(0.0, 1.0, size=shape), sigma=(0.0, 1.5, 1.5))
        speckle /= np.abs(speckle).max() + 1e-9
        img *= 1.0 + 0.10 * speckle
        img += rng.normal(0.0, 0.05, size=shape)
    return img.astype(np.float32)


def synth_dataset(spec: SynthSpec, seed: int):
    """Generate the two unpaired domains. Returns (volumes_a, volumes_b);
    both carry ground-truth labels (B's are evaluation-only)."""
    rng = np.random.default_rng(seed)
    out = []
    for domain in ("a", "b"):
        modality = "synthetic-A" if domain == "a" else "synthetic-B"
        vols = []
        for i in range(spec.volumes_per_domain):
            labels = _synth_labels(spec, rng, domain)
            voxels = _render_volume(labels, domain, rng)
            vols.append(Volume(voxels, (1.0, 1.0, 1.0), modality,
                               id=f"{domain}{i:03d}", labels=labels))
        out.append(vols)
    return out[0], out[1]


def write_dataset(root: Path, volumes_by_domain: dict, extra_meta: dict | None = None) -> None:
    """Write domains to the container layout plus a dataset.json summary."""
    root = Path(root)
    summary = {"domains": {}, **(extra_meta or {})}
    for domain, volumes in volumes_by_domain.items():
        for v in volumes:
            container.write_volume_dir(root / domain / v.id, v.voxels, v.spacing,
                                       v.modality, labels=v.labels)
        summary["domains"][domain] = [v.id for v in volumes]
    with open(root / "dataset.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def load_volume(root: Path, domain: str, volume_id: str) -> Volume:
    vox, lab, meta = container.read_volume_dir(Path(root) / domain / volume_id)
    return Volume(vox, tuple(meta["spacing_mm"]), meta["modality"], volume_id, labels=lab)


def load_domain(root: Path, domain: str) -> list[Volume]:
    dirs = container.list_volume_dirs(Path(root) / domain)
    if not dirs:
        raise DataError(f"no volumes under {root}/{domain}")
    return [load_volume(root, domain, d.name) for d in dirs]


def list_domains(root: Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"no such dataset root: {root}")
    return sorted(p.name for p in root.iterdir()
                  if p.is_dir() and container.list_volume_dirs(p))


def prepare_dataset(in_root: Path, out_root: Path, target, plane: str = "transverse",
                    folds: int = 4, seed: int = 0) -> FoldAssignment:
    """Apply ROI crop, in-plane resize and per-volume normalization to every
    volume, write the processed dataset, and split each domain into folds
    (volume-disjoint). Returns the fold assignment, also saved as folds.json.
    """
    in_root, out_root = Path(in_root), Path(out_root)
    mapping = {}
    processed = {}
    for domain in list_domains(in_root):
        vols = []
        for vol_dir in container.list_volume_dirs(in_root / domain):
            v = load_volume(in_root, domain, vol_dir.name)
            with open(vol_dir / "meta.json") as fh:
                roi = json.load(fh).get("roi")
            v = crop_and_resize(v, roi, target, plane=plane)
            v = normalize_volume(v)
            vols.append(v)
        processed[domain] = vols
        fa = split_folds(vols, folds, seed)
        mapping.update(fa.mapping)
    write_dataset(out_root, processed, extra_meta={"plane": plane})
    assignment = FoldAssignment(k=folds, mapping=mapping, seed=seed)
    assignment.save(out_root / "folds.json")
    return assignment


# ---------------------------------------------------------------------------
# training batches
# ---------------------------------------------------------------------------

def training_slices(root: Path, folds: FoldAssignment, domain: str, heldout_fold: int,
                    plane: str = "transverse", keep_labels: bool = True):
    """Slices of every volume of ``domain`` outside the held-out fold."""
    samples = []
    for v in load_domain(root, domain):
        if folds.mapping.get(v.id, -1) == heldout_fold:
            continue
        if not keep_labels:
            v = Volume(v.voxels, v.spacing, v.modality, v.id, labels=None)
        for s in decompose_slices(v, plane=plane):
            s.domain = domain
            samples.append(s)
    return samples


def fold_volumes(root: Path, folds: FoldAssignment, domain: str, fold: int) -> list[Volume]:
    return [v for v in load_domain(root, domain) if folds.mapping.get(v.id, -1) == fold]


class TrainBatcher:
    """Deterministic paired-batch iterator over two unpaired slice pools.

    One epoch is a pass over the smaller pool; each domain is shuffled
    independently per epoch with the supplied generator. Target-domain labels
    are never emitted: every target slice is re-issued with ``label=None``.
    """

    def __init__(self, source: list[SliceSample], target: list[SliceSample],
                 batch_size: int, rng: np.random.Generator):
        if not source or not target:
            raise DataError("both domains need at least one slice")
        self.source = list(source)
        self.target = [SliceSample(s.image, None, s.domain, s.volume_id, s.slice_index)
                       for s in target]
        self.batch_size = batch_size
        self.rng = rng

    def iterations_per_epoch(self) -> int:
        return max(1, min(len(self.source), len(self.target)) // self.batch_size)

    def epoch(self):
        """Yield (batch_a, batch_b) pairs; order fixed by the rng state."""
        n = self.iterations_per_epoch()
        perm_a = self.rng.permutation(len(self.source))
        perm_b = self.rng.permutation(len(self.target))
        bs = self.batch_size
        for i in range(n):
            ia = [perm_a[j % len(self.source)] for j in range(i * bs, (i + 1) * bs)]
            ib = [perm_b[j % len(self.target)] for j in range(i * bs, (i + 1) * bs)]
            yield [self.source[j] for j in ia], [self.target[j] for j in ib]
