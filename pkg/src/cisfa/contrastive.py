"""The two contrastive losses: weighted patch-wise InfoNCE between an image
and its translation, and the global NT-Xent loss that adapts the segmenter
encoder.

Patch features for an input and its translation are sampled at identical
spatial positions, projected through a per-layer MLP head and L2-normalized.
Each query's weight comes from the source-domain label, block-max-pooled to
the feature-map resolution: positions whose block touches any non-background
pixel get weight ``w`` (> 1), everything else weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateBatch, ShapeError, TooManyPatches


@dataclass
class ContrastiveConfig:
    tau: float = 0.2
    w: float = 2.0
    n_patches_per_layer: int = 256
    seed: int = 0
    # A/B switch: drop the positive from the InfoNCE denominator instead of
    # keeping the full candidate set.
    exclude_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.w < 1:
            raise ValueError("w must be >= 1")


@dataclass
class PatchFeatureSet:
    """Projected, unit-norm patch vectors with their positions and weights."""

    layer: str
    vectors: torch.Tensor       # n x c', rows unit L2 norm
    positions: np.ndarray       # n x 2 (row, col) within the layer's h x w
    weights: torch.Tensor       # n, values in {1, w}

    def __post_init__(self):
        n = self.vectors.shape[0]
        if self.positions.shape != (n, 2):
            raise ShapeError("positions must be n x 2")
        if self.weights.shape != (n,):
            raise ShapeError("weights must have one entry per vector")


@dataclass
class GlobalFeatureBatch:
    """2t unit-norm feature rows with a fixed-point-free pairing involution.

    By convention rows 0..t-1 hold the source inputs and rows t..2t-1 their
    translations, paired as j(i) = (i + t) mod 2t.
    """

    vectors: torch.Tensor       # 2t x c'
    pairing: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.vectors.shape[0]
        if n < 2 or n % 2 != 0:
            raise DegenerateBatch(f"need an even number >= 2 of rows, got {n}")
        if self.pairing is None:
            t = n // 2
            self.pairing = (np.arange(n) + t) % n
        self.pairing = np.asarray(self.pairing, dtype=np.int64)
        if self.pairing.shape != (n,):
            raise ShapeError("pairing must map every row")
        j = self.pairing
        if np.any(j[j] != np.arange(n)) or np.any(j == np.arange(n)):
            raise DegenerateBatch("pairing must be an involution without fixed points")


def sample_patch_positions(layer_shape, n: int, seed) -> np.ndarray:
    """n distinct (row, col) positions, uniform without replacement."""
    h, w = layer_shape
    if n > h * w:
        raise TooManyPatches(f"{n} patches from a {h}x{w} map")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = rng.choice(h * w, size=n, replace=False)
    return np.stack([flat // w, flat % w], axis=1)


def project_patches(feat: torch.Tensor, positions: np.ndarray, head,
                    layer: str = "", weights=None) -> PatchFeatureSet:
    """Gather feature vectors at ``positions`` from a c x h x w map, project
    them through ``head`` and L2-normalize each row."""
    if feat.dim() != 3:
        raise ShapeError("feat must be c x h x w")
    rows = torch.as_tensor(positions[:, 0], dtype=torch.long)
    cols = torch.as_tensor(positions[:, 1], dtype=torch.long)
    gathered = feat[:, rows, cols].transpose(0, 1)      # n x c
    projected = head(gathered)
    vectors = torch.nn.functional.normalize(projected, dim=1, eps=1e-10)
    if weights is None:
        weights = torch.ones(vectors.shape[0], dtype=vectors.dtype)
    return PatchFeatureSet(layer=layer, vectors=vectors, positions=positions,
                           weights=weights)


def patch_weight_map(label: np.ndarray, layer_shape, w: float) -> np.ndarray:
    """Downsample a label map to the layer resolution by block max-pooling:
    a position is weighted ``w`` when any label pixel in its block is
    non-background, else 1. Blocks partition the label with boundaries
    floor(i * H / h_l), so non-integral ratios are handled too."""
    h_l, w_l = layer_shape
    big_h, big_w = label.shape
    if big_h < h_l or big_w < w_l:
        raise ShapeError(f"label {label.shape} smaller than layer {layer_shape}")
    fg = label > 0
    row_idx = (np.arange(h_l) * big_h) // h_l
    col_idx = (np.arange(w_l) * big_w) // w_l
    pooled = np.maximum.reduceat(np.maximum.reduceat(fg, row_idx, axis=0), col_idx, axis=1)
    return np.where(pooled, float(w), 1.0)


def weights_at_positions(weight_map: np.ndarray, positions: np.ndarray,
                         dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(weight_map[positions[:, 0], positions[:, 1]], dtype=dtype)


def patch_nce_loss(f_keys: PatchFeatureSet, f_queries: PatchFeatureSet,
                   cfg: ContrastiveConfig) -> torch.Tensor:
    """Weighted patch-wise InfoNCE for one layer.

    Queries come from the translated image's feature set, keys (positive at
    the same position, negatives elsewhere) from the input image's set. The
    softmax denominator runs over every key. Returns the weighted mean of the
    per-query terms.
    """
    if f_keys.layer != f_queries.layer:
        raise ShapeError("feature sets belong to different layers")
    n = f_queries.vectors.shape[0]
    if n < 2 or f_keys.vectors.shape[0] != n:
        raise DegenerateBatch(f"need matching sets of >= 2 patches, got {n}")
    if not np.array_equal(f_keys.positions, f_queries.positions):
        raise ShapeError("key and query sets must share positions")
    logits = f_queries.vectors @ f_keys.vectors.t() / cfg.tau      # n x n
    pos = torch.diagonal(logits)
    if cfg.exclude_positive_in_denominator:
        masked = logits.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
        denom = torch.logsumexp(masked, dim=1)
    else:
        denom = torch.logsumexp(logits, dim=1)
    per_query = denom - pos
    return (f_queries.weights.to(per_query.dtype) * per_query).mean()


def global_nce_loss(batch: GlobalFeatureBatch, tau: float) -> torch.Tensor:
    """NT-Xent over 2t rows: each row's positive is its paired row, the
    denominator runs over every other row. Zero when t = 1."""
    z = batch.vectors
    n = z.shape[0]
    logits = z @ z.t() / tau
    masked = logits.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    pos = logits[torch.arange(n), torch.as_tensor(batch.pairing)]
    per_row = torch.logsumexp(masked, dim=1) - pos
    return per_row.mean()
