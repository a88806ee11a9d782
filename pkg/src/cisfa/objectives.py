"""Adversarial losses, soft dice, and the composite generator / segmenter
objectives, plus the per-step LossReport that mirrors every term to CSV and
JSON-lines logs.

The default adversarial flavor is least-squares with targets {1, 0}; the
logistic (binary cross-entropy) flavor is kept behind a config switch, with
the generator side in its non-saturating form.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import InvalidMode

DICE_EPS = 1e-5


@dataclass
class GanLossConfig:
    flavor: str = "least-squares"       # or "binary-cross-entropy"
    real_target: float = 1.0
    fake_target: float = 0.0

    def __post_init__(self):
        if self.flavor not in ("least-squares", "binary-cross-entropy"):
            raise InvalidMode(f"unknown GAN flavor {self.flavor!r}")


def gan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor,
               cfg: GanLossConfig) -> torch.Tensor:
    """Discriminator objective over patch score maps.

    Least-squares: mean((real - 1)^2 + fake^2) / 2. Logistic: standard
    sigmoid cross-entropy pushing real scores to 1 and fake scores to 0.
    """
    if cfg.flavor == "least-squares":
        real_term = ((real_scores - cfg.real_target) ** 2).mean()
        fake_term = ((fake_scores - cfg.fake_target) ** 2).mean()
        return 0.5 * (real_term + fake_term)
    real_term = F.binary_cross_entropy_with_logits(
        real_scores, torch.full_like(real_scores, cfg.real_target))
    fake_term = F.binary_cross_entropy_with_logits(
        fake_scores, torch.full_like(fake_scores, cfg.fake_target))
    return real_term + fake_term


def gan_g_loss(fake_scores: torch.Tensor, cfg: GanLossConfig) -> torch.Tensor:
    """Generator-side adversarial term: minimized when the discriminator
    scores the fakes as real (non-saturating form for the logistic flavor)."""
    if cfg.flavor == "least-squares":
        return ((fake_scores - cfg.real_target) ** 2).mean()
    return F.binary_cross_entropy_with_logits(
        fake_scores, torch.full_like(fake_scores, cfg.real_target))


def soft_dice_loss(probs: torch.Tensor, label: torch.Tensor,
                   eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean soft dice over foreground classes.

    probs: B x (C+1) x H x W softmax maps; label: B x H x W integer map.
    Per class c >= 1, dice_c = (2 sum(p_c * y_c) + eps) / (sum p_c + sum y_c + eps)
    with sums over batch and space; classes absent from both sides contribute
    dice 1 through the eps smoothing.
    """
    n_classes = probs.shape[1]
    onehot = F.one_hot(label.long(), num_classes=n_classes)
    onehot = onehot.permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def total_generator_loss(adv: torch.Tensor, pcl_per_layer, pcl_coeff: float = 1.0) -> tuple:
    """Composite generator objective: adversarial term plus the mean of the
    weighted patch losses over the tapped layers. Returns (total, parts).

    The term coefficient defaults to the literal 1.0; it is overridable
    because the published objective states no weighting.
    """
    parts = {"L_G_adv": adv}
    if pcl_per_layer:
        pcl_total = torch.stack(list(pcl_per_layer.values())).mean()
        parts.update({f"L_pcl_weighted/{k}": v for k, v in pcl_per_layer.items()})
        parts["L_pcl_weighted"] = pcl_total
        total = adv + pcl_coeff * pcl_total
    else:
        total = adv
    parts["L_G_total"] = total
    return total, parts


def total_segmenter_loss(dice: torch.Tensor, adv: torch.Tensor, gcl=None,
                         mode: str = "sum", gcl_coeff: float = 1.0,
                         adv_coeff: float = 1.0) -> tuple:
    """Composite segmenter objective.

    ``sum`` adds the global contrastive term to dice + adversarial; in
    ``sequential`` mode the global term is minimized in a separate
    encoder-only update, so it is excluded from the summed objective here.
    Coefficients default to the literal 1.0 (see total_generator_loss).
    """
    if mode not in ("sum", "sequential"):
        raise InvalidMode(f"unknown combination mode {mode!r}")
    parts = {"L_dice": dice, "L_seg_adv": adv}
    total = dice + adv_coeff * adv
    if gcl is not None:
        parts["L_gcl"] = gcl
        if mode == "sum":
            total = total + gcl_coeff * gcl
    parts["L_seg_total"] = total
    return total, parts


@dataclass
class LossReport:
    """Named scalar value of every loss term produced at one training step."""

    step: int
    scalars: dict = field(default_factory=dict)

    def record(self, parts: dict) -> None:
        for name, value in parts.items():
            self.scalars[name] = float(value.detach()) if torch.is_tensor(value) else float(value)

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.scalars.values())


class LossLog:
    """Appends LossReports to <dir>/losses.csv and <dir>/losses.jsonl."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.csv_path = self.run_dir / "losses.csv"
        self.jsonl_path = self.run_dir / "losses.jsonl"
        self._columns = None

    def append(self, report: LossReport) -> None:
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps({"step": report.step, **report.scalars},
                                sort_keys=True) + "\n")
        if self._columns is None:
            if self.csv_path.exists():
                with open(self.csv_path) as fh:
                    self._columns = next(csv.reader(fh))[1:]
            else:
                self._columns = sorted(report.scalars)
                with open(self.csv_path, "w", newline="") as fh:
                    csv.writer(fh).writerow(["step"] + self._columns)
        with open(self.csv_path, "a", newline="") as fh:
            row = [repr(report.scalars[c]) if c in report.scalars else ""
                   for c in self._columns]
            csv.writer(fh).writerow([report.step] + row)

    @staticmethod
    def read_jsonl(path: Path) -> list[dict]:
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        return rows
