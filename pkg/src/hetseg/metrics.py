"""Segmentation metrics, k-fold aggregation and report emission.

All pixel metrics are computed on class 1 with a patient's slices pooled,
then averaged over patients within a fold. Average precision ranks pixels by
their class-1 probability, resolving score ties as groups with precision
read at each group boundary.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .errors import DataError
from .losses import semantic_cycle_loss
from .segmentation import Segmenter, hard_from_soft
from .seeding import derive_seed, torch_generator
from .translation import TranslationModel

logger = logging.getLogger(__name__)

METRIC_NAMES = ("recall", "precision", "dsc", "ap")


def pixel_metrics(
    pred_hard: torch.Tensor, truth: torch.Tensor
) -> tuple[float, float, float]:
    """(recall, precision, dice) on class 1 over all given pixels.

    Empty truth with empty prediction counts as a perfect (1, 1, 1); a miss
    against nonempty truth scores 0 on all three.
    """
    if pred_hard.shape != truth.shape:
        raise DataError(
            f"pixel_metrics: shape mismatch {tuple(pred_hard.shape)} vs {tuple(truth.shape)}"
        )
    channel_dim = 0 if pred_hard.dim() == 3 else 1
    p1 = pred_hard.select(channel_dim, 1).reshape(-1).bool()
    t1 = truth.select(channel_dim, 1).reshape(-1).bool()
    tp = int((p1 & t1).sum())
    fp = int((p1 & ~t1).sum())
    fn = int((~p1 & t1).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    dsc = 2 * tp / (2 * tp + fp + fn)
    return recall, precision, dsc


def average_precision(scores: torch.Tensor, truth: torch.Tensor) -> float | None:
    """Mean precision over positive pixels at their score rank.

    Ties form one group and every member reads the precision at the group
    boundary. Returns None when there are no positive pixels.
    """
    if scores.shape != truth.shape:
        raise DataError(
            f"average_precision: shape mismatch {tuple(scores.shape)} vs {tuple(truth.shape)}"
        )
    s = scores.detach().reshape(-1).double().numpy()
    t = truth.detach().reshape(-1).bool().numpy()
    n_pos = int(t.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order]
    cum_tp = np.cumsum(t_sorted)
    n = len(s_sorted)
    # last index of each tie group, propagated back onto every member
    boundary = np.empty(n, dtype=bool)
    boundary[:-1] = s_sorted[:-1] != s_sorted[1:]
    boundary[-1] = True
    bidx = np.flatnonzero(boundary)
    ends = bidx[np.searchsorted(bidx, np.arange(n), side="left")]
    precision_at_end = cum_tp[ends] / (ends + 1)
    return float(precision_at_end[t_sorted].sum() / n_pos)


def mean_prediction_entropy(seg: Segmenter, dataset: Dataset) -> float:
    """Mean normalized per-pixel entropy of the segmenter over a dataset."""
    from .losses import entropy_loss

    vals = []
    with torch.no_grad():
        for sample in dataset:
            vals.append(float(entropy_loss(seg(sample.image), reduction="mean")))
    return float(np.mean(vals))


def lesion_preservation_score(
    tm: TranslationModel,
    seg_s: Segmenter,
    source_labeled: Dataset,
    seed: int = 0,
) -> float:
    """Mean soft dice of the frozen source segmenter on cycle-reconstructed
    source images against their masks; higher means lesions survive the
    round trip. Style draws are seeded per sample for reproducibility."""
    scores = []
    with torch.no_grad():
        for idx, sample in enumerate(source_labeled):
            if sample.mask is None:
                raise DataError("lesion_preservation_score requires labeled source samples")
            gen = torch_generator(derive_seed(seed, "preservation-style", idx))
            s_t = tm.sample_style_prior(gen)
            cycled = tm.cycle(sample.image, "source", s_t)
            probs = seg_s(cycled)
            scores.append(-float(semantic_cycle_loss(probs, sample.mask)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    fold: int
    seed: int
    recall: float
    precision: float
    dsc: float
    ap: float

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "seed": self.seed,
            "recall": self.recall,
            "precision": self.precision,
            "dsc": self.dsc,
            "ap": self.ap,
        }


@dataclass
class MetricsReport:
    records: list[MetricsRecord]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "aggregate": self.aggregate,
        }


def evaluate_patients(
    soft_by_patient: dict[str, torch.Tensor],
    truth_by_patient: dict[str, torch.Tensor],
) -> dict[str, float]:
    """Patient-pooled metrics averaged over patients.

    ``soft_by_patient`` maps a patient to the stacked soft predictions of all
    their slices; truth holds the matching one-hot masks. Patients without a
    single positive truth pixel are excluded from the AP mean (logged).
    """
    recalls, precisions, dscs, aps = [], [], [], []
    skipped_ap = 0
    for pid, soft in soft_by_patient.items():
        truth = truth_by_patient[pid]
        hard = hard_from_soft(soft)
        r, p, d = pixel_metrics(hard, truth)
        recalls.append(r)
        precisions.append(p)
        dscs.append(d)
        channel_dim = 0 if soft.dim() == 3 else 1
        ap = average_precision(soft.select(channel_dim, 1), truth.select(channel_dim, 1))
        if ap is None:
            skipped_ap += 1
        else:
            aps.append(ap)
    if skipped_ap:
        logger.info("average precision undefined for %d patient(s); excluded", skipped_ap)
    return {
        "recall": float(np.mean(recalls)),
        "precision": float(np.mean(precisions)),
        "dsc": float(np.mean(dscs)),
        "ap": float(np.mean(aps)) if aps else float("nan"),
    }


def evaluate_segmenter(seg: Segmenter, dataset: Dataset) -> dict[str, float]:
    """Per-patient pooled metrics of a segmenter on a labeled dataset."""
    soft_by_patient: dict[str, list[torch.Tensor]] = {}
    truth_by_patient: dict[str, list[torch.Tensor]] = {}
    with torch.no_grad():
        for sample in dataset:
            if sample.mask is None:
                raise DataError(f"evaluation needs masks; {sample.sample_id} is unlabeled")
            soft_by_patient.setdefault(sample.patient_id, []).append(seg(sample.image))
            truth_by_patient.setdefault(sample.patient_id, []).append(sample.mask)
    stacked_soft = {p: torch.stack(v) for p, v in soft_by_patient.items()}
    stacked_truth = {p: torch.stack(v) for p, v in truth_by_patient.items()}
    return evaluate_patients(stacked_soft, stacked_truth)


def aggregate(records: list[MetricsRecord]) -> MetricsReport:
    """Mean and population standard deviation per metric."""
    if not records:
        raise DataError("aggregate: empty record set")
    agg = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            agg[name] = {"mean": float("nan"), "std": float("nan")}
        else:
            agg[name] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    return MetricsReport(records=list(records), aggregate=agg)


def emit_report(report: MetricsReport, out_dir: Path) -> tuple[Path, Path]:
    """Write metrics.json and metrics.csv; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1))
    csv_path = out_dir / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "seed", "recall", "precision", "dsc", "ap"])
        for r in report.records:
            writer.writerow(
                [r.fold, r.seed, repr(r.recall), repr(r.precision), repr(r.dsc), repr(r.ap)]
            )
    return json_path, csv_path


def load_report(path: Path) -> MetricsReport:
    d = json.loads(Path(path).read_text())
    records = [MetricsRecord(**r) for r in d["records"]]
    return MetricsReport(records=records, aggregate=d["aggregate"])


def emit_plots(series: dict[str, list[tuple[float, float]]], out_dir: Path,
               metric: str = "dsc", filename: str | None = None) -> Path:
    """Line plot of metric vs supervision fraction, one line per method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, points in series.items():
        pts = sorted(points)
        ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", label=label)
    ax.set_xlabel("fraction of labeled target patients")
    ax.set_ylabel(metric)
    ax.legend()
    ax.grid(True, alpha=0.3)
    path = out_dir / (filename or f"sweep_{metric}.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
