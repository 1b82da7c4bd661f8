"""Same/different verification scoring, ROC analysis and occlusion maps.

Same pairs are the positive class.  The verification statistic is the
negated pair distance, so a low distance votes "same".
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels, SquareTooLarge
from .structures import AlignedPair, Kind, as_image

log = logging.getLogger(__name__)

SAME, DIFFERENT = "same", "different"


@dataclass(frozen=True)
class PairScore:
    pair_id: str
    distance: float
    label: str  # "same" or "different"

    def __post_init__(self):
        if self.label not in (SAME, DIFFERENT):
            raise ValueError(f"label must be 'same' or 'different', got {self.label!r}")
        if not self.distance >= 0:
            raise ValueError(f"distance must be >= 0, got {self.distance}")


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # on the statistic -distance; first entry is +inf
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def pair_distance(detections):
    """Highest detection score; 0 when nothing was detected."""
    scores = [d.score if hasattr(d, "score") else float(d) for d in detections]
    return float(max(scores)) if scores else 0.0


def roc_curve(scores):
    """ROC of PairScores with same pairs as positives and ``-distance`` as statistic.

    Tied distances form a single step, so ties contribute half credit to the AUC.
    """
    scores = list(scores)
    labels = np.array([s.label == SAME for s in scores], dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} same / {n_neg} different")
    stat = -np.array([s.distance for s in scores], dtype=np.float64)
    order = np.argsort(-stat, kind="mergesort")
    stat, labels = stat[order], labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    last_of_run = np.r_[np.flatnonzero(np.diff(stat) != 0), len(stat) - 1]
    tpr = np.r_[0.0, tp[last_of_run] / n_pos]
    fpr = np.r_[0.0, fp[last_of_run] / n_neg]
    thresholds = np.r_[np.inf, stat[last_of_run]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, thresholds, auc)


def tpr_at_fpr(roc, fpr_target):
    """TPR at ``fpr_target`` by linear interpolation along the curve.

    At a vertical segment the highest TPR reached at that FPR is used.
    """
    fpr, tpr = roc.fpr, roc.tpr
    i = int(np.searchsorted(fpr, fpr_target, side="right")) - 1
    if i < 0:
        return 0.0
    if i >= len(fpr) - 1 or fpr[i] == fpr_target:
        return float(tpr[i])
    f0, f1 = fpr[i], fpr[i + 1]
    t0, t1 = tpr[i], tpr[i + 1]
    return float(t0 + (t1 - t0) * (fpr_target - f0) / (f1 - f0))


# ---------------------------------------------------------------------------
# occlusion sensitivity

def occlusion_grid_shape(height, width, square, stride):
    return (math.ceil((height - square) / stride) + 1, math.ceil((width - square) / stride) + 1)


def occlusion_map(classifier, pair, square=64, stride=32, target="photo", value=128, batch_size=16):
    """Probability of "different" with a gray square slid over one image.

    ``classifier`` is either an object with ``predict_proba`` (column 1 is
    "different") or a callable mapping an (N, H, W, 6) uint8 batch to (N,)
    probabilities.  ``target`` picks which image is occluded: "photo",
    "design" or "both".  Returns the heat-map grid (rows x cols).
    """
    stacked = pair.stacked() if isinstance(pair, AlignedPair) else as_image(pair, "stacked pair")
    h, w = stacked.shape[:2]
    if square > min(h, w):
        raise SquareTooLarge(f"square {square} exceeds min(H, W) = {min(h, w)}")
    if stride < 1 or square < 1:
        raise ValueError("square and stride must be >= 1")
    channels = {"design": slice(0, 3), "photo": slice(3, 6), "both": slice(0, 6)}[target]
    rows, cols = occlusion_grid_shape(h, w, square, stride)
    positions = [(min(i * stride, h - square), min(j * stride, w - square)) for i in range(rows) for j in range(cols)]

    def predict(batch):
        if hasattr(classifier, "predict_proba"):
            return np.asarray(classifier.predict_proba(batch))[:, 1]
        return np.asarray(classifier(batch), dtype=np.float64).reshape(-1)

    probs = []
    for start in range(0, len(positions), batch_size):
        batch = []
        for y, x in positions[start:start + batch_size]:
            occluded = stacked.copy()
            occluded[y:y + square, x:x + square, channels] = value
            batch.append(occluded)
        probs.append(predict(np.stack(batch)))
    return np.concatenate(probs).reshape(rows, cols)


def occlusion_positions(height, width, square, stride):
    rows, cols = occlusion_grid_shape(height, width, square, stride)
    return [[(min(i * stride, height - square), min(j * stride, width - square)) for j in range(cols)]
            for i in range(rows)]


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    roc: RocResult
    pairs: list
    tpr_at: dict = field(default_factory=dict)
    skipped: int = 0

    @property
    def auc(self):
        return self.roc.auc

    def summary(self):
        return {
            "auc": self.roc.auc,
            "tpr_at_fpr": {f"{k:g}": v for k, v in self.tpr_at.items()},
            "n_pairs": len(self.pairs),
            "n_same": sum(p.label == SAME for p in self.pairs),
            "n_different": sum(p.label == DIFFERENT for p in self.pairs),
            "skipped": self.skipped,
        }


def sample_label(sample):
    kind = Kind(sample.kind)
    return DIFFERENT if kind.is_different else SAME


def score_pairs(scorer, testset):
    """Apply ``scorer(pair) -> distance`` to every sample; failures are skipped."""
    scores, skipped = [], 0
    for sample in testset:
        try:
            distance = float(scorer(sample.pair))
        except (OSError, ValueError) as exc:
            log.warning("pair %s skipped: %s", sample.sample_id, exc)
            skipped += 1
            continue
        scores.append(PairScore(sample.sample_id, max(distance, 0.0), sample_label(sample)))
    return sorted(scores, key=lambda s: s.pair_id), skipped


def evaluate_scores(scores, fpr_targets=(0.01, 0.05, 0.1), skipped=0):
    scores = sorted(scores, key=lambda s: s.pair_id)
    roc = roc_curve(scores)
    return EvalReport(roc, scores, {t: tpr_at_fpr(roc, t) for t in fpr_targets}, skipped)


def evaluate(scorer, testset, fpr_targets=(0.01, 0.05, 0.1)):
    """Score every test pair and summarise with ROC, AUC and TPR at fixed FPRs."""
    scores, skipped = score_pairs(scorer, testset)
    return evaluate_scores(scores, fpr_targets, skipped)


def write_pairs_csv(scores, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "label", "distance"])
        for s in sorted(scores, key=lambda s: s.pair_id):
            writer.writerow([s.pair_id, s.label, repr(float(s.distance))])


def read_pairs_csv(path):
    with open(path, newline="") as fh:
        return [PairScore(r["pair_id"], float(r["distance"]), r["label"]) for r in csv.DictReader(fh)]


def write_report(report, out_dir, plot=True, title="ROC"):
    """``roc.csv``, ``pairs.csv``, ``summary.json`` and ``roc.png`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "roc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(report.roc.thresholds, report.roc.fpr, report.roc.tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
    write_pairs_csv(report.pairs, out / "pairs.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(report.roc.fpr, report.roc.tpr, drawstyle="default", label=f"AUC {report.auc:.3f}")
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate (different accepted)")
        ax.set_ylabel("true positive rate (same accepted)")
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(out / "roc.png", dpi=100)
        plt.close(fig)
    return out


# ---------------------------------------------------------------------------
# model scorers

def input_scale_factor(height, width, input_scale=None, max_side=None):
    """Resize factor matching the training-time rescale; 1.0 when unset."""
    if input_scale is None:
        return 1.0
    from .trainer import rescale_factor

    return rescale_factor(height, width, input_scale, max_side or 10 ** 9)


def _resized_pair(pair, scale):
    import cv2

    stacked = pair.stacked() if isinstance(pair, AlignedPair) else as_image(pair, "stacked pair")
    if scale == 1.0:
        return stacked
    h, w = stacked.shape[:2]
    size = (int(round(w * scale)), int(round(h * scale)))
    interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
    return np.concatenate([cv2.resize(stacked[:, :, i:i + 3], size, interpolation=interp) for i in (0, 3)], axis=2)


def model_scorer(model, input_scale=None, max_side=None):
    """``pair -> distance`` for a detector, Siamese or 6-channel model.

    Detector: highest detection score.  Siamese: embedding distance.
    6-channel classifier: P(different).
    """
    from .baselines import siamese_distance, sixchannel_classify
    from .rcnn.model import detect

    kind = model.spec()["kind"]

    def scorer(pair):
        h, w = (pair.height, pair.width) if isinstance(pair, AlignedPair) else np.shape(pair)[:2]
        scale = input_scale_factor(h, w, input_scale, max_side)
        if kind == "detector":
            return pair_distance(detect(model, pair, scale=scale))
        stacked = _resized_pair(pair, scale)
        if kind == "siamese":
            return siamese_distance(model, stacked)
        return sixchannel_classify(model, stacked)

    return scorer


def checkpoint_scorer(path):
    """Load a checkpoint and build its scorer at the recorded training scale."""
    from .checkpoint import load_model

    model, manifest = load_model(path)
    meta = manifest.get("meta", {})
    return model_scorer(model, meta.get("input_scale"), meta.get("max_side")), manifest
