"""Detection loss terms.

Classification terms are softmax cross-entropy averaged over sampled
anchors / RoIs.  Regression terms are smooth-L1 summed over positives and
divided by the number of sampled anchors / RoIs, so that the total is the
plain sum of the four terms.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import NoValidSamples

LOSS_NAMES = ("rpn_cls", "rpn_reg", "head_cls", "head_reg")


def smooth_l1(x, beta=1.0):
    """Elementwise ``0.5 x^2 / beta`` for ``|x| < beta``, else ``|x| - 0.5 beta``."""
    x = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def classification_loss(logits, labels):
    """Mean cross-entropy over entries whose label is >= 0."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    valid = labels >= 0
    n = int(valid.sum())
    if n == 0:
        raise NoValidSamples("no labelled entries for the classification loss")
    return F.cross_entropy(logits[valid], labels[valid], reduction="sum") / n


def regression_loss(deltas, targets, labels):
    """Smooth-L1 summed over positives, divided by the number of labelled entries."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = int((labels >= 0).sum())
    if n == 0:
        raise NoValidSamples("no labelled entries for the regression loss")
    pos = labels == 1
    if not bool(pos.any()):
        return deltas.sum() * 0.0
    targets = torch.as_tensor(targets, dtype=deltas.dtype)
    return smooth_l1(deltas[pos] - targets[pos]).sum() / n


def detection_losses(rpn_logits, rpn_deltas, rpn_labels, rpn_targets,
                     head_logits, head_deltas, roi_labels, roi_targets):
    """The four loss terms as a dict of scalar tensors.

    ``rpn_*`` are per anchor (labels 1/0/-1); ``head_*`` per sampled RoI
    (labels 1/0).  ``head_deltas`` are the foreground-class offsets.
    """
    return {
        "rpn_cls": classification_loss(rpn_logits, rpn_labels),
        "rpn_reg": regression_loss(rpn_deltas, rpn_targets, rpn_labels),
        "head_cls": classification_loss(head_logits, roi_labels),
        "head_reg": regression_loss(head_deltas, roi_targets, roi_labels),
    }


def total_loss(terms):
    return sum(terms[name] for name in LOSS_NAMES)
