"""Training objectives: margin softmax, per-identity domain alignment,
feature distillation against a frozen teacher, and their combinations."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

NIR = "N"
VIS = "V"

# Incremented whenever a batch offers no identity spanning both domains.
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.45
    s: float = 32.0

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("margin m must be >= 0")
        if self.s <= 0:
            raise ValueError("scale s must be > 0")


@dataclass
class LossBreakdown:
    l_cls: float
    l_dom: float
    l_cfdal: float
    l_sfdal: float
    l_tot: float
    centroids: dict = field(default_factory=dict, repr=False)

    def as_record(self) -> dict:
        return {k: getattr(self, k) for k in ("l_cls", "l_dom", "l_cfdal", "l_sfdal", "l_tot")}


class DomainAlignment(NamedTuple):
    loss: dc.Tensor
    centroids: dict
    n_identities: int


def margin_softmax_loss(embeddings: dc.Tensor, labels, head_weights: dc.Tensor, cfg: MarginConfig = MarginConfig()) -> dc.Tensor:
    """Additive cosine margin softmax, averaged over the batch.

    Both embeddings and head rows are L2-normalized; the target logit is
    ``s * (cos - m)`` and the others ``s * cos``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, D = embeddings.shape
    C = head_weights.shape[0]
    if head_weights.shape[1] != D:
        raise dc.ShapeError(f"margin_softmax_loss: embeddings {embeddings.shape} vs head {head_weights.shape}")
    if labels.shape != (B,) or B < 1:
        raise ValueError("margin_softmax_loss: need one label per embedding and B >= 1")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"margin_softmax_loss: labels must lie in [0, {C})")
    cos = dc.matmul(dc.normalize_rows(embeddings), dc.transpose(dc.normalize_rows(head_weights)))
    margin = np.zeros((B, C))
    margin[np.arange(B), labels] = cfg.m
    logits = dc.scale(dc.sub(cos, margin), cfg.s)
    return dc.softmax_cross_entropy(logits, labels)


def domain_alignment_loss(embeddings: dc.Tensor, identities, domains) -> DomainAlignment:
    """Mean over identities of || mu_N - mu_V ||, with per-domain mean embeddings.

    Identities missing one of the domains are left out of the average.
    """
    ids = np.asarray(identities)
    doms = np.asarray(domains)
    if ids.shape != (embeddings.shape[0],) or doms.shape != ids.shape:
        raise dc.ShapeError(f"domain_alignment_loss: {embeddings.shape[0]} rows vs {ids.shape} ids, {doms.shape} domains")
    B = ids.shape[0]
    spanning = [i for i in np.unique(ids) if np.any((ids == i) & (doms == NIR)) and np.any((ids == i) & (doms == VIS))]
    if not spanning:
        diagnostics["empty_alignment_batches"] += 1
        log.warning("domain alignment: no identity spans both domains; contribution set to 0")
        return DomainAlignment(dc.Tensor(0.0, tape=embeddings.tape), {}, 0)
    M = len(spanning)
    avg_n = np.zeros((M, B))
    avg_v = np.zeros((M, B))
    for r, i in enumerate(spanning):
        for avg, d in ((avg_n, NIR), (avg_v, VIS)):
            sel = (ids == i) & (doms == d)
            avg[r, sel] = 1.0 / sel.sum()
    mu_n = dc.matmul(dc.Tensor(avg_n, tape=embeddings.tape), embeddings)
    mu_v = dc.matmul(dc.Tensor(avg_v, tape=embeddings.tape), embeddings)
    loss = dc.mean(dc.row_norms(dc.sub(mu_n, mu_v)))
    centroids = {}
    for r, i in enumerate(spanning):
        centroids[(int(i), NIR)] = mu_n.data[r].copy()
        centroids[(int(i), VIS)] = mu_v.data[r].copy()
    return DomainAlignment(loss, centroids, M)


def cfdal_loss(embeddings, identities, domains, head_weights, cfg: MarginConfig = MarginConfig(), lam: float = 0.01, labels=None):
    """Classification plus lambda-weighted domain alignment.

    ``labels`` are head-row indices; they default to ``identities``.
    Returns ``(total, l_cls, alignment)``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l_cls = margin_softmax_loss(embeddings, identities if labels is None else labels, head_weights, cfg)
    align = domain_alignment_loss(embeddings, identities, domains)
    total = dc.add(l_cls, dc.scale(align.loss, lam)) if lam != 0 else l_cls
    return total, l_cls, align


def sfdal_loss(student_vis: dc.Tensor, teacher_vis) -> dc.Tensor:
    """Mean unsquared L2 distance between paired student and teacher rows.

    The teacher side is taken as a constant.
    """
    teacher = teacher_vis.data if isinstance(teacher_vis, dc.Tensor) else np.asarray(teacher_vis, dtype=np.float64)
    if teacher.shape != student_vis.shape:
        raise dc.ShapeError(f"sfdal_loss: student {student_vis.shape} vs teacher {teacher.shape}")
    return dc.mean(dc.row_norms(dc.sub(student_vis, dc.Tensor(teacher, tape=student_vis.tape))))


def total_loss(l_cfdal: dc.Tensor, l_sfdal: dc.Tensor, alpha: float) -> dc.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return dc.add(dc.scale(l_cfdal, alpha), dc.scale(l_sfdal, 1.0 - alpha))
