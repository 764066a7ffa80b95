"""Training objectives.

Contrastive terms operate on B x D feature batches and sum over the batch;
teacher features are always detached, so no configuration back-propagates
into a teacher. The reconstruction term is a per-patch symmetric Chamfer
mean. The combined objective is the unweighted sum of the two streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import BadBatch, CountMismatch, NonFinite, NotNormalized, ShapeMismatch

DEFAULT_TEMPERATURE = 0.1

CONTRASTIVE_METRICS = ("infonce", "l2", "smooth_l1", "cosine")


@dataclass
class LossReport:
    total: float
    rec: float
    con: float
    con_components: dict[str, float] = field(default_factory=dict)


def _check_batch(feats: torch.Tensor, name: str):
    if feats.ndim != 2:
        raise ShapeMismatch(f"{name} must be (B, D), got {tuple(feats.shape)}")
    if feats.shape[0] < 2:
        raise BadBatch(f"{name} needs B >= 2, got B={feats.shape[0]}")


def _check_normalized(feats: torch.Tensor, name: str, tol: float = 1e-4):
    norms = feats.norm(dim=-1)
    worst = (norms - 1.0).abs().max().item()
    if worst > tol:
        raise NotNormalized(f"{name} rows deviate from unit norm by {worst:.2e}")


def supcon_loss(feats: torch.Tensor, labels, tau: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Label-supervised contrastive loss over one batch of normalized features.

    Per anchor k with positive set P_k (same label, anchor excluded):
        (-1/|P_k|) * sum_{p in P_k} log softmax_{over all non-anchor rows}(z_k . z_p / tau)
    summed over anchors. Anchors without positives contribute 0.
    """
    _check_batch(feats, "feats")
    _check_normalized(feats, "feats")
    labels = torch.as_tensor(labels)
    b = feats.shape[0]
    logits = feats @ feats.T / tau                               # (B, B)
    not_self = ~torch.eye(b, dtype=torch.bool)
    pos = (labels[:, None] == labels[None, :]) & not_self        # (B, B)
    # log-softmax over each anchor's non-self rows, stabilized rowwise
    masked = logits.masked_fill(~not_self, float("-inf"))
    log_denom = torch.logsumexp(masked, dim=1, keepdim=True)     # (B, 1)
    log_prob = logits - log_denom
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    per_anchor = -(log_prob * pos).sum(dim=1) / n_pos.clamp(min=1)
    return (per_anchor * has_pos).sum()


def infonce_cmc_loss(student: torch.Tensor, teacher: torch.Tensor,
                     tau: float = DEFAULT_TEMPERATURE, normalize: bool = True) -> torch.Tensor:
    """Cross-modal InfoNCE for one teacher modality, summed over the batch.

    Row k is scored against every teacher row; the matching row is the
    positive and the denominator includes it. The teacher side is detached.
    """
    _check_batch(student, "student")
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    teacher = teacher.detach()
    if normalize:
        student = F.normalize(student, dim=-1)
        teacher = F.normalize(teacher, dim=-1)
    logits = student @ teacher.T / tau                           # (B, B)
    log_prob = logits.diagonal() - torch.logsumexp(logits, dim=1)
    return -log_prob.sum()


def mpm_loss(reconstructed: torch.Tensor | None, ground_truth: torch.Tensor | None) -> torch.Tensor:
    """Mean symmetric Chamfer over masked patches, in center-relative coords.

    Inputs are (M, S, 3) or (B, M, S, 3); an empty mask (both None or zero
    patches) contributes 0 by convention.
    """
    if reconstructed is None and ground_truth is None:
        return torch.zeros(())
    if reconstructed is None or ground_truth is None:
        raise CountMismatch("one side of the reconstruction pair is missing")
    pred = reconstructed.reshape(-1, *reconstructed.shape[-2:])
    gt = ground_truth.reshape(-1, *ground_truth.shape[-2:])
    if pred.shape[0] != gt.shape[0]:
        raise CountMismatch(f"{pred.shape[0]} predicted vs {gt.shape[0]} ground-truth patches")
    if pred.shape[0] == 0:
        return torch.zeros((), dtype=pred.dtype)
    # batched symmetric chamfer; exact because every patch has a fixed size
    d2 = ((pred[:, :, None, :] - gt[:, None, :, :]) ** 2).sum(dim=-1)   # (M, S, S)
    per_patch = d2.min(dim=2).values.mean(dim=1) + d2.min(dim=1).values.mean(dim=1)
    return per_patch.mean()


def _smooth_l1(diff: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    absd = diff.abs()
    return torch.where(absd < beta, 0.5 * diff * diff / beta, absd - 0.5 * beta)


def smooth_l1_con_loss(student: torch.Tensor, teacher: torch.Tensor,
                       normalize: bool = True, beta: float = 1.0) -> torch.Tensor:
    """Positive-only distillation: per-dimension-mean smooth l1 between the
    student row and its detached teacher row, summed over the batch."""
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    teacher = teacher.detach()
    if normalize:
        student = F.normalize(student, dim=-1)
        teacher = F.normalize(teacher, dim=-1)
    return _smooth_l1(student - teacher, beta).mean(dim=-1).sum()


def l2_con_loss(student: torch.Tensor, teacher: torch.Tensor,
                normalize: bool = True) -> torch.Tensor:
    """Per-dimension-mean squared distance, summed over the batch."""
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    teacher = teacher.detach()
    if normalize:
        student = F.normalize(student, dim=-1)
        teacher = F.normalize(teacher, dim=-1)
    return ((student - teacher) ** 2).mean(dim=-1).sum()


def cosine_con_loss(student: torch.Tensor, teacher: torch.Tensor,
                    normalize: bool = True) -> torch.Tensor:
    """1 - cosine similarity per row, summed over the batch."""
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    teacher = teacher.detach()
    if normalize:
        student = F.normalize(student, dim=-1)
        teacher = F.normalize(teacher, dim=-1)
    return (1.0 - (student * teacher).sum(dim=-1)).sum()


def contrastive_metric(name: str):
    """Selectable teacher-alignment metric for the contrastive stream."""
    table = {
        "infonce": infonce_cmc_loss,
        "l2": l2_con_loss,
        "smooth_l1": smooth_l1_con_loss,
        "cosine": cosine_con_loss,
    }
    if name not in table:
        raise BadBatch(f"unknown contrastive metric {name!r}; pick one of {CONTRASTIVE_METRICS}")
    return table[name]


def recon_total(rec, con, con_components: dict[str, float] | None = None) -> LossReport:
    """Combine the two streams: total = rec + con, unweighted."""
    rec_v = float(rec)
    con_v = float(con)
    if not (torch.isfinite(torch.tensor(rec_v)) and torch.isfinite(torch.tensor(con_v))):
        raise NonFinite(f"loss components must be finite, got rec={rec_v}, con={con_v}")
    return LossReport(rec_v + con_v, rec_v, con_v, dict(con_components or {}))
