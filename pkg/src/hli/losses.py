"""Training objectives.

Selective imitation (mimic + exploitation), relation-matrix structure
distillation, the mutual-mean-teaching base terms (identity CE, soft CE,
batch-hard triplet, soft triplet) and their weighted total.

Teacher-side tensors are detached inside every function, so no gradient can
reach the teacher through these losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import torch
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"loss term {term!r} is not finite{where}")
        self.term = term
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    lambda_id_t: float = 0.5
    lambda_tri_t: float = 1.0
    lambda_imi_t: float = 0.5
    lambda_sd_t: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


def correctness_mask(teacher_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """True where the teacher's argmax equals the (pseudo) label."""
    return teacher_logits.detach().argmax(dim=1) == labels


def _sq_err(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # per-sample squared Euclidean error
    return ((a - b) ** 2).sum(dim=1)


def _check_pair(student: torch.Tensor, teacher: torch.Tensor, mask: torch.Tensor) -> None:
    if student.shape != teacher.shape or student.ndim != 2:
        raise ValueError(f"embedding shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    if mask.shape != (student.shape[0],):
        raise ValueError("mask must hold one flag per sample")


def mimic_loss(student_emb: torch.Tensor, teacher_emb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error to the teacher over samples it classifies correctly;
    0 when there are none."""
    _check_pair(student_emb, teacher_emb, mask)
    mask = mask.bool()
    if not mask.any():
        return student_emb.sum() * 0.0
    return _sq_err(student_emb[mask], teacher_emb.detach()[mask]).mean()


def exploitation_loss(
    student_emb: torch.Tensor,
    teacher_emb: torch.Tensor,
    mask: torch.Tensor,
    identities: torch.Tensor,
    clamp: float | None = None,
) -> torch.Tensor:
    """Push away from the teacher where it is wrong; pull toward the teacher's
    mean response on same-identity samples it got right.

    Averaged over incorrectly predicted samples; a sample whose identity has
    no correct member contributes only the repulsion term.  With ``clamp``
    the repulsion of each sample is bounded below by ``-clamp``.
    """
    _check_pair(student_emb, teacher_emb, mask)
    if identities.shape != mask.shape:
        raise ValueError("identities must hold one label per sample")
    mask = mask.bool()
    wrong = ~mask
    if not wrong.any():
        return student_emb.sum() * 0.0
    teacher_emb = teacher_emb.detach()

    same = identities[:, None] == identities[None, :]
    support = (same & mask[None, :]).to(teacher_emb.dtype)  # row i: correct same-id samples
    count = support.sum(1)
    has_ref = count > 0
    corr_avg = (support @ teacher_emb) / count.clamp(min=1)[:, None]

    repel = -_sq_err(student_emb, teacher_emb)
    if clamp is not None:
        repel = repel.clamp(min=-clamp)
    attract = torch.where(has_ref, _sq_err(student_emb, corr_avg), torch.zeros_like(repel))
    return (repel + attract)[wrong].mean()


def imitation_loss(mim, exp, weights: LossWeights):
    return weights.alpha * mim + weights.beta * exp


def relation_matrix(emb: torch.Tensor) -> torch.Tensor:
    """A_ij = 1 / (1 + ||f_i - f_j||) on unit-normalised embeddings."""
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need an N x D batch with N >= 2")
    norms = emb.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding; cannot normalise")
    f = emb / norms
    d2 = ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1)
    positive = d2 > 0
    # gradient-safe sqrt: exact zeros on coincident pairs, including the diagonal
    d = torch.where(positive, d2.clamp(min=torch.finfo(d2.dtype).tiny).sqrt(), torch.zeros_like(d2))
    return 1.0 / (1.0 + d)


def structure_distillation_loss(a_s: torch.Tensor, a_t: torch.Tensor) -> torch.Tensor:
    if a_s.shape != a_t.shape:
        raise ValueError(f"relation matrices differ in shape: {tuple(a_s.shape)} vs {tuple(a_t.shape)}")
    return ((a_s - a_t.detach()) ** 2).mean()


def pairwise_distances(emb: torch.Tensor) -> torch.Tensor:
    d2 = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
    return torch.where(d2 > 0, d2.clamp(min=torch.finfo(d2.dtype).tiny).sqrt(), torch.zeros_like(d2))


def hardest_pairs(dist: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of the hardest positive (farthest same-label, excluding self)
    and hardest negative (nearest other-label) for every anchor."""
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if not pos.any(1).all() or not neg.any(1).all():
        raise ValueError("triplet mining needs >= 2 identities with >= 2 samples each")
    d = dist.detach()
    hp = d.masked_fill(~pos, -math.inf).argmax(1)
    hn = d.masked_fill(~neg, math.inf).argmin(1)
    return hp, hn


def batch_hard_triplet(emb: torch.Tensor, labels: torch.Tensor, margin: float = 0.3, normalize: bool = True) -> torch.Tensor:
    if normalize:
        emb = F.normalize(emb, dim=1)
    dist = pairwise_distances(emb)
    hp, hn = hardest_pairs(dist, labels)
    idx = torch.arange(labels.shape[0], device=labels.device)
    return F.relu(dist[idx, hp] - dist[idx, hn] + margin).mean()


def soft_triplet(
    student_emb: torch.Tensor, teacher_emb: torch.Tensor, labels: torch.Tensor, normalize: bool = True
) -> torch.Tensor:
    """Binary cross-entropy between teacher and student softmax over
    (d_ap, d_an), with positives/negatives mined on the student."""
    if normalize:
        student_emb = F.normalize(student_emb, dim=1)
        teacher_emb = F.normalize(teacher_emb, dim=1)
    dist_s = pairwise_distances(student_emb)
    hp, hn = hardest_pairs(dist_s, labels)
    idx = torch.arange(labels.shape[0], device=labels.device)
    log_p = F.log_softmax(torch.stack([dist_s[idx, hp], dist_s[idx, hn]], 1), dim=1)
    dist_t = pairwise_distances(teacher_emb.detach())
    q = F.softmax(torch.stack([dist_t[idx, hp], dist_t[idx, hn]], 1), dim=1)
    return -(q * log_p).sum(1).mean()


def soft_cross_entropy(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    q = F.softmax(teacher_logits.detach(), dim=1)
    return -(q * F.log_softmax(student_logits, dim=1)).sum(1).mean()


class BaseLosses(NamedTuple):
    l_id: torch.Tensor
    l_sid: torch.Tensor
    l_tri: torch.Tensor
    l_stri: torch.Tensor


def base_losses(bundle_s, bundle_t, labels: torch.Tensor, margin: float = 0.3) -> BaseLosses:
    """Identity CE, soft identity CE, batch-hard triplet and soft triplet.
    ``bundle_t`` may be None (source pretraining); soft terms are then 0."""
    l_id = F.cross_entropy(bundle_s.logits, labels)
    l_tri = batch_hard_triplet(bundle_s.embedding, labels, margin)
    if bundle_t is None:
        zero = l_id * 0.0
        return BaseLosses(l_id, zero, l_tri, zero)
    l_sid = soft_cross_entropy(bundle_s.logits, bundle_t.logits)
    l_stri = soft_triplet(bundle_s.embedding, bundle_t.embedding, labels)
    return BaseLosses(l_id, l_sid, l_tri, l_stri)


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


TERM_NAMES = ("l_id", "l_sid", "l_tri", "l_stri", "l_mim", "l_exp", "l_sd")


def total_loss(terms: dict, weights: LossWeights, step: int | None = None) -> torch.Tensor:
    """(1-λid) l_id + λid l_sid + (1-λtri) l_tri + λtri l_stri + λimi l_imi + λsd l_sd.

    ``l_imi`` may be given directly; otherwise it is formed from ``l_mim`` and
    ``l_exp`` with the α/β weights.
    """
    names = [n for n in TERM_NAMES if n in terms] + (["l_imi"] if "l_imi" in terms else [])
    for name in names:
        if not math.isfinite(_scalar(terms[name])):
            raise NonFiniteLossError(name, step)
    w = weights
    l_imi = terms["l_imi"] if "l_imi" in terms else imitation_loss(terms["l_mim"], terms["l_exp"], w)
    total = (
        (1 - w.lambda_id_t) * terms["l_id"]
        + w.lambda_id_t * terms["l_sid"]
        + (1 - w.lambda_tri_t) * terms["l_tri"]
        + w.lambda_tri_t * terms["l_stri"]
        + w.lambda_imi_t * l_imi
        + w.lambda_sd_t * terms["l_sd"]
    )
    if not math.isfinite(_scalar(total)):
        raise NonFiniteLossError("total", step)
    return total
