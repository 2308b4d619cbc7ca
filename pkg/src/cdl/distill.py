"""Loss terms for dual group distillation.

Every loss is a per-token mean over the unmasked target positions. Teacher-side
inputs are detached, so each branch's objective only reaches its own parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

ND_FLOOR = 1e-7
ZERO_NORM = 1e-12


def soften(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Temperature softmax over the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return torch.softmax(logits / temperature, dim=-1)


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(values.dtype)
    count = mask.sum()
    if count.item() == 0:
        raise ValueError("every position is masked")
    return (values * mask).sum() / count


def mle_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Token-mean negative log-likelihood of ``targets`` [B, T] under ``logits`` [B, T, V]."""
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return masked_mean(nll, mask)


def pd_loss(teacher: torch.Tensor, student_logits: torch.Tensor, mask: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Cross-entropy of the student's softened distribution against a fixed teacher distribution."""
    if teacher.shape != student_logits.shape:
        raise ValueError(f"teacher {tuple(teacher.shape)} and student {tuple(student_logits.shape)} differ")
    log_q = torch.log_softmax(student_logits / temperature, dim=-1)
    return masked_mean(-(teacher.detach() * log_q).sum(-1), mask)


def nd_pred_loss(teacher: torch.Tensor, student: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Soft unlikelihood: -sum_k p_teacher(k) log(1 - p_student(k)).

    Pushes student mass away from wherever the teacher puts mass.
    """
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {tuple(teacher.shape)} and student {tuple(student.shape)} differ")
    log_rest = torch.log(torch.clamp(1.0 - student, min=ND_FLOOR))
    return masked_mean(-(teacher.detach() * log_rest).sum(-1), mask)


def orthogonal_reject(h_a: torch.Tensor, h_b: torch.Tensor) -> torch.Tensor:
    """Remove from ``h_a`` its component along ``h_b``, vector-wise over the last axis.

    Rows where ``h_b`` has (near) zero norm are returned unchanged.
    """
    bb = (h_b * h_b).sum(-1, keepdim=True)
    ab = (h_a * h_b).sum(-1, keepdim=True)
    ok = bb >= ZERO_NORM
    coef = torch.where(ok, ab / torch.where(ok, bb, torch.ones_like(bb)), torch.zeros_like(ab))
    return h_a - coef * h_b


def nd_hidden_loss(h_l: torch.Tensor, h_b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over positions of exp(-MSE(h_l, h_b)); lies in (0, 1] and falls as the states separate."""
    se = ((h_l - h_b.detach()) ** 2).mean(-1)
    return masked_mean(torch.exp(-se), mask)


def master_objective(mle, pd_terms: Sequence):
    if not pd_terms:
        raise ValueError("the master objective needs at least one auxiliary branch")
    return mle + sum(pd_terms) / len(pd_terms)


def auxiliary_objective(mle, pd, nd_pred_terms: Sequence = (), nd_hidden_terms: Sequence = ()):
    """MLE + PD from the master + the averaged ND terms against the other auxiliaries."""
    total = mle + pd
    if nd_pred_terms:
        total = total + sum(nd_pred_terms) / len(nd_pred_terms)
    if nd_hidden_terms:
        total = total + sum(nd_hidden_terms) / len(nd_hidden_terms)
    return total


@dataclass
class LossBundle:
    """Decomposed loss of one branch; the distillation entries are already averaged."""

    mle: torch.Tensor
    pd: torch.Tensor
    nd_pred: torch.Tensor
    nd_hidden: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("mle", "pd", "nd_pred", "nd_hidden", "total")}


@dataclass(frozen=True)
class DistillOptions:
    temperature: float = 1.0
    no_attributes: bool = False
    no_orthogonal: bool = False
    no_nd_hidden: bool = False
    no_nd: bool = False


def _mean(terms: list[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    return sum(terms) / len(terms) if terms else like.new_zeros(())


def group_losses(
    logits: Sequence[torch.Tensor],
    hidden: Sequence[torch.Tensor],
    targets: torch.Tensor,
    mask: torch.Tensor,
    memberships: Sequence[torch.Tensor] | None,
    options: DistillOptions = DistillOptions(),
) -> list[LossBundle]:
    """Per-branch objectives for a master (index 0) and its auxiliaries on one shared batch.

    ``memberships[m]`` is a [B] boolean row mask for auxiliary ``m + 1``. With
    ``options.no_attributes`` (or ``memberships=None``) auxiliaries take the
    MLE over the whole batch.
    """
    n_aux = len(logits) - 1
    zero = logits[0].new_zeros(())
    soft = [soften(z, options.temperature) for z in logits]
    teacher = [p.detach() for p in soft]

    mle0 = mle_loss(logits[0], targets, mask)
    if n_aux == 0:
        return [LossBundle(mle0, zero, zero, zero, mle0)]
    pd0 = [pd_loss(teacher[m], logits[0], mask, options.temperature) for m in range(1, n_aux + 1)]
    bundles = [LossBundle(mle0, _mean(pd0, zero), zero, zero, master_objective(mle0, pd0))]

    use_nd = n_aux > 1 and not options.no_nd
    for m in range(1, n_aux + 1):
        if memberships is None or options.no_attributes:
            row_mask = mask
        else:
            row_mask = mask & memberships[m - 1].to(torch.bool)[:, None]
        mle = mle_loss(logits[m], targets, row_mask) if bool(row_mask.any()) else zero
        pd = pd_loss(teacher[0], logits[m], mask, options.temperature)
        nd_pred, nd_hidden = [], []
        if use_nd:
            for j in range(1, n_aux + 1):
                if j == m:
                    continue
                nd_pred.append(nd_pred_loss(teacher[j], soft[m], mask))
                if not options.no_nd_hidden:
                    h_b = hidden[j].detach()
                    h_l = hidden[m] if options.no_orthogonal else orthogonal_reject(hidden[m], h_b)
                    nd_hidden.append(nd_hidden_loss(h_l, h_b, mask))
        total = auxiliary_objective(mle, pd, nd_pred, nd_hidden)
        bundles.append(LossBundle(mle, pd, _mean(nd_pred, zero), _mean(nd_hidden, zero), total))
    return bundles
