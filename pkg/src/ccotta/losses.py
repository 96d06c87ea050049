"""Adaptation objectives: symmetric cross-entropy, domain-shift sensitivity
(CDS) and class-shift direction (CCS) penalties, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .shift import check_probabilities

SHIFT_NORM_FLOOR = 1e-8


@dataclass
class LossBreakdown:
    sce: float
    cds: float
    ccs: float
    total: float
    lambda1: float
    lambda2: float
    tensor: Tensor | None = None


def sce_loss(q, p) -> Tensor:
    """Batch mean of ``-sum q log p - sum p log q`` with logs floored at 1e-12."""
    q, p = ad.as_tensor(q), ad.as_tensor(p)
    if q.shape != p.shape:
        raise ad.ShapeError(f"sce_loss: shapes {q.shape} and {p.shape} differ")
    check_probabilities(q.values, "student probabilities")
    check_probabilities(p.values, "teacher probabilities")
    per_elem = ad.add(ad.mul(q, ad.log(p)), ad.mul(p, ad.log(q)))
    return ad.scale(ad.total(per_elem), -1.0 / q.shape[0])


def cds_loss(head_fn, features, direction, epsilon: float | None = None,
             reduction: str = "l1") -> Tensor:
    """Mean over the batch of the head's sensitivity along ``direction``.

    ``reduction="l1"`` sums absolute per-logit directional derivatives,
    ``"l2"`` takes their Euclidean norm.  An array ``direction`` is a
    constant; a tape-attached Tensor also receives gradient.
    """
    z = ad.as_tensor(features)
    jvp = ad.jvp_probe(head_fn, z, direction, epsilon)
    b = z.shape[0]
    if reduction == "l1":
        return ad.scale(ad.total(ad.absolute(jvp)), 1.0 / b)
    if reduction == "l2":
        return ad.scale(ad.total(ad.sqrt(ad.total(ad.mul(jvp, jvp), axis=1))), 1.0 / b)
    raise ValueError(f"unknown reduction {reduction!r}")


def ccs_loss(shifts, relative) -> Tensor:
    """Sum over present classes i and all j != i of
    ``cos(shift_i, rel[i, j])``.

    ``shifts`` is a per-class list with None for absent classes; ``relative``
    is the constant C x C x D matrix of source class-to-class directions.
    Classes whose shift norm is below 1e-8, and zero relative vectors,
    contribute nothing.
    """
    rel = np.asarray(relative.values if isinstance(relative, Tensor) else relative)
    rn = np.linalg.norm(rel, axis=2, keepdims=True)
    unit = np.divide(rel, rn, out=np.zeros_like(rel), where=rn > 0)
    out = None
    for i, v in enumerate(shifts):
        if v is None:
            continue
        n = ad.norm(v)
        if n.item() < SHIFT_NORM_FLOOR:
            continue
        pull = unit[i].sum(axis=0) - unit[i, i]
        term = ad.div(ad.dot(v, pull), n)
        out = term if out is None else ad.add(out, term)
    return out if out is not None else Tensor(0.0)


def total_loss(sce: Tensor, cds: Tensor, ccs: Tensor, lambda1: float = 1.0,
               lambda2: float = 1.0) -> LossBreakdown:
    t = ad.add(ad.add(sce, ad.scale(cds, lambda1)), ad.scale(ccs, lambda2))
    return LossBreakdown(sce.item(), cds.item(), ccs.item(), t.item(), lambda1, lambda2, t)
