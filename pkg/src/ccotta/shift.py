"""Shift directions in feature space.

A concept direction between two feature sets can be written either as the
covariance ratio ``cov[f, y] / cov[y, y]`` over binary membership labels or,
equivalently, as the difference of the two set means.  Both forms are kept:
the covariance form is the definition, the mean difference is what the
adaptation loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_ENTROPY_FACTOR = 0.4
NORMALIZATION_TOL = 1e-6


def scav_covariance(features, labels) -> np.ndarray:
    """Covariance-ratio direction; ``labels`` is 1 for target, 0 for source."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if f.ndim != 2 or y.shape != (f.shape[0],):
        raise ValueError(f"features {f.shape} and labels {y.shape} do not align")
    yc = y - y.mean()
    denom = float(yc @ yc)
    if denom == 0.0:
        raise ValueError("labels take a single value; cov[y, y] is zero")
    return (f - f.mean(axis=0)).T @ yc / denom


def scav_prototype_diff(target, source) -> np.ndarray:
    """Mean of the target set minus mean of the source set."""
    t = np.asarray(target, dtype=np.float64)
    s = np.asarray(source, dtype=np.float64)
    if len(t) == 0 or len(s) == 0:
        raise ValueError("both feature sets must be nonempty")
    return t.mean(axis=0) - s.mean(axis=0)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, ad.LOG_FLOOR)), axis=1)


def check_probabilities(probs: np.ndarray, what: str = "rows") -> None:
    p = np.asarray(probs)
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"{what} must be probability vectors summing to 1")


@dataclass
class ReliableMask:
    entropies: np.ndarray
    keep: np.ndarray
    threshold: float

    @property
    def kept_fraction(self) -> float:
        return float(self.keep.mean()) if len(self.keep) else 0.0


def entropy_threshold(num_classes: int, factor: float = DEFAULT_ENTROPY_FACTOR) -> float:
    return factor * float(np.log(num_classes))


def reliable_mask(probs, factor: float = DEFAULT_ENTROPY_FACTOR) -> ReliableMask:
    """Keep samples whose prediction entropy is at most ``factor * ln C``."""
    check_probabilities(probs, "teacher probabilities")
    h = entropy(probs)
    e0 = entropy_threshold(np.shape(probs)[1], factor)
    return ReliableMask(h, h <= e0, e0)


def pseudo_labels(probs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(np.asarray(probs), axis=1)


@dataclass
class PrototypeBank:
    """Source prototypes (constants) and per-batch target prototypes.

    ``target_class[i]`` is None when no reliable sample of pseudo-class ``i``
    is in the batch; ``present`` mirrors that.
    """
    source_class: np.ndarray
    source_domain: np.ndarray
    target_class: list[Tensor | None] = field(default_factory=list)
    target_domain: Tensor | None = None

    @property
    def present(self) -> np.ndarray:
        return np.array([t is not None for t in self.target_class], dtype=bool)

    def target_class_values(self) -> np.ndarray:
        """C x D array of target prototypes with NaN rows for absent classes."""
        d = self.source_class.shape[1]
        return np.array([t.values if t is not None else np.full(d, np.nan)
                         for t in self.target_class])


def target_prototypes(features, pseudo: np.ndarray, mask: ReliableMask,
                      bank: PrototypeBank) -> PrototypeBank:
    """Fill the target side of ``bank`` from one batch of (student) features.

    Class prototypes average reliable samples per pseudo-label; the domain
    prototype averages every sample in the batch.
    """
    z = ad.as_tensor(features)
    if z.shape[0] < 1:
        raise ValueError("empty batch")
    num_classes = bank.source_class.shape[0]
    protos: list[Tensor | None] = []
    for c in range(num_classes):
        sel = mask.keep & (pseudo == c)
        protos.append(ad.mean(ad.take_rows(z, sel), axis=0) if np.any(sel) else None)
    return PrototypeBank(bank.source_class, bank.source_domain, protos, ad.mean(z, axis=0))


def domain_shift(bank: PrototypeBank, attached: bool = False):
    """Target domain prototype minus source domain prototype.

    Returned as a constant array by default.  With ``attached=True`` it is a
    Tensor that carries gradient into the target prototype (the source
    prototype stays constant).
    """
    if attached:
        return ad.sub(bank.target_domain, ad.constant(bank.source_domain))
    return bank.target_domain.values - bank.source_domain


def class_shifts(bank: PrototypeBank) -> list[Tensor | None]:
    """Per-class target minus source prototype; None for absent classes.

    Gradient flows through the target prototype only.
    """
    return [None if t is None else ad.sub(t, ad.constant(bank.source_class[i]))
            for i, t in enumerate(bank.target_class)]


def class_relative(source_prototypes) -> np.ndarray:
    """``rel[i, j] = p_j - p_i`` for all ordered class pairs (C x C x D)."""
    p = np.asarray(source_prototypes, dtype=np.float64)
    return p[None, :, :] - p[:, None, :]


class TargetPrototypeEMA:
    """Optional cross-batch smoothing of target prototypes (off by default).

    Smoothed prototypes are ``m * previous + (1 - m) * current`` where the
    previous value enters as a constant.
    """

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.domain: np.ndarray | None = None
        self.classes: dict[int, np.ndarray] = {}

    def __call__(self, bank: PrototypeBank) -> PrototypeBank:
        m = self.momentum

        def smooth(cur: Tensor, prev):
            if prev is None:
                return cur
            return ad.add(ad.scale(cur, 1.0 - m), m * prev)

        dom = smooth(bank.target_domain, self.domain)
        cls = [None if t is None else smooth(t, self.classes.get(i))
               for i, t in enumerate(bank.target_class)]
        self.domain = dom.values.copy()
        for i, t in enumerate(cls):
            if t is not None:
                self.classes[i] = t.values.copy()
        return PrototypeBank(bank.source_class, bank.source_domain, cls, dom)
