"""Weight-space averaging of checkpoints that share a base."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .model import ParameterVector, require_compatible


class LineageError(ValueError):
    pass


def _weighted_sum(members: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """sum_i w_i m_i accumulated in float64, members visited in digest order.

    A fixed visiting order makes the float result independent of how the
    caller ordered the members.
    """
    require_compatible(*members)
    order = sorted(range(len(members)), key=lambda i: (members[i].digest(), i))
    acc = np.zeros(len(members[0]), dtype=np.float64)
    for i in order:
        acc += float(weights[i]) * members[i].as_float64()
    return members[0].with_values(acc)


def make_soup(ref: ParameterVector, other: ParameterVector, alpha: float) -> ParameterVector:
    """(1 - alpha) * ref + alpha * other.

    Any real ``alpha`` is accepted; values outside [0, 1] extrapolate past an
    endpoint and emit a warning.
    """
    require_compatible(ref, other)
    if not 0 <= alpha <= 1:
        warnings.warn(f"alpha={alpha} extrapolates outside the segment", stacklevel=2)
    if alpha == 0:
        return ref
    if alpha == 1:
        return other
    return _weighted_sum([ref, other], [1.0 - alpha, alpha])


def make_soup_n(members: Sequence[ParameterVector]) -> ParameterVector:
    if len(members) < 1:
        raise ValueError("a soup needs at least one member")
    if len(members) == 1:
        return members[0]
    n = len(members)
    return _weighted_sum(members, [1.0 / n] * n)


def barycentric_combine(m1: ParameterVector, m2: ParameterVector, m3: ParameterVector,
                        w: Sequence[float]) -> ParameterVector:
    """w1*m1 + w2*m2 + w3*m3 with sum(w) == 1; negative weights leave the triangle."""
    if len(w) != 3:
        raise ValueError("need exactly three weights")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"barycentric weights must sum to 1, got {sum(w)!r}")
    require_compatible(m1, m2, m3)
    return _weighted_sum([m1, m2, m3], w)


@dataclass(frozen=True)
class SoupSpec:
    members: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("a soup needs at least one member")
        if len(self.weights) != len(self.members):
            raise ValueError("one weight per member required")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("soup weights must sum to 1")

    @classmethod
    def uniform(cls, members) -> "SoupSpec":
        n = len(members)
        return cls(tuple(members), tuple([1.0 / n] * n))

    def to_dict(self) -> dict:
        return {"members": [m.hash for m in self.members], "weights": list(self.weights)}


def check_lineage(members: Sequence[Checkpoint], allow_mixed_bases: bool = False) -> None:
    bases = {m.base_hash for m in members}
    if len(bases) > 1 or None in bases:
        if not allow_mixed_bases:
            raise LineageError("soup members do not share one base checkpoint")
        warnings.warn("souping checkpoints from different bases", stacklevel=3)


def soup_checkpoint(spec: SoupSpec, allow_mixed_bases: bool = False) -> Checkpoint:
    """Materialize ``spec`` as a stage=soup checkpoint recording the spec in metadata."""
    check_lineage(spec.members, allow_mixed_bases)
    params = [m.params for m in spec.members]
    if len(params) == 1:
        values = params[0]
    elif all(w == spec.weights[0] for w in spec.weights):
        values = make_soup_n(params)
    else:
        values = _weighted_sum(params, spec.weights)
    return Checkpoint(values, "soup", parents=tuple(m.hash for m in spec.members),
                      base_hash=spec.members[0].base_hash, meta={"soup": spec.to_dict()})
