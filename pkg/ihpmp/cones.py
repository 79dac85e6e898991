"""Limiting normal cones of boxes and distances to `lam * dl(b) + N_C(b)`."""

from enum import StrEnum

import numpy as np
from jaxtyping import Float
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict

from ihpmp.problems.base import Box


class Activity(StrEnum):
    INTERIOR = "interior"
    AT_LOWER = "at-lower"
    AT_UPPER = "at-upper"
    DEGENERATE = "degenerate-point"


class NormalCone(BaseModel):
    """Normal cone of a box at a point, one activity per coordinate.

    The cone is the product of `{0}` (interior), `(-inf, 0]` (at the lower bound), `[0, inf)`
    (at the upper bound) and the whole line (degenerate interval), so membership and projection
    are exact.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)
    activity: tuple[Activity, ...]

    @classmethod
    def at(cls, box: Box, b: ArrayLike, tol: float = 1e-12) -> "NormalCone":
        b = np.asarray(b, dtype=float)
        if not bool(box.contains(b, tol)):
            raise ValueError(f"{b} is not in the box [{box.lo}, {box.hi}]")
        activity = []
        for x, lo, hi in zip(b, box.lo, box.hi, strict=True):
            if hi - lo <= tol:
                activity.append(Activity.DEGENERATE)
            elif x <= lo + tol:
                activity.append(Activity.AT_LOWER)
            elif x >= hi - tol:
                activity.append(Activity.AT_UPPER)
            else:
                activity.append(Activity.INTERIOR)
        return cls(activity=tuple(activity))

    @property
    def is_trivial(self) -> bool:
        """True when the cone is `{0}`."""
        return all(a == Activity.INTERIOR for a in self.activity)

    def project(self, v: Float[np.ndarray, "... m"]) -> Float[np.ndarray, "... m"]:
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        for i, a in enumerate(self.activity):
            if a == Activity.AT_LOWER:
                out[..., i] = np.minimum(v[..., i], 0.0)
            elif a == Activity.AT_UPPER:
                out[..., i] = np.maximum(v[..., i], 0.0)
            elif a == Activity.DEGENERATE:
                out[..., i] = v[..., i]
        return out

    def distance(self, v: Float[np.ndarray, "... m"]) -> Float[np.ndarray, "..."]:
        v = np.asarray(v, dtype=float)
        return np.linalg.norm(v - self.project(v), axis=-1)

    def contains(self, v: ArrayLike, tol: float = 0.0) -> bool:
        return bool(self.distance(np.asarray(v, dtype=float)) <= tol)

    def generators(self) -> Float[np.ndarray, "g m"]:
        """Extreme rays of the cone (signed unit vectors); empty for the trivial cone."""
        m = len(self.activity)
        rays = []
        for i, a in enumerate(self.activity):
            if a in (Activity.AT_UPPER, Activity.DEGENERATE):
                rays.append(np.eye(m)[i])
            if a in (Activity.AT_LOWER, Activity.DEGENERATE):
                rays.append(-np.eye(m)[i])
        return np.array(rays).reshape(-1, m)


def transversality_distance(
    psi0: ArrayLike, lam: float, subgradients: Float[np.ndarray, "n m"], cone: NormalCone
) -> float:
    """Distance from `psi0` to `lam * S + N`, minimised over the finite subgradient set `S`."""
    psi0 = np.asarray(psi0, dtype=float)
    shifted = psi0[None] - lam * np.atleast_2d(subgradients)
    return float(np.min(cone.distance(shifted)))
