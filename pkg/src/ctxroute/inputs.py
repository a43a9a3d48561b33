"""Validated per-head query/key/value arrays shared by routing and attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch


@dataclass(frozen=True)
class AttentionInputs:
    """Q, K, V arrays of shape [H, L, d].

    Entries must be finite. Arrays may be stored in float32; all downstream
    accumulation widens to float64.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        shapes = {self.Q.shape, self.K.shape, self.V.shape}
        if len(shapes) != 1 or self.Q.ndim != 3:
            raise ShapeMismatch(
                f"Q/K/V must share one [H, L, d] shape, got {self.Q.shape}, {self.K.shape}, {self.V.shape}"
            )
        if self.d < 1:
            raise ShapeMismatch("head dimension must be >= 1")
        for name, a in (("Q", self.Q), ("K", self.K), ("V", self.V)):
            if not np.isfinite(a).all():
                raise NonFiniteInput(f"{name} contains non-finite entries")
            a.setflags(write=False)

    @property
    def H(self) -> int:
        return int(self.Q.shape[0])

    @property
    def L(self) -> int:
        return int(self.Q.shape[1])

    @property
    def d(self) -> int:
        return int(self.Q.shape[2])
