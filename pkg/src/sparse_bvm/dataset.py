"""Simulated or loaded GLM data bundled with its generating truth."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .design import GroupedDesign, PaddedVector
from .family import GlmFamily
from .restricted import RestrictedModel, as_dispersion


@dataclass
class Dataset:
    family: GlmFamily
    design: GroupedDesign
    tau: np.ndarray
    y: np.ndarray
    truth: PaddedVector | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tau = as_dispersion(self.tau, self.design.n)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape != (self.design.n,):
            raise ValueError("response length must equal n")

    @property
    def n(self) -> int:
        return self.design.n

    def model(self, support) -> RestrictedModel:
        return RestrictedModel(self.family, self.design, self.tau, support, self.y)

    def with_response(self, y) -> "Dataset":
        return Dataset(self.family, self.design, self.tau, y, self.truth, dict(self.provenance))

    def beta0(self) -> np.ndarray:
        if self.truth is None:
            raise ValueError("dataset has no recorded truth")
        return self.design.embed(self.truth)

    def eta0(self) -> np.ndarray:
        return self.design.x @ self.beta0()

    def truth_weights(self) -> np.ndarray:
        """Truth-Fisher weights ``W_{beta0}``."""
        return np.asarray(self.family.fisher_weight(self.eta0(), self.tau), dtype=float)

    def truth_score(self) -> np.ndarray:
        """Full ambient score at the truth."""
        eta = self.eta0()
        _, s, _ = self.family.loglik_terms(self.y, eta, self.tau)
        return self.design.x.T @ s

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.design.x, self.y, self.tau):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(repr(self.design.group_sizes).encode())
        h.update(repr(self.family.to_dict()).encode())
        if self.truth is not None:
            h.update(repr(self.truth.support).encode())
            h.update(np.ascontiguousarray(self.truth.values, dtype="<f8").tobytes())
        return h.hexdigest()
