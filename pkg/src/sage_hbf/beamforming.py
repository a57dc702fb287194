"""Hybrid precoders and the SINR / sum-rate / power-constraint formulas.

The analog stage is stored as a real phase matrix (unit modulus is structural),
the digital stage as a complex matrix.  All operations are pure numpy and safe
for concurrent evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePrecoderError


@dataclass
class HybridPrecoder:
    """Analog phases (n_t, n_rf) in radians plus digital precoder (n_rf, n_u)."""

    analog_phases: np.ndarray
    digital: np.ndarray

    def __post_init__(self):
        self.analog_phases = np.asarray(self.analog_phases, dtype=np.float64)
        self.digital = np.asarray(self.digital, dtype=np.complex128)
        if self.analog_phases.ndim != 2 or self.digital.ndim != 2:
            raise ValueError("analog_phases and digital must be matrices")
        if self.analog_phases.shape[1] != self.digital.shape[0]:
            raise ValueError("n_rf mismatch between analog and digital stages")

    def analog(self) -> np.ndarray:
        """Unit-modulus analog matrix A with A[n, m] = exp(j * phase[n, m])."""
        return np.exp(1j * self.analog_phases)


@dataclass(frozen=True)
class LinkConfig:
    """Noise power and transmit power budget."""

    sigma2: float
    p_max: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError("sigma2 must be finite and positive")
        if not (np.isfinite(self.p_max) and self.p_max > 0):
            raise ValueError("p_max must be finite and positive")

    @classmethod
    def from_neg_log10_sigma2(cls, neg_log10_sigma2: float, p_max: float = 1.0) -> "LinkConfig":
        return cls(sigma2=10.0 ** (-neg_log10_sigma2), p_max=p_max)


def effective_precoder(p: HybridPrecoder) -> np.ndarray:
    """Effective transmit matrix A @ W, one column per user."""
    return p.analog() @ p.digital


def precoder_power(p: HybridPrecoder) -> float:
    """Total transmit power sum_u ||A w_u||^2."""
    f = effective_precoder(p)
    return float(np.sum(np.abs(f) ** 2))


def sinr(h: np.ndarray, p: HybridPrecoder, link: LinkConfig, u: int) -> float:
    """SINR of user u: |h_u^H A w_u|^2 / (sum_{j!=u} |h_u^H A w_j|^2 + sigma2)."""
    n_u = h.shape[1]
    if not 0 <= u < n_u:
        raise IndexError(f"user index {u} outside [0, {n_u})")
    g = np.abs(h[:, u].conj() @ effective_precoder(p)) ** 2
    signal = g[u]
    interference = float(np.sum(g) - signal)
    return float(signal / (interference + link.sigma2))


def sum_rate(h: np.ndarray, p: HybridPrecoder, link: LinkConfig) -> float:
    """Sum rate sum_u log2(1 + SINR_u) in bits/s/Hz."""
    m = np.abs(h.conj().T @ effective_precoder(p)) ** 2  # m[u, j] = |h_u^H A w_j|^2
    signal = np.diagonal(m)
    interference = m.sum(axis=1) - signal
    return float(np.sum(np.log2(1.0 + signal / (interference + link.sigma2))))


def normalize_power(p: HybridPrecoder, p_max: float) -> HybridPrecoder:
    """Scale the digital precoder so total transmit power equals p_max exactly."""
    power = precoder_power(p)
    if power == 0.0:
        raise DegeneratePrecoderError("degenerate precoder: zero digital stage")
    c = np.sqrt(p_max / power)
    return HybridPrecoder(p.analog_phases.copy(), p.digital * c)
