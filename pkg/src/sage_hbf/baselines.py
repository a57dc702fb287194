"""Classical comparison methods: zero-forcing FDP, phase-extraction
alternating minimization, and a per-sample gradient-ascent upper reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .beamforming import HybridPrecoder, LinkConfig, normalize_power, sum_rate
from .errors import SingularChannelError
from .model import batch_sum_rates


def zf_fdp(h: np.ndarray, p_max: float) -> np.ndarray:
    """Zero-forcing fully digital precoder with equal per-user power.

    F = H (H^H H)^{-1} with columns rescaled so each carries p_max / n_u;
    inter-user interference h_u^H f_j (j != u) is zero by construction.
    """
    h = np.asarray(h, dtype=np.complex128)
    n_t, n_u = h.shape
    if n_u > n_t:
        raise SingularChannelError("singular channel: more users than antennas")
    sv = np.linalg.svd(h, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-10:
        raise SingularChannelError("singular channel: rank-deficient H")
    f = h @ np.linalg.inv(h.conj().T @ h)
    norms = np.linalg.norm(f, axis=0)
    return f * (np.sqrt(p_max / n_u) / norms)


@dataclass
class PeAltMinResult:
    """Factorization result with the accepted residual trajectory."""

    precoder: HybridPrecoder
    residuals: np.ndarray
    converged: bool

    @property
    def residual(self) -> float:
        return float(self.residuals[-1])


def _pe_altmin_run(f_opt: np.ndarray, analog: np.ndarray, max_iters: int, tol: float):
    """One alternation run from a given analog start; residuals are non-increasing.

    The analog step extracts, entry by entry, the phase that exactly minimizes
    the residual of that phase shifter against the current deflated residual
    (rows decouple; each entry update is an exact unit-modulus minimization).
    The digital step is the exact least-squares update W = (A^H A)^{-1} A^H F.
    """
    digital = np.linalg.lstsq(analog, f_opt, rcond=None)[0]
    res = [float(np.linalg.norm(f_opt - analog @ digital))]
    converged = False
    for _ in range(max_iters):
        prev = (analog.copy(), digital)
        residual = f_opt - analog @ digital
        for m in range(analog.shape[1]):
            w_m = digital[m]
            if not np.any(w_m):
                continue
            deflated = residual + np.outer(analog[:, m], w_m)
            z = deflated @ w_m.conj()
            col = np.where(np.abs(z) > 0, np.exp(1j * np.angle(z)), analog[:, m])
            residual = deflated - np.outer(col, w_m)
            analog[:, m] = col
        digital = np.linalg.lstsq(analog, f_opt, rcond=None)[0]
        r = float(np.linalg.norm(f_opt - analog @ digital))
        if r > res[-1]:  # roundoff-level stall; keep the better iterate
            analog, digital = prev
            converged = True
            break
        drop = res[-1] - r
        res.append(r)
        if drop <= tol * max(res[0], 1e-300):
            converged = True
            break
    return analog, digital, np.asarray(res), converged


def pe_altmin(f_opt: np.ndarray, n_rf: int, max_iters: int = 200,
              tol: float = 1e-10, rng=None, restarts: int = 2) -> PeAltMinResult:
    """Phase-extraction alternating minimization of ||F_opt - A W||_F.

    Alternates analog phase extraction (each entry set to exp(j arg(.)) of its
    residual correlation, an exact per-entry minimization, so the residual
    never increases) with the least-squares digital update
    W = (A^H A)^{-1} A^H F_opt, until the residual decrease falls below
    ``tol`` or ``max_iters`` is reached.  The first start takes its phases
    from the left singular vectors of F_opt (random phases alone stall on
    exactly factorizable targets); the remaining ``restarts - 1`` starts are
    random, and the best run wins.  The returned precoder is power-normalized
    to ||F_opt||_F^2; ``converged`` is False only if the winning run ran out
    of iterations while still improving.
    """
    f_opt = np.asarray(f_opt, dtype=np.complex128)
    n_t, n_u = f_opt.shape
    if n_rf < n_u:
        raise ValueError("need n_rf >= n_u")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p_max = float(np.sum(np.abs(f_opt) ** 2))

    u = np.linalg.svd(f_opt, full_matrices=True)[0]
    svd_cols = [
        np.where(np.abs(u[:, m]) > 0, np.exp(1j * np.angle(u[:, m])), 1.0)
        for m in range(min(n_rf, n_t))
    ]
    starts = [np.stack(svd_cols, axis=1)]
    if n_rf > n_t:
        pad = np.exp(1j * rng.uniform(0, 2 * np.pi, (n_t, n_rf - n_t)))
        starts[0] = np.concatenate([starts[0], pad], axis=1)
    for _ in range(max(0, restarts - 1)):
        starts.append(np.exp(1j * rng.uniform(0, 2 * np.pi, (n_t, n_rf))))

    best = None
    for analog0 in starts:
        analog, digital, res, conv = _pe_altmin_run(f_opt, analog0, max_iters, tol)
        if best is None or res[-1] < best[2][-1]:
            best = (analog, digital, res, conv)
    analog, digital, res, conv = best
    precoder = normalize_power(HybridPrecoder(np.angle(analog), digital), p_max)
    return PeAltMinResult(precoder, res, conv)


def _ascent_rates(h: torch.Tensor, phases: torch.Tensor, digital_ri: torch.Tensor,
                  link: LinkConfig) -> torch.Tensor:
    digital = torch.complex(digital_ri[:, 0], digital_ri[:, 1])
    return batch_sum_rates(h, phases, digital, link)


def embed_fdp(f: np.ndarray, n_rf: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact hybrid realization of a fully digital precoder (needs n_rf >= 2 n_u).

    Each entry m e^{j phi} of column u is written as c (e^{j(phi+d)} + e^{j(phi-d)})
    with 2 c cos(d) = m, using two dedicated RF chains per user; A @ W then
    equals f exactly.  Returns (analog phases, digital).
    """
    n_t, n_u = f.shape
    if n_rf < 2 * n_u:
        raise ValueError("exact FDP embedding needs n_rf >= 2 n_u")
    phases = np.zeros((n_t, n_rf))
    digital = np.zeros((n_rf, n_u), dtype=np.complex128)
    for u in range(n_u):
        mag = np.abs(f[:, u])
        ang = np.angle(f[:, u])
        c = max(float(mag.max()) / 2.0, 1e-300)
        delta = np.arccos(np.clip(mag / (2.0 * c), -1.0, 1.0))
        phases[:, 2 * u] = ang + delta
        phases[:, 2 * u + 1] = ang - delta
        digital[2 * u, u] = c
        digital[2 * u + 1, u] = c
    return phases, digital


def oracle_ascent(h: np.ndarray, link: LinkConfig, restarts: int = 8,
                  iters: int = 500, n_rf: int | None = None, rng=None,
                  init_step: float = 0.1, backtrack: float = 0.5):
    """Projected gradient ascent on (phases, W) maximizing the sum rate.

    Every objective evaluation renormalizes the transmit power, so all
    iterates are feasible.  Steps are accepted only if the objective does not
    decrease (backtracking halves the step until it does, growing it again
    after success).  All restarts run as one batch and the best one wins;
    when the hybrid can represent a fully digital precoder exactly
    (n_rf >= 2 n_u) the first restart starts at the zero-forcing solution, so
    the result is never worse than zero forcing.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    h = np.asarray(h, dtype=np.complex128)
    n_t, n_u = h.shape
    if n_rf is None:
        n_rf = n_u
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    h_t = torch.from_numpy(np.broadcast_to(h, (restarts, n_t, n_u)).copy())
    phases = torch.from_numpy(rng.uniform(0.0, 2.0 * np.pi, size=(restarts, n_t, n_rf)))
    dig = torch.from_numpy(rng.standard_normal((restarts, 2, n_rf, n_u)))
    if n_rf >= 2 * n_u:
        try:
            ph0, w0 = embed_fdp(zf_fdp(h, link.p_max), n_rf)
            phases[0] = torch.from_numpy(ph0)
            dig[0] = torch.from_numpy(np.stack([w0.real, w0.imag]))
        except SingularChannelError:
            pass

    def rates_of(ph, dg):
        return _ascent_rates(h_t, ph, dg, link)

    with torch.no_grad():
        best_rates = rates_of(phases, dig)
    steps = torch.full((restarts,), init_step, dtype=torch.float64)
    for _ in range(iters):
        ph = phases.clone().requires_grad_(True)
        dg = dig.clone().requires_grad_(True)
        total = rates_of(ph, dg).sum()
        g_ph, g_dg = torch.autograd.grad(total, [ph, dg])
        with torch.no_grad():
            active = torch.ones(restarts, dtype=torch.bool)
            for _bt in range(40):
                s = steps.reshape(-1, 1, 1)
                cand_ph = phases + s * g_ph
                cand_dg = dig + steps.reshape(-1, 1, 1, 1) * g_dg
                cand_rates = rates_of(cand_ph, cand_dg)
                improved = active & (cand_rates >= best_rates)
                phases[improved] = cand_ph[improved]
                dig[improved] = cand_dg[improved]
                best_rates[improved] = cand_rates[improved]
                steps[improved] = steps[improved] * 1.5
                active = active & ~improved
                if not bool(active.any()):
                    break
                steps[active] = steps[active] * backtrack
            # renormalize accepted iterates so stored state stays feasible
            w = torch.complex(dig[:, 0], dig[:, 1])
            a = torch.complex(torch.cos(phases), torch.sin(phases))
            power = ((a @ w).real ** 2 + (a @ w).imag ** 2).sum(dim=(1, 2))
            scale = torch.sqrt(link.p_max / power).reshape(-1, 1, 1)
            w = w * scale
            dig = torch.stack([w.real, w.imag], dim=1)
            steps = torch.clamp(steps, 1e-12, 1e3)
    best = int(torch.argmax(best_rates))
    precoder = normalize_power(
        HybridPrecoder(
            phases[best].numpy(),
            torch.complex(dig[best, 0], dig[best, 1]).numpy(),
        ),
        link.p_max,
    )
    return precoder, sum_rate(h, precoder, link)
