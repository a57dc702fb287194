"""Convolutional precoder network with an unsupervised negative-sum-rate loss.

Input is the amplitude/phase image of the channel matrix (2 x n_t x n_u).  A
stack of same-padded conv blocks feeds a fully connected trunk; two affine
heads emit analog phases (radians, unbounded) and the real/imaginary parts of
the digital precoder.  The transmit power constraint is enforced inside the
loss by exact renormalization, so every emitted precoder is feasible and the
constraint is differentiated through.

Parameters live in plain name->tensor dicts (float64) so meta-training can
form virtual updates functionally; batch-norm running statistics are kept
separate and are only adopted by explicit training steps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .beamforming import LinkConfig
from .errors import (
    BadMagicError,
    DegeneratePrecoderError,
    DimensionMismatchError,
    FormatError,
    TruncatedFileError,
)

PARAMS_MAGIC = b"SAGEHBP1"

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; ``width_scale`` shrinks widths for desk runs."""

    n_t: int
    n_rf: int
    n_u: int
    conv_channels: int = 128
    conv_layers: int = 3
    fc_width: int = 1024
    fc_layers: int = 3
    dropout_rate: float = 0.5
    kernel_size: int = 3
    use_batchnorm: bool = True
    width_scale: float = 1.0

    def __post_init__(self):
        if min(self.n_t, self.n_rf, self.n_u) < 1:
            raise ValueError("n_t, n_rf, n_u must be positive")
        if min(self.conv_channels, self.fc_width, self.kernel_size) < 1:
            raise ValueError("widths and kernel size must be positive")
        if self.conv_layers < 0 or self.fc_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.width_scale <= 1.0:
            raise ValueError("width_scale must lie in (0, 1]")

    @property
    def channels(self) -> int:
        return max(1, round(self.conv_channels * self.width_scale))

    @property
    def width(self) -> int:
        return max(1, round(self.fc_width * self.width_scale))


def param_shapes(cfg: NetConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Trainable and running-statistic tensor shapes, in declaration order.

    This order is the single source of truth for initialization and for the
    parameter file layout.
    """
    trainable: dict[str, tuple] = {}
    stats: dict[str, tuple] = {}
    c = cfg.channels
    in_ch = 2
    for i in range(1, cfg.conv_layers + 1):
        trainable[f"conv{i}.weight"] = (c, in_ch, cfg.kernel_size, cfg.kernel_size)
        if cfg.use_batchnorm:
            trainable[f"conv{i}.bn_scale"] = (c,)
            trainable[f"conv{i}.bn_shift"] = (c,)
            stats[f"conv{i}.bn_mean"] = (c,)
            stats[f"conv{i}.bn_var"] = (c,)
        else:
            trainable[f"conv{i}.bias"] = (c,)
        in_ch = c
    feat = in_ch * cfg.n_t * cfg.n_u
    for i in range(1, cfg.fc_layers + 1):
        trainable[f"fc{i}.weight"] = (cfg.width, feat)
        if cfg.use_batchnorm:
            trainable[f"fc{i}.bn_scale"] = (cfg.width,)
            trainable[f"fc{i}.bn_shift"] = (cfg.width,)
            stats[f"fc{i}.bn_mean"] = (cfg.width,)
            stats[f"fc{i}.bn_var"] = (cfg.width,)
        else:
            trainable[f"fc{i}.bias"] = (cfg.width,)
        feat = cfg.width
    trainable["head_phase.weight"] = (cfg.n_t * cfg.n_rf, feat)
    trainable["head_phase.bias"] = (cfg.n_t * cfg.n_rf,)
    trainable["head_digital.weight"] = (2 * cfg.n_rf * cfg.n_u, feat)
    trainable["head_digital.bias"] = (2 * cfg.n_rf * cfg.n_u,)
    return trainable, stats


@dataclass
class ModelParams:
    """All trainable tensors plus batch-norm running statistics."""

    cfg: NetConfig
    tensors: dict[str, torch.Tensor]
    stats: dict[str, torch.Tensor]

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {k: v.clone() for k, v in self.tensors.items()},
            {k: v.clone() for k, v in self.stats.items()},
        )


Gradient = dict  # name -> tensor, congruent with ModelParams.tensors


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def init_params(cfg: NetConfig, rng) -> ModelParams:
    """Uniform fan-in initialization: weights U(-sqrt(1/fan_in), +sqrt(1/fan_in)).

    Biases and batch-norm shifts start at zero, batch-norm scales at one,
    running means at zero and running variances at one.
    """
    rng = _as_rng(rng)
    shapes, stat_shapes = param_shapes(cfg)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".bn_scale"):
            arr = np.ones(shape)
        else:  # .bias / .bn_shift
            arr = np.zeros(shape)
        tensors[name] = torch.tensor(arr, dtype=torch.float64)
    stats = {
        name: torch.ones(shape, dtype=torch.float64)
        if name.endswith(".bn_var")
        else torch.zeros(shape, dtype=torch.float64)
        for name, shape in stat_shapes.items()
    }
    return ModelParams(cfg, tensors, stats)


def _to_complex_batch(h_batch) -> torch.Tensor:
    """Channel batch as a (b, n_t, n_u) complex128 tensor."""
    if isinstance(h_batch, torch.Tensor):
        t = h_batch
    else:
        arr = np.asarray(h_batch)
        if arr.ndim == 2:
            arr = arr[None]
        t = torch.from_numpy(np.ascontiguousarray(arr))
    return t.to(torch.complex128)


def featurize(h_batch) -> torch.Tensor:
    """Amplitude/phase input planes: (b, 2, n_t, n_u) float64, phase in (-pi, pi]."""
    arr = np.asarray(h_batch)
    if arr.ndim == 2:
        arr = arr[None]
    planes = np.stack([np.abs(arr), np.angle(arr)], axis=1)
    return torch.from_numpy(planes).to(torch.float64)


def _batchnorm(h, scale, shift, run_mean, run_var, mode, new_stats, key):
    conv = h.ndim == 4
    dims = (0, 2, 3) if conv else (0,)
    if mode is Mode.TRAIN:
        mean = h.mean(dim=dims)
        var = h.var(dim=dims, unbiased=False)
        if new_stats is not None:
            n = h.numel() / h.shape[1]
            unbiased = var.detach() * (n / (n - 1.0)) if n > 1 else var.detach()
            new_stats[key + ".bn_mean"] = (
                (1.0 - _BN_MOMENTUM) * run_mean + _BN_MOMENTUM * mean.detach()
            )
            new_stats[key + ".bn_var"] = (
                (1.0 - _BN_MOMENTUM) * run_var + _BN_MOMENTUM * unbiased
            )
    else:
        mean, var = run_mean, run_var
    view = (1, -1, 1, 1) if conv else (1, -1)
    normed = (h - mean.view(view)) / torch.sqrt(var.view(view) + _BN_EPS)
    return normed * scale.view(view) + shift.view(view)


def _forward(tensors, stats, cfg: NetConfig, x, mode: Mode, rng, track_stats: bool):
    """Core forward pass; returns (phases, digital, updated running stats or None)."""
    new_stats: dict | None = dict(stats) if track_stats else None
    need_dropout = mode is Mode.TRAIN and cfg.dropout_rate > 0.0 and cfg.fc_layers > 0
    if need_dropout:
        if rng is None:
            raise ValueError("Train-mode forward with dropout requires an rng")
        rng = _as_rng(rng)
    b = x.shape[0]
    h = x
    for i in range(1, cfg.conv_layers + 1):
        h = torch.nn.functional.conv2d(
            h, tensors[f"conv{i}.weight"], bias=tensors.get(f"conv{i}.bias"),
            stride=1, padding="same",
        )
        if cfg.use_batchnorm:
            h = _batchnorm(
                h, tensors[f"conv{i}.bn_scale"], tensors[f"conv{i}.bn_shift"],
                stats[f"conv{i}.bn_mean"], stats[f"conv{i}.bn_var"],
                mode, new_stats, f"conv{i}",
            )
        h = torch.relu(h)
    h = h.reshape(b, -1)
    keep = 1.0 - cfg.dropout_rate
    for i in range(1, cfg.fc_layers + 1):
        h = torch.nn.functional.linear(
            h, tensors[f"fc{i}.weight"], tensors.get(f"fc{i}.bias")
        )
        if cfg.use_batchnorm:
            h = _batchnorm(
                h, tensors[f"fc{i}.bn_scale"], tensors[f"fc{i}.bn_shift"],
                stats[f"fc{i}.bn_mean"], stats[f"fc{i}.bn_var"],
                mode, new_stats, f"fc{i}",
            )
        h = torch.relu(h)
        if need_dropout:
            mask = rng.random(size=tuple(h.shape)) < keep
            h = h * (torch.from_numpy(mask).to(h.dtype) / keep)
    phases = torch.nn.functional.linear(
        h, tensors["head_phase.weight"], tensors["head_phase.bias"]
    ).reshape(b, cfg.n_t, cfg.n_rf)
    dig = torch.nn.functional.linear(
        h, tensors["head_digital.weight"], tensors["head_digital.bias"]
    ).reshape(b, 2, cfg.n_rf, cfg.n_u)
    digital = torch.complex(dig[:, 0], dig[:, 1])
    return phases, digital, new_stats


def forward(params: ModelParams, cfg: NetConfig, h_batch, mode: Mode, rng=None):
    """Network outputs for a channel batch: (phases (b,n_t,n_rf), digital (b,n_rf,n_u)).

    The digital output is not yet power normalized.  Eval mode is
    deterministic (running statistics, no dropout).
    """
    x = featurize(h_batch)
    with torch.no_grad():
        phases, digital, _ = _forward(
            params.tensors, params.stats, cfg, x, mode, rng, track_stats=False
        )
    return phases, digital


def batch_sum_rates(h_batch, phases, digital, link: LinkConfig) -> torch.Tensor:
    """Per-sample sum rate of the power-normalized precoders (differentiable)."""
    h = _to_complex_batch(h_batch)
    analog = torch.complex(torch.cos(phases), torch.sin(phases))
    f = analog @ digital
    power = (f.real**2 + f.imag**2).sum(dim=(1, 2))
    if not bool((power > 0).all()):
        raise DegeneratePrecoderError("degenerate precoder: zero digital head output")
    f = f * torch.sqrt(link.p_max / power).reshape(-1, 1, 1)
    m = torch.matmul(h.conj().transpose(1, 2), f)  # m[u, j] = h_u^H A w_j
    pw = m.real**2 + m.imag**2
    signal = torch.diagonal(pw, dim1=1, dim2=2)
    interference = pw.sum(dim=2) - signal
    return torch.log2(1.0 + signal / (interference + link.sigma2)).sum(dim=1)


def _loss_tensor(tensors, stats, cfg, h_batch, link, mode, rng, track_stats):
    x = featurize(h_batch)
    phases, digital, new_stats = _forward(tensors, stats, cfg, x, mode, rng, track_stats)
    rates = batch_sum_rates(h_batch, phases, digital, link)
    return -rates.mean(), new_stats


def loss(params: ModelParams, cfg: NetConfig, h_batch, link: LinkConfig,
         mode: Mode, rng=None) -> float:
    """Mean negative sum rate over the batch (power constraint enforced inside)."""
    with torch.no_grad():
        value, _ = _loss_tensor(
            params.tensors, params.stats, cfg, h_batch, link, mode, rng, False
        )
    return float(value)


def grad_with_stats(params: ModelParams, cfg: NetConfig, h_batch, link: LinkConfig,
                    mode: Mode, rng=None):
    """Loss, exact gradient, and the running statistics a training step adopts."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    value, new_stats = _loss_tensor(
        leaves, params.stats, cfg, h_batch, link, mode, rng,
        track_stats=mode is Mode.TRAIN and cfg.use_batchnorm,
    )
    grads = torch.autograd.grad(value, list(leaves.values()))
    g = {k: t.detach() for k, t in zip(leaves.keys(), grads)}
    return float(value.detach()), g, new_stats if new_stats is not None else dict(params.stats)


def grad(params: ModelParams, cfg: NetConfig, h_batch, link: LinkConfig,
         mode: Mode, rng=None):
    """Loss and its exact gradient w.r.t. every trainable tensor.

    Differentiates through power normalization, the SINR expression,
    batch-statistic normalization (Train mode) and the sampled dropout mask
    (fixed per call); deterministic given (inputs, seed).
    """
    value, g, _ = grad_with_stats(params, cfg, h_batch, link, mode, rng)
    return value, g


def evaluate_sum_rate(params: ModelParams, cfg: NetConfig, h_batch,
                      link: LinkConfig) -> float:
    """Mean Eval-mode sum rate of the emitted (normalized) precoders."""
    with torch.no_grad():
        phases, digital = forward(params, cfg, h_batch, Mode.EVAL)
        rates = batch_sum_rates(h_batch, phases, digital, link)
    return float(rates.mean())


def apply_update(params: ModelParams, g: Gradient, lr: float) -> ModelParams:
    """One plain SGD step: tensors - lr * g; running statistics untouched."""
    if set(g.keys()) != set(params.tensors.keys()):
        raise ValueError("gradient keys do not match parameter tensors")
    new = {}
    for k, t in params.tensors.items():
        if g[k].shape != t.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        new[k] = t - lr * g[k]
    return ModelParams(params.cfg, new, {k: v.clone() for k, v in params.stats.items()})


def save_params(params: ModelParams, path) -> None:
    """Write magic, a JSON NetConfig echo, then every tensor as little-endian f64.

    Tensor order is the declaration order of :func:`param_shapes`, trainables
    first, then running statistics.
    """
    cfg_json = json.dumps(asdict(params.cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        shapes, stat_shapes = param_shapes(params.cfg)
        for name in shapes:
            fh.write(params.tensors[name].numpy().astype("<f8").tobytes())
        for name in stat_shapes:
            fh.write(params.stats[name].numpy().astype("<f8").tobytes())


def load_params(path, expected_cfg: NetConfig | None = None) -> ModelParams:
    """Read a parameter file; bit-exact inverse of :func:`save_params`."""
    raw = Path(path).read_bytes()
    if len(raw) < len(PARAMS_MAGIC):
        raise TruncatedFileError(f"{path}: shorter than the magic header")
    if raw[: len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    off = len(PARAMS_MAGIC)
    if len(raw) < off + 4:
        raise TruncatedFileError(f"{path}: incomplete header")
    (json_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + json_len:
        raise TruncatedFileError(f"{path}: config echo cut short")
    try:
        cfg = NetConfig(**json.loads(raw[off : off + json_len]))
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable config echo: {exc}") from exc
    off += json_len
    if expected_cfg is not None and cfg != expected_cfg:
        raise DimensionMismatchError(f"{path}: config echo does not match expectation")
    shapes, stat_shapes = param_shapes(cfg)
    n_values = sum(int(np.prod(s)) for s in shapes.values())
    n_values += sum(int(np.prod(s)) for s in stat_shapes.values())
    body = raw[off:]
    if len(body) < 8 * n_values:
        raise TruncatedFileError(f"{path}: tensor payload cut short")
    if len(body) > 8 * n_values:
        raise DimensionMismatchError(f"{path}: {len(body) - 8 * n_values} trailing bytes")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = torch.from_numpy(flat[pos : pos + n].reshape(shape).copy())
        pos += n
        return out

    tensors = {name: take(shape) for name, shape in shapes.items()}
    stats = {name: take(shape) for name, shape in stat_shapes.items()}
    return ModelParams(cfg, tensors, stats)


def finite_difference_audit(params: ModelParams, cfg: NetConfig, h_batch,
                            link: LinkConfig, mode: Mode, seed: int,
                            step: float = 1e-5, rel_tol: float = 1e-4,
                            floor: float = 1e-6) -> dict:
    """Compare the analytic gradient against central finite differences.

    Uses the same dropout seed for every evaluation.  Coordinates where both
    estimates fall below ``floor`` (structurally dead paths) count as passing
    without entering ``max_rel``.
    """
    _, g = grad(params, cfg, h_batch, link, mode, seed)
    work = params.clone()
    n_total = 0
    n_ok = 0
    n_floor = 0
    max_rel = 0.0
    for name, tensor in work.tensors.items():
        flat = tensor.reshape(-1)
        g_flat = g[name].reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            lp = loss(work, cfg, h_batch, link, mode, seed)
            flat[i] = orig - step
            lm = loss(work, cfg, h_batch, link, mode, seed)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            an = g_flat[i].item()
            denom = max(abs(fd), abs(an))
            n_total += 1
            if denom < floor:
                n_floor += 1
                n_ok += 1
                continue
            rel = abs(fd - an) / denom
            max_rel = max(max_rel, rel)
            if rel < rel_tol:
                n_ok += 1
    return {
        "n_coords": n_total,
        "fraction_ok": n_ok / n_total if n_total else 1.0,
        "max_rel": max_rel,
        "n_below_floor": n_floor,
    }
