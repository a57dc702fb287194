"""Statistical LOS channel generation over configurable domains.

A domain is one statistical channel configuration: antenna layout, path-loss
exponent, base-station height distribution and user geometry.  Channels are
geometric line-of-sight vectors (steering vector times a distance-dependent
complex gain).  A synthetic multipath law provides a held-out deployment
domain with a genuinely different channel distribution, and datasets persist
in a bit-exact little-endian binary format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionMismatchError, TruncatedFileError

SPEED_OF_LIGHT = 299_792_458.0
#: carrier wavelength for a 28 GHz deployment, metres
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / 28e9

DATASET_MAGIC = b"SAGEHBF1"
_HEADER = struct.Struct("<III d")  # n_t, n_u, count, scale


@dataclass(frozen=True)
class AntennaLayout:
    """Rectangular antenna array: element counts per axis and spacing in wavelengths."""

    n_x: int
    n_y: int
    n_z: int
    d_over_lambda: float = 0.5

    def __post_init__(self):
        if min(self.n_x, self.n_y, self.n_z) < 1:
            raise ValueError("antenna counts must be positive")
        if self.d_over_lambda <= 0:
            raise ValueError("antenna spacing must be positive")

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y * self.n_z

    def label(self) -> str:
        return f"{self.n_x}x{self.n_y}x{self.n_z}"


@dataclass(frozen=True)
class UserRegion:
    """Horizontal rectangle (metres, BS at the origin) users are drawn from."""

    x_range: tuple[float, float] = (10.0, 100.0)
    y_range: tuple[float, float] = (-50.0, 50.0)

    def __post_init__(self):
        if self.x_range[0] > self.x_range[1] or self.y_range[0] > self.y_range[1]:
            raise ValueError("region ranges must be ordered (lo, hi)")


@dataclass(frozen=True)
class Domain:
    """One statistical LOS channel configuration.

    ``bs_height_set`` is sampled uniformly once per dataset element; all other
    fields are fixed for the domain.  Gains are linear, heights in metres.
    """

    layout: AntennaLayout
    gamma: float
    bs_height_set: tuple[float, ...] = (6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0)
    user_height: float = 1.5
    gain_bs: float = 1.0
    gain_user: float = 1.0
    carrier_wavelength: float = DEFAULT_WAVELENGTH
    region: UserRegion = field(default_factory=UserRegion)

    def __post_init__(self):
        if not self.bs_height_set:
            raise ValueError("bs_height_set must be non-empty")
        if self.user_height <= 0 or min(self.bs_height_set) <= self.user_height:
            raise ValueError("need bs heights > user_height > 0")
        if min(self.gamma, self.gain_bs, self.gain_user, self.carrier_wavelength) <= 0:
            raise ValueError("gamma, gains and wavelength must be positive")
        if self.gamma < 1:
            raise ValueError("path-loss exponent below 1 is not supported")

    def label(self) -> str:
        return f"los_n{self.layout.label()}_g{self.gamma:g}"


@dataclass(frozen=True)
class TargetDomainParams:
    """Synthetic multipath deployment domain (surrogate for ray-traced channels).

    Path 1 is the geometric LOS channel; paths 2..num_paths are steering
    vectors at angles spread around the LOS direction, with complex Gaussian
    gains whose mean power decays geometrically (``path_decay`` per path).
    ``num_paths = 1`` degenerates to the LOS law.
    """

    layout: AntennaLayout
    num_paths: int = 3
    path_decay: float = 0.5
    angle_spread: float = 0.2
    bs_height: float = 6.0
    gamma: float = 2.0
    user_height: float = 1.5
    gain_bs: float = 1.0
    gain_user: float = 1.0
    carrier_wavelength: float = DEFAULT_WAVELENGTH
    region: UserRegion = field(default_factory=UserRegion)

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError("num_paths must be >= 1")
        if self.path_decay <= 0 or self.angle_spread < 0:
            raise ValueError("path_decay must be positive, angle_spread >= 0")

    def los_domain(self) -> Domain:
        """Single-height LOS domain used for the first path."""
        return Domain(
            layout=self.layout,
            gamma=self.gamma,
            bs_height_set=(self.bs_height,),
            user_height=self.user_height,
            gain_bs=self.gain_bs,
            gain_user=self.gain_user,
            carrier_wavelength=self.carrier_wavelength,
            region=self.region,
        )

    def label(self) -> str:
        return f"target_n{self.layout.label()}_p{self.num_paths}"


@dataclass
class Dataset:
    """Ordered collection of channel matrices sharing one (n_t, n_u) shape.

    ``samples`` has shape (count, n_t, n_u) complex128; column u of sample d
    is the channel vector of user u.  ``scale`` records the cumulative real
    factor applied by normalization (1.0 for raw data).
    """

    samples: np.ndarray
    meta: str = ""
    scale: float = 1.0

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 3:
            raise ValueError("samples must have shape (count, n_t, n_u)")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_t(self) -> int:
        return self.samples.shape[1]

    @property
    def n_u(self) -> int:
        return self.samples.shape[2]


def psi_components(phi, theta):
    """Direction cosines (psi_x, psi_y, psi_z) for azimuth phi / elevation theta."""
    st = np.sin(theta)
    return st * np.cos(phi), st * np.sin(phi), np.cos(theta)


def steering_component(psi: float, n: int, d_over_lambda: float) -> np.ndarray:
    """Per-axis phase progression [1, e^{j2pi(d/lambda)psi}, ...] of length n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(n)
    return np.exp(2j * np.pi * d_over_lambda * k * psi)


def array_response(phi: float, theta: float, layout: AntennaLayout) -> np.ndarray:
    """Array response a(phi, theta): Kronecker product z ⊗ y ⊗ x of axis progressions.

    Antenna index t maps to (k_z, k_y, k_x) with the x index varying fastest.
    """
    px, py, pz = psi_components(phi, theta)
    wx = steering_component(px, layout.n_x, layout.d_over_lambda)
    wy = steering_component(py, layout.n_y, layout.d_over_lambda)
    wz = steering_component(pz, layout.n_z, layout.d_over_lambda)
    # equivalent to np.kron(np.kron(wz, wy), wx) but cheaper on small arrays
    return (wz[:, None, None] * wy[None, :, None] * wx[None, None, :]).reshape(-1)


def _geometry(user_position, bs_height: float):
    """Azimuth, elevation (polar angle from +z) and 3-D distance from the BS."""
    x, y, z = (float(v) for v in user_position)
    dz = z - bs_height
    dist = math.sqrt(x * x + y * y + dz * dz)
    if dist < 1e-9:
        raise ValueError("degenerate geometry: user is at the BS position")
    theta = math.acos(min(1.0, max(-1.0, dz / dist)))
    phi = math.atan2(y, x)
    return phi, theta, dist


def los_channel(domain: Domain, user_position, bs_height: float) -> np.ndarray:
    """Geometric LOS channel vector for one user.

    h = a(phi, theta) * sqrt(G_bs G_u) * (l_bs l_u / (4 pi x^gamma)) * e^{j 2 pi x / lambda}
    with (phi, theta, x) derived from the BS-at-origin geometry.  Fully
    deterministic; all entries share the same magnitude.
    """
    phi, theta, dist = _geometry(user_position, bs_height)
    a = array_response(phi, theta, domain.layout)
    amp = (
        math.sqrt(domain.gain_bs * domain.gain_user)
        * bs_height
        * domain.user_height
        / (4.0 * math.pi * dist**domain.gamma)
    )
    phase = complex(math.cos(2.0 * math.pi * dist / domain.carrier_wavelength),
                    math.sin(2.0 * math.pi * dist / domain.carrier_wavelength))
    return a * (amp * phase)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _draw_position(region: UserRegion, user_height: float, rng) -> np.ndarray:
    x = rng.uniform(*region.x_range)
    y = rng.uniform(*region.y_range)
    return np.array([x, y, user_height])


def sample_domain_batch(domain: Domain, count: int, n_users: int, rng) -> Dataset:
    """Draw ``count`` LOS channel matrices with i.i.d. uniform user positions.

    One BS height is drawn uniformly from ``bs_height_set`` per sample.
    Deterministic given the rng seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _as_rng(rng)
    heights = np.asarray(domain.bs_height_set, dtype=np.float64)
    out = np.empty((count, domain.layout.n_t, n_users), dtype=np.complex128)
    for d in range(count):
        h_bs = float(rng.choice(heights))
        for u in range(n_users):
            pos = _draw_position(domain.region, domain.user_height, rng)
            out[d, :, u] = los_channel(domain, pos, h_bs)
    return Dataset(out, meta=domain.label())


def sample_target_batch(params: TargetDomainParams, count: int, n_users: int, rng) -> Dataset:
    """Draw multipath channel matrices for the synthetic deployment domain.

    Per user: path 1 is the LOS channel; each extra path p adds
    g_p * a(phi_p, theta_p) with angles jittered by ``angle_spread`` (radians,
    Gaussian) around the LOS direction and g_p complex Gaussian with mean
    power ``path_decay``^(p-1) relative to the LOS gain.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _as_rng(rng)
    los = params.los_domain()
    layout = params.layout
    out = np.empty((count, layout.n_t, n_users), dtype=np.complex128)
    for d in range(count):
        for u in range(n_users):
            pos = _draw_position(params.region, params.user_height, rng)
            phi, theta, dist = _geometry(pos, params.bs_height)
            h = los_channel(los, pos, params.bs_height)
            los_gain = (
                np.sqrt(params.gain_bs * params.gain_user)
                * params.bs_height
                * params.user_height
                / (4.0 * np.pi * dist**params.gamma)
            )
            for p in range(1, params.num_paths):
                phi_p = phi + params.angle_spread * rng.standard_normal()
                theta_p = theta + params.angle_spread * rng.standard_normal()
                g = complex(rng.standard_normal(), rng.standard_normal()) / np.sqrt(2.0)
                g *= los_gain * params.path_decay ** (p / 2.0)
                h = h + g * array_response(phi_p, theta_p, layout)
            out[d, :, u] = h
    return Dataset(out, meta=params.label())


def normalize_dataset(d: Dataset) -> Dataset:
    """Rescale so the mean squared column norm over all samples and users is 1.

    The applied factor is folded into ``scale``.  Idempotent up to roundoff.
    """
    if len(d) == 0:
        raise ValueError("cannot normalize an empty dataset")
    mean_sq = float(np.mean(np.sum(np.abs(d.samples) ** 2, axis=1)))
    if mean_sq == 0.0:
        raise ValueError("cannot normalize an all-zero dataset")
    c = 1.0 / np.sqrt(mean_sq)
    return Dataset(d.samples * c, meta=d.meta, scale=d.scale * c)


def write_dataset(d: Dataset, path) -> None:
    """Write the dataset in the binary container format.

    Layout: 8-byte magic ``SAGEHBF1``; little-endian u32 n_t, n_u, count;
    little-endian f64 scale; then per sample, user-major (u outer, t inner),
    two little-endian f64 per entry (real, imaginary).
    """
    count, n_t, n_u = d.samples.shape
    payload = np.ascontiguousarray(d.samples.transpose(0, 2, 1)).astype("<c16")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(n_t, n_u, count, d.scale))
        fh.write(payload.tobytes())


def read_dataset(path) -> Dataset:
    """Read a dataset container; inverse of :func:`write_dataset`, bit-exact."""
    raw = Path(path).read_bytes()
    if len(raw) < len(DATASET_MAGIC):
        raise TruncatedFileError(f"{path}: shorter than the magic header")
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < len(DATASET_MAGIC) + _HEADER.size:
        raise TruncatedFileError(f"{path}: incomplete header")
    n_t, n_u, count, scale = _HEADER.unpack_from(raw, len(DATASET_MAGIC))
    if n_t < 1 or n_u < 1:
        raise DimensionMismatchError(f"{path}: invalid dimensions {n_t}x{n_u}")
    body = raw[len(DATASET_MAGIC) + _HEADER.size :]
    expected = count * n_u * n_t * 16
    if len(body) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(body)} bytes, header announces {expected}"
        )
    if len(body) > expected:
        raise DimensionMismatchError(f"{path}: {len(body) - expected} trailing bytes")
    flat = np.frombuffer(body, dtype="<c16").astype(np.complex128)
    samples = flat.reshape(count, n_u, n_t).transpose(0, 2, 1)
    return Dataset(samples, meta=Path(path).name, scale=scale)
