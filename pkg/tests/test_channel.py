import math

import numpy as np
import pytest
from scipy import stats

from sage_hbf import channel as ch
from sage_hbf.errors import BadMagicError, DimensionMismatchError, TruncatedFileError


def test_psi_components_axis_cases():
    assert ch.psi_components(0.0, 0.0) == (0.0, 0.0, 1.0)
    px, py, pz = ch.psi_components(np.pi / 2, np.pi / 2)
    assert abs(px) < 1e-15 and abs(py - 1.0) < 1e-15 and abs(pz) < 1e-15


def test_psi_components_against_scalar_trig():
    phi, theta = 0.7, 1.1
    px, py, pz = ch.psi_components(phi, theta)
    assert abs(px - math.sin(theta) * math.cos(phi)) < 1e-12
    assert abs(py - math.sin(theta) * math.sin(phi)) < 1e-12
    assert abs(pz - math.cos(theta)) < 1e-12
    for v in (px, py, pz):
        assert -1.0 <= v <= 1.0


def test_steering_component_basics():
    assert np.array_equal(ch.steering_component(0.37, 1, 0.5), np.array([1.0 + 0j]))
    assert np.allclose(ch.steering_component(0.0, 4, 0.5), np.ones(4), atol=0)
    w = ch.steering_component(0.5, 2, 0.5)
    # hand evaluation: element 1 = exp(j pi/2) = j
    assert abs(w[0] - 1.0) < 1e-15
    assert abs(w[1] - 1j) < 1e-12


def test_array_response_trivial_cases():
    assert np.array_equal(
        ch.array_response(0.3, 0.8, ch.AntennaLayout(1, 1, 1)), np.array([1.0 + 0j])
    )
    # broadside: theta = pi/2, phi = pi/2 -> psi_x = 0
    a = ch.array_response(np.pi / 2, np.pi / 2, ch.AntennaLayout(4, 1, 1))
    assert np.allclose(a, np.ones(4), atol=1e-12)


def test_array_response_matches_triple_loop():
    layout = ch.AntennaLayout(2, 1, 2)
    phi, theta = 0.3, 1.0
    a = ch.array_response(phi, theta, layout)
    px, py, pz = ch.psi_components(phi, theta)
    # explicit nested loops in the z (outer), y, x (inner, fastest) order
    expect = np.empty(layout.n_t, dtype=complex)
    t = 0
    for kz in range(layout.n_z):
        for ky in range(layout.n_y):
            for kx in range(layout.n_x):
                expect[t] = np.exp(
                    2j * np.pi * layout.d_over_lambda * (kx * px + ky * py + kz * pz)
                )
                t += 1
    assert np.max(np.abs(a - expect)) < 1e-12


def test_array_response_unit_modulus_random_angles():
    rng = np.random.default_rng(0)
    layout = ch.AntennaLayout(2, 3, 2)
    for _ in range(50):
        phi = rng.uniform(-np.pi, np.pi)
        theta = rng.uniform(0, np.pi)
        a = ch.array_response(phi, theta, layout)
        assert np.max(np.abs(np.abs(a) - 1.0)) < 1e-12


def _unit_domain(**kw):
    base = dict(
        layout=ch.AntennaLayout(1, 1, 1),
        gamma=2.0,
        bs_height_set=(2.0,),
        user_height=1.0,
        gain_bs=1.0,
        gain_user=1.0,
    )
    base.update(kw)
    return ch.Domain(**base)


def test_los_channel_unit_magnitude_case():
    # gains 1, heights (2, 1) at x_u = sqrt(1 + 1): |h| = 2*1/(4 pi x^2) with gamma=2
    dom = _unit_domain()
    h = ch.los_channel(dom, (1.0, 0.0, 1.0), 2.0)
    assert abs(abs(h[0]) - 2.0 / (4 * np.pi * 2.0)) < 1e-15


def test_los_channel_power_law():
    dom = _unit_domain(bs_height_set=(1.0 + 1e-9,), user_height=1.0)
    # horizontal geometry: distance == x offset when heights match (~)
    h1 = ch.los_channel(dom, (10.0, 0.0, 1.0), 1.0 + 1e-9)
    h2 = ch.los_channel(dom, (20.0, 0.0, 1.0), 1.0 + 1e-9)
    assert abs(abs(h2[0]) / abs(h1[0]) - 0.25) < 1e-6


def test_los_channel_full_instance_against_formula():
    layout = ch.AntennaLayout(2, 2, 2)
    dom = ch.Domain(layout=layout, gamma=1.7, bs_height_set=(6.0,), user_height=1.5)
    pos = (30.0, 18.0, 1.5)
    h = ch.los_channel(dom, pos, 6.0)
    delta = np.array(pos) - np.array([0.0, 0.0, 6.0])
    dist = np.linalg.norm(delta)
    theta = np.arccos(delta[2] / dist)
    phi = np.arctan2(delta[1], delta[0])
    expect = (
        ch.array_response(phi, theta, layout)
        * (6.0 * 1.5 / (4 * np.pi * dist**1.7))
        * np.exp(2j * np.pi * dist / dom.carrier_wavelength)
    )
    assert np.max(np.abs(h - expect)) / np.max(np.abs(expect)) < 1e-12
    # LOS: all entries share one magnitude
    assert np.ptp(np.abs(h)) < 1e-15 * np.abs(h[0])


def test_los_channel_degenerate_geometry():
    dom = _unit_domain()
    with pytest.raises(ValueError, match="degenerate geometry"):
        ch.los_channel(dom, (0.0, 0.0, 2.0), 2.0)


def test_sample_domain_batch_shape_and_determinism():
    dom = ch.Domain(layout=ch.AntennaLayout(2, 1, 2), gamma=1.5)
    d = ch.sample_domain_batch(dom, 1, 1, 0)
    assert d.samples.shape == (1, 4, 1)
    a = ch.sample_domain_batch(dom, 16, 3, 42)
    b = ch.sample_domain_batch(dom, 16, 3, 42)
    assert np.array_equal(a.samples, b.samples)


def test_sample_domain_batch_height_histogram():
    # pin the user position so each sample's magnitude identifies its BS height
    region = ch.UserRegion(x_range=(50.0, 50.0), y_range=(0.0, 0.0))
    dom = ch.Domain(layout=ch.AntennaLayout(1, 1, 1), gamma=1.5, region=region)
    heights = np.asarray(dom.bs_height_set)
    expected_mag = np.array([
        abs(ch.los_channel(dom, (50.0, 0.0, dom.user_height), h)[0]) for h in heights
    ])
    d = ch.sample_domain_batch(dom, 100_000, 1, 7)
    mags = np.abs(d.samples[:, 0, 0])
    idx = np.argmin(np.abs(mags[:, None] - expected_mag[None, :]), axis=1)
    assert np.max(np.abs(mags - expected_mag[idx])) < 1e-12
    counts = np.bincount(idx, minlength=len(heights))
    assert stats.chisquare(counts).pvalue > 0.01


def test_los_rank_one_when_users_collocated():
    dom = ch.Domain(layout=ch.AntennaLayout(4, 1, 2), gamma=1.5)
    pos = (40.0, -10.0, dom.user_height)
    cols = [ch.los_channel(dom, pos, 8.0) for _ in range(3)]
    m = np.stack(cols, axis=1)
    assert np.linalg.matrix_rank(m, tol=1e-9) == 1


def test_sample_target_batch_path_power_ratios():
    # pin the user position: the LOS power is then a constant, so the mean
    # total power across num_paths = 1, 2, 3 isolates each path's mean power
    # (paths have independent zero-mean gains, cross terms vanish)
    region = ch.UserRegion(x_range=(50.0, 50.0), y_range=(0.0, 0.0))
    layout = ch.AntennaLayout(2, 1, 1)
    n = 100_000
    mean_power = {}
    for n_paths in (1, 2, 3):
        params = ch.TargetDomainParams(
            layout=layout, num_paths=n_paths, path_decay=0.5, angle_spread=0.2,
            region=region,
        )
        d = ch.sample_target_batch(params, n, 1, 3)
        mean_power[n_paths] = float(np.mean(np.sum(np.abs(d.samples) ** 2, axis=1)))
    p_los = mean_power[1]
    r1 = mean_power[2] / p_los - 1.0
    r2 = (mean_power[3] - mean_power[2]) / p_los
    assert abs(r1 - 0.5) < 0.02
    assert abs(r2 - 0.25) < 0.02


def test_sample_target_batch_single_path_is_los():
    layout = ch.AntennaLayout(2, 1, 2)
    params = ch.TargetDomainParams(layout=layout, num_paths=1)
    d = ch.sample_target_batch(params, 4, 2, 5)
    # num_paths=1: every column must be an exact LOS channel -> unit-modulus
    # steering times a scalar, i.e. constant |h_t| per column
    mags = np.abs(d.samples)
    assert np.max(np.ptp(mags, axis=1)) < 1e-12 * np.max(mags)


def test_sample_target_batch_determinism():
    params = ch.TargetDomainParams(layout=ch.AntennaLayout(4, 1, 1))
    a = ch.sample_target_batch(params, 8, 2, 9)
    b = ch.sample_target_batch(params, 8, 2, 9)
    assert np.array_equal(a.samples, b.samples)


def test_normalize_dataset_postcondition_and_idempotence():
    dom = ch.Domain(layout=ch.AntennaLayout(4, 1, 1), gamma=1.7)
    d = ch.sample_domain_batch(dom, 32, 2, 1)
    nd = ch.normalize_dataset(d)
    mean_sq = np.mean(np.sum(np.abs(nd.samples) ** 2, axis=1))
    assert abs(mean_sq - 1.0) < 1e-9
    again = ch.normalize_dataset(nd)
    assert abs(again.scale / nd.scale - 1.0) < 1e-12
    assert np.allclose(again.samples, nd.samples, rtol=0, atol=1e-12)


def test_normalize_dataset_homogeneity():
    dom = ch.Domain(layout=ch.AntennaLayout(4, 1, 1), gamma=1.7)
    d = ch.sample_domain_batch(dom, 16, 2, 2)
    d10 = ch.Dataset(d.samples * 10.0, meta=d.meta)
    n1, n10 = ch.normalize_dataset(d), ch.normalize_dataset(d10)
    assert abs(n1.scale / n10.scale - 10.0) < 1e-9
    assert np.allclose(n1.samples, n10.samples, rtol=1e-12, atol=0)


def test_normalize_dataset_rejects_zero():
    with pytest.raises(ValueError):
        ch.normalize_dataset(ch.Dataset(np.zeros((2, 3, 1), dtype=complex)))


def test_dataset_roundtrip_bit_exact(tmp_path):
    params = ch.TargetDomainParams(layout=ch.AntennaLayout(2, 2, 1))
    d = ch.normalize_dataset(ch.sample_target_batch(params, 5, 3, 13))
    path = tmp_path / "d.shbf"
    ch.write_dataset(d, path)
    r = ch.read_dataset(path)
    assert r.samples.tobytes() == d.samples.tobytes()
    assert r.scale == d.scale
    # file size matches the declared layout
    assert path.stat().st_size == 8 + 12 + 8 + 5 * 3 * 4 * 16


def test_read_dataset_bad_magic(tmp_path):
    p = tmp_path / "bad.shbf"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 40)
    with pytest.raises(BadMagicError):
        ch.read_dataset(p)


def test_read_dataset_truncated(tmp_path):
    params = ch.TargetDomainParams(layout=ch.AntennaLayout(2, 1, 1))
    d = ch.sample_target_batch(params, 4, 2, 0)
    p = tmp_path / "t.shbf"
    ch.write_dataset(d, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-16])  # drop one entry
    with pytest.raises(TruncatedFileError):
        ch.read_dataset(p)


def test_read_dataset_trailing_bytes(tmp_path):
    params = ch.TargetDomainParams(layout=ch.AntennaLayout(2, 1, 1))
    d = ch.sample_target_batch(params, 2, 1, 0)
    p = tmp_path / "t.shbf"
    ch.write_dataset(d, p)
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(DimensionMismatchError):
        ch.read_dataset(p)
