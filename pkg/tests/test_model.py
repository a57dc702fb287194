import numpy as np
import pytest
import torch

from sage_hbf import beamforming as bf
from sage_hbf import channel as ch
from sage_hbf import model as md
from sage_hbf.errors import BadMagicError, DegeneratePrecoderError, DimensionMismatchError

TINY = md.NetConfig(n_t=4, n_rf=2, n_u=2, conv_channels=4, conv_layers=2,
                    fc_width=16, fc_layers=2)
LINK = bf.LinkConfig.from_neg_log10_sigma2(1.0)


@pytest.fixture(scope="module")
def batch():
    dom = ch.Domain(layout=ch.AntennaLayout(4, 1, 1), gamma=1.7)
    return ch.normalize_dataset(ch.sample_domain_batch(dom, 8, 2, 0)).samples


def test_init_params_deterministic():
    a = md.init_params(TINY, 3)
    b = md.init_params(TINY, 3)
    assert all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert all(torch.equal(a.stats[k], b.stats[k]) for k in a.stats)


def test_init_params_bias_and_bn_values():
    cfg = md.NetConfig(n_t=4, n_rf=2, n_u=2, conv_channels=4, conv_layers=1,
                       fc_width=8, fc_layers=1, use_batchnorm=False)
    p = md.init_params(cfg, 0)
    assert torch.equal(p.tensors["conv1.bias"], torch.zeros(4, dtype=torch.float64))
    assert torch.equal(p.tensors["fc1.bias"], torch.zeros(8, dtype=torch.float64))
    p2 = md.init_params(TINY, 0)
    assert torch.equal(p2.tensors["fc1.bn_scale"], torch.ones(16, dtype=torch.float64))
    assert torch.equal(p2.stats["fc1.bn_var"], torch.ones(16, dtype=torch.float64))


def test_init_params_weight_moments():
    # fc weight with >= 1e5 draws: empirical variance within 10% of 1/(3 fan_in)
    cfg = md.NetConfig(n_t=8, n_rf=2, n_u=2, conv_channels=4, conv_layers=0,
                       fc_width=512, fc_layers=2)
    p = md.init_params(cfg, 1)
    w = p.tensors["fc2.weight"].numpy().ravel()  # 512*512 draws, fan_in 512
    assert w.size >= 100_000
    assert abs(w.mean()) < 0.001
    target = 1.0 / (3 * 512)
    assert abs(w.var() - target) / target < 0.10


def test_featurize_values():
    h = np.array([[[1.0 + 0j, -1j]]])  # (1, 1, 2)
    x = md.featurize(h)
    assert x.shape == (1, 2, 1, 2)
    assert x[0, 0, 0, 0] == 1.0 and x[0, 1, 0, 0] == 0.0
    assert x[0, 0, 0, 1] == 1.0 and abs(x[0, 1, 0, 1] + np.pi / 2) < 1e-15
    # angle convention: arg(-1) = +pi, not -pi
    assert md.featurize(np.array([[[-1.0 + 0j]]]))[0, 1, 0, 0] == np.pi


def test_forward_shapes_and_eval_determinism(batch):
    params = md.init_params(TINY, 0)
    ph, dg = md.forward(params, TINY, batch, md.Mode.EVAL)
    assert ph.shape == (8, 4, 2) and dg.shape == (8, 2, 2)
    assert dg.dtype == torch.complex128
    ph2, dg2 = md.forward(params, TINY, batch, md.Mode.EVAL)
    assert torch.equal(ph, ph2) and torch.equal(dg, dg2)


def test_forward_eval_batch_independence(batch):
    params = md.init_params(TINY, 0)
    ph, dg = md.forward(params, TINY, batch, md.Mode.EVAL)
    ph1, dg1 = md.forward(params, TINY, batch[2:3], md.Mode.EVAL)
    assert torch.allclose(ph[2], ph1[0], rtol=0, atol=1e-12)
    assert torch.allclose(dg[2], dg1[0], rtol=0, atol=1e-12)


def test_forward_train_requires_rng(batch):
    params = md.init_params(TINY, 0)
    with pytest.raises(ValueError, match="rng"):
        md.forward(params, TINY, batch, md.Mode.TRAIN)


def test_loss_single_sample_equals_negative_sum_rate(batch):
    params = md.init_params(TINY, 0)
    one = batch[:1]
    ph, dg = md.forward(params, TINY, one, md.Mode.EVAL)
    pre = bf.normalize_power(
        bf.HybridPrecoder(ph[0].numpy(), dg[0].numpy()), LINK.p_max
    )
    expect = -bf.sum_rate(one[0], pre, LINK)
    assert abs(md.loss(params, TINY, one, LINK, md.Mode.EVAL) - expect) < 1e-10


def test_loss_recomposition_full_batch(batch):
    params = md.init_params(TINY, 1)
    ph, dg = md.forward(params, TINY, batch, md.Mode.EVAL)
    rates = [
        bf.sum_rate(
            batch[i],
            bf.normalize_power(bf.HybridPrecoder(ph[i].numpy(), dg[i].numpy()), LINK.p_max),
            LINK,
        )
        for i in range(len(batch))
    ]
    assert abs(md.loss(params, TINY, batch, LINK, md.Mode.EVAL) + np.mean(rates)) < 1e-10


def test_loss_nonpositive_random_sweep(batch):
    for seed in range(5):
        params = md.init_params(TINY, seed)
        assert md.loss(params, TINY, batch, LINK, md.Mode.EVAL) <= 0.0


def test_loss_degenerate_zero_head(batch):
    params = md.init_params(TINY, 0)
    params.tensors["head_digital.weight"].zero_()
    params.tensors["head_digital.bias"].zero_()
    with pytest.raises(DegeneratePrecoderError):
        md.loss(params, TINY, batch, LINK, md.Mode.EVAL)


def test_grad_matches_finite_differences(batch):
    params = md.init_params(TINY, 2)
    res = md.finite_difference_audit(params, TINY, batch[:4], LINK, md.Mode.TRAIN, seed=11)
    assert res["fraction_ok"] >= 0.99
    assert res["max_rel"] < 1e-4


def test_grad_dead_path_zero(batch):
    params = md.init_params(TINY, 0)
    params.tensors["head_phase.weight"].zero_()
    params.tensors["head_digital.weight"].zero_()
    # heads constant (bias-only): trunk cannot affect the loss
    params.tensors["head_digital.bias"].fill_(0.3)
    _, g = md.grad(params, TINY, batch, LINK, md.Mode.EVAL)
    for name, t in g.items():
        if name.startswith(("conv", "fc")):
            assert torch.equal(t, torch.zeros_like(t)), name


def test_grad_duplicate_batch_invariance(batch):
    cfg = md.NetConfig(n_t=4, n_rf=2, n_u=2, conv_channels=4, conv_layers=1,
                       fc_width=8, fc_layers=1, dropout_rate=0.0, use_batchnorm=False)
    params = md.init_params(cfg, 0)
    one = batch[:1]
    two = np.concatenate([one, one], axis=0)
    _, g1 = md.grad(params, cfg, one, LINK, md.Mode.TRAIN, 5)
    _, g2 = md.grad(params, cfg, two, LINK, md.Mode.TRAIN, 5)
    for k in g1:
        assert torch.allclose(g1[k], g2[k], rtol=0, atol=1e-12)


def test_grad_deterministic_given_seed(batch):
    params = md.init_params(TINY, 4)
    l1, g1 = md.grad(params, TINY, batch, LINK, md.Mode.TRAIN, 9)
    l2, g2 = md.grad(params, TINY, batch, LINK, md.Mode.TRAIN, 9)
    assert l1 == l2
    assert all(torch.equal(g1[k], g2[k]) for k in g1)


def test_apply_update_axioms(batch):
    params = md.init_params(TINY, 5)
    _, g = md.grad(params, TINY, batch, LINK, md.Mode.TRAIN, 1)
    same = md.apply_update(params, g, 0.0)
    assert all(torch.equal(same.tensors[k], params.tensors[k]) for k in g)
    fwd = md.apply_update(params, g, 0.05)
    neg = {k: -v for k, v in g.items()}
    back = md.apply_update(fwd, neg, 0.05)
    for k in g:
        assert torch.allclose(back.tensors[k], params.tensors[k], rtol=0, atol=1e-15)
        expect = params.tensors[k] - 0.05 * g[k]
        assert torch.equal(fwd.tensors[k], expect)
    # running stats untouched
    assert all(torch.equal(fwd.stats[k], params.stats[k]) for k in params.stats)


def test_apply_update_shape_mismatch(batch):
    params = md.init_params(TINY, 5)
    _, g = md.grad(params, TINY, batch, LINK, md.Mode.TRAIN, 1)
    bad = dict(g)
    bad["head_phase.bias"] = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(ValueError):
        md.apply_update(params, bad, 0.1)


def test_save_load_roundtrip(tmp_path, batch):
    params = md.init_params(TINY, 6)
    # give running stats non-default values first
    _, _, stats = md.grad_with_stats(params, TINY, batch, LINK, md.Mode.TRAIN, 2)
    params = md.ModelParams(TINY, params.tensors, stats)
    p = tmp_path / "m.shbp"
    md.save_params(params, p)
    loaded = md.load_params(p)
    assert loaded.cfg == TINY
    assert all(torch.equal(loaded.tensors[k], params.tensors[k]) for k in params.tensors)
    assert all(torch.equal(loaded.stats[k], params.stats[k]) for k in params.stats)
    # identical content -> identical bytes
    p2 = tmp_path / "m2.shbp"
    md.save_params(params, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_params_mismatched_config(tmp_path):
    params = md.init_params(TINY, 0)
    p = tmp_path / "m.shbp"
    md.save_params(params, p)
    other = md.NetConfig(n_t=4, n_rf=2, n_u=2, conv_channels=8, conv_layers=2,
                         fc_width=8, fc_layers=2)
    with pytest.raises(DimensionMismatchError):
        md.load_params(p, expected_cfg=other)


def test_load_params_bad_magic(tmp_path):
    p = tmp_path / "m.shbp"
    p.write_bytes(b"WRONGMAG" + b"\0" * 64)
    with pytest.raises(BadMagicError):
        md.load_params(p)


def test_sum_rate_user_permutation_invariance(batch):
    # permuting H's user columns together with the digital columns leaves
    # the metric unchanged (loss plumbing sanity)
    rng = np.random.default_rng(8)
    h = batch[0]
    pre = bf.HybridPrecoder(
        rng.uniform(0, 2 * np.pi, (4, 2)),
        rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)),
    )
    perm = [1, 0]
    pre_p = bf.HybridPrecoder(pre.analog_phases, pre.digital[:, perm])
    r1 = bf.sum_rate(h, pre, LINK)
    r2 = bf.sum_rate(h[:, perm], pre_p, LINK)
    assert abs(r1 - r2) < 1e-12
    # and through the torch rate path
    t1 = md.batch_sum_rates(h[None], torch.tensor(pre.analog_phases)[None],
                            torch.tensor(pre.digital)[None], LINK)
    t2 = md.batch_sum_rates(h[None, :, perm], torch.tensor(pre_p.analog_phases)[None],
                            torch.tensor(pre_p.digital)[None], LINK)
    assert abs(float(t1 - t2)) < 1e-12
