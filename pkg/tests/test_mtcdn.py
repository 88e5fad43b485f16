import numpy as np
import pytest
import torch

from saderkit.errors import ConfigError, NumericError
from saderkit.mtcdn import (
    HABlock,
    MTCDN,
    MTCDNConfig,
    NoiseEmbedding,
    TFBlock,
    TemporalAttentionEncoder,
    denoise,
    neighborhood_mask,
)
from saderkit.schedule import Schedule

SMALL = MTCDNConfig(
    in_channels=3,
    aux_channels=1,
    out_channels=3,
    frames=2,
    base_channels=8,
    depth=2,
    heads=2,
    neighborhood_window=3,
    embed_dim=16,
)


def _inputs(cfg, b=1, h=8, w=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, cfg.frames, cfg.in_channels, h, w, generator=g)
    mu = torch.randn(b, cfg.frames, cfg.in_channels, h, w, generator=g)
    aux = torch.randn(b, cfg.frames, cfg.aux_channels, h, w, generator=g)
    return x, mu, aux


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        MTCDNConfig(neighborhood_window=4)
    with pytest.raises(ConfigError):
        MTCDNConfig(depth=0)
    with pytest.raises(ConfigError):
        MTCDNConfig(base_channels=30, heads=4)


# ---------------------------------------------------------------------------
# temporal attention encoder


def test_tae_single_frame_passthrough():
    torch.manual_seed(0)
    tae = TemporalAttentionEncoder(8, 2, max_frames=1)
    frames = torch.randn(2, 1, 8, 5, 5)
    fused, kv = tae(frames)
    assert torch.allclose(fused, frames[:, 0], atol=0)
    assert kv[0].shape == (2, 1, 8, 5, 5)


def test_tae_permutation_invariance_without_pos_enc():
    torch.manual_seed(1)
    tae = TemporalAttentionEncoder(8, 2, max_frames=3, pos_enc=False)
    frames = torch.randn(1, 3, 8, 4, 4)
    fused_a, _ = tae(frames)
    fused_b, _ = tae(frames[:, [2, 0, 1]])
    assert torch.allclose(fused_a, fused_b, atol=1e-6)


def test_tae_pos_enc_breaks_permutation_symmetry():
    torch.manual_seed(2)
    tae = TemporalAttentionEncoder(8, 2, max_frames=3, pos_enc=True)
    with torch.no_grad():
        tae.pos.normal_()
    frames = torch.randn(1, 3, 8, 4, 4)
    fused_a, _ = tae(frames)
    fused_b, _ = tae(frames[:, [2, 0, 1]])
    assert not torch.allclose(fused_a, fused_b, atol=1e-6)


def test_encode_condition_scale_contract():
    torch.manual_seed(3)
    model = MTCDN(SMALL)
    _, mu, aux = _inputs(SMALL)
    cond = model.encode_condition(mu, aux)
    assert len(cond.fused) == SMALL.depth
    h = 8
    for s, f in enumerate(cond.fused):
        assert f.shape[-2:] == (h // 2**s, h // 2**s)
    assert cond.kv[0].shape[-2:] == (8, 8)


def test_encode_condition_requires_aux():
    torch.manual_seed(4)
    model = MTCDN(SMALL)
    _, mu, _ = _inputs(SMALL)
    with pytest.raises(ConfigError):
        model.encode_condition(mu, None)


# ---------------------------------------------------------------------------
# temporal fusion block


def test_tfblock_gate_extremes():
    torch.manual_seed(5)
    tf = TFBlock(8, 2)
    x = torch.randn(2, 3, 8, 4, 4)
    k = torch.randn(2, 3, 8, 4, 4)
    v = torch.randn(2, 3, 8, 4, 4)
    cross, self_ = tf.branches(x, (k, v))
    assert torch.allclose(tf(x, (k, v), force_gate=1.0), cross, atol=0)
    assert torch.allclose(tf(x, (k, v), force_gate=0.0), self_, atol=0)


def test_tfblock_output_is_convex_combination():
    torch.manual_seed(6)
    tf = TFBlock(8, 2)
    x = torch.randn(1, 3, 8, 4, 4)
    k = torch.randn(1, 3, 8, 4, 4)
    v = torch.randn(1, 3, 8, 4, 4)
    cross, self_ = tf.branches(x, (k, v))
    out = tf(x, (k, v))
    lo = torch.minimum(cross, self_)
    hi = torch.maximum(cross, self_)
    assert torch.all(out >= lo - 1e-6) and torch.all(out <= hi + 1e-6)


def test_tfblock_single_frame_self_branch_is_value_projection():
    torch.manual_seed(7)
    tf = TFBlock(8, 2)
    x = torch.randn(2, 1, 8, 4, 4)
    k = torch.randn(2, 1, 8, 4, 4)
    v = torch.randn(2, 1, 8, 4, 4)
    _, self_ = tf.branches(x, (k, v))
    xn = tf._normed(x).reshape(2, 8, 4, 4)
    expected = tf.v_self(xn).view(2, 1, 8, 4, 4)
    assert torch.allclose(self_, expected, atol=1e-6)


def test_tfblock_kv_spatial_mismatch():
    tf = TFBlock(8, 2)
    x = torch.randn(1, 2, 8, 4, 4)
    k = torch.randn(1, 2, 8, 2, 2)
    with pytest.raises(ConfigError):
        tf(x, (k, k))


def test_tfblock_shape_preserved():
    torch.manual_seed(8)
    tf = TFBlock(8, 2)
    x = torch.randn(2, 3, 8, 6, 6)
    kv = (torch.randn(2, 3, 8, 6, 6), torch.randn(2, 3, 8, 6, 6))
    assert tf(x, kv).shape == x.shape


# ---------------------------------------------------------------------------
# hybrid attention block


def test_neighborhood_mask_full_window():
    mask = neighborhood_mask(4, 4, 3, device=None)
    assert mask.shape == (16, 16)
    # corner pixel attends to the clamped 3x3 block at the corner
    corner = mask[0].view(4, 4)
    assert corner[:3, :3].all() and not corner[3:, :].any() and not corner[:, 3:].any()


def test_neighborhood_mask_rejects_oversize():
    with pytest.raises(ConfigError):
        neighborhood_mask(4, 4, 5)


def test_hablock_single_token_coincidence():
    torch.manual_seed(9)
    ha = HABlock(8, 2, window=1, embed_dim=16)
    x = torch.randn(2, 8, 1, 1)
    out_g, out_n = ha.branches(x)
    assert torch.allclose(out_g, out_n, atol=1e-7)
    out = ha(x, None, force_gammas=(0.3, 0.7))
    assert torch.allclose(out, (0.3 + 0.7) * out_g, atol=1e-6)


def test_hablock_gamma2_zero_is_pure_global():
    torch.manual_seed(10)
    ha = HABlock(8, 2, window=3, embed_dim=16)
    x = torch.randn(1, 8, 6, 6)
    out_g, _ = ha.branches(x)
    out = ha(x, None, force_gammas=(1.0, 0.0))
    assert torch.allclose(out, out_g, atol=0)


def test_hablock_full_window_equals_global():
    torch.manual_seed(11)
    ha = HABlock(8, 2, window=7, embed_dim=16)
    ha.window = 8  # full spatial extent of the 8x8 map
    x = torch.randn(1, 8, 8, 8)
    out_g, out_n = ha.branches(x)
    assert (out_g - out_n).abs().max() < 1e-5


def test_hablock_gammas_nonnegative():
    torch.manual_seed(12)
    ha = HABlock(8, 2, window=3, embed_dim=16)
    emb = torch.randn(5, 16)
    assert (ha.gammas(emb) >= 0).all()


def test_hablock_window_too_large_errors():
    ha = HABlock(8, 2, window=5, embed_dim=16)
    with pytest.raises(ConfigError):
        ha(torch.randn(1, 8, 4, 4), torch.randn(1, 16))


# ---------------------------------------------------------------------------
# noise embedding


def test_noise_embedding_finite_and_positive_sigma_only():
    emb = NoiseEmbedding(16)
    out = emb(torch.tensor([1e-3, 1.0, 10.0]))
    assert torch.isfinite(out).all()
    with pytest.raises(ConfigError):
        emb(torch.tensor([0.0]))


# ---------------------------------------------------------------------------
# denoiser


def test_denoise_zero_init_identity():
    torch.manual_seed(13)
    model = MTCDN(SMALL)
    sched = Schedule()
    x, mu, aux = _inputs(SMALL)
    for sig in (0.05, 0.7, 4.0):
        out = denoise(model, sched, x, sig, mu, aux)
        c_skip = sched.sigma_data**2 / (sig**2 + sched.sigma_data**2)
        expected = c_skip * (x - sched.alpha * sig * mu)
        assert torch.allclose(out, expected, atol=1e-6)


def test_denoise_shape_contract():
    sched = Schedule()
    for b in (1, 2):
        for t in (1, 3):
            cfg = MTCDNConfig(
                frames=t, base_channels=8, depth=2, heads=2,
                neighborhood_window=3, embed_dim=16,
            )
            torch.manual_seed(14)
            model = MTCDN(cfg)
            x, mu, aux = _inputs(cfg, b=b)
            out = denoise(model, sched, x, 1.0, mu, aux)
            assert out.shape == x.shape


def test_denoise_deterministic_in_eval():
    torch.manual_seed(15)
    model = MTCDN(SMALL)
    model.eval()
    sched = Schedule()
    x, mu, aux = _inputs(SMALL, seed=3)
    with torch.no_grad():
        a = denoise(model, sched, x, 0.8, mu, aux)
        b = denoise(model, sched, x, 0.8, mu, aux)
    assert torch.equal(a, b)


def test_denoise_rejects_nonfinite():
    torch.manual_seed(16)
    model = MTCDN(SMALL)
    sched = Schedule()
    x, mu, aux = _inputs(SMALL)
    x[0, 0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericError):
        denoise(model, sched, x, 1.0, mu, aux)


def test_denoise_rejects_zero_sigma():
    torch.manual_seed(17)
    model = MTCDN(SMALL)
    x, mu, aux = _inputs(SMALL)
    with pytest.raises(ConfigError):
        denoise(model, Schedule(), x, 0.0, mu, aux)


def test_denoise_per_item_sigma_matches_scalar_calls():
    torch.manual_seed(18)
    model = MTCDN(SMALL)
    model.eval()
    sched = Schedule()
    x, mu, aux = _inputs(SMALL, b=2)
    with torch.no_grad():
        batched = denoise(model, sched, x, np.array([0.5, 2.0], np.float32), mu, aux)
        one = denoise(model, sched, x[:1], 0.5, mu[:1], aux[:1])
        two = denoise(model, sched, x[1:], 2.0, mu[1:], aux[1:])
    assert torch.allclose(batched[0], one[0], atol=1e-6)
    assert torch.allclose(batched[1], two[0], atol=1e-6)


def test_precomputed_condition_matches_inline():
    torch.manual_seed(19)
    model = MTCDN(SMALL)
    model.eval()
    sched = Schedule()
    x, mu, aux = _inputs(SMALL)
    with torch.no_grad():
        cond = model.encode_condition(mu, aux)
        a = denoise(model, sched, x, 1.2, mu, aux, cond)
        b = denoise(model, sched, x, 1.2, mu, aux)
    assert torch.equal(a, b)


def test_gradient_flow_all_parameters():
    torch.manual_seed(20)
    model = MTCDN(SMALL)
    sched = Schedule()
    x, mu, aux = _inputs(SMALL)
    out = denoise(model, sched, x, 1.0, mu, aux)
    out.square().mean().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, f"no gradient for {name}"
        assert torch.isfinite(p.grad).all(), f"non-finite gradient for {name}"


def test_directional_derivatives_match_finite_differences():
    # double precision, 2-frame 8x8 input, 10 random parameters, relative 1e-3
    torch.manual_seed(21)
    model = MTCDN(SMALL).double()
    sched = Schedule()
    x, mu, aux = _inputs(SMALL, seed=5)
    x, mu, aux = x.double(), mu.double(), aux.double()
    target = torch.randn(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(6))

    def loss_value():
        out = denoise(model, sched, x, 0.9, mu, aux)
        return ((out - target) ** 2).mean()

    loss = loss_value()
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params)

    rng = np.random.default_rng(7)
    picks = rng.choice(len(params), size=10, replace=False)
    h = 1e-6
    for idx in picks:
        p = params[idx]
        direction = torch.from_numpy(rng.standard_normal(tuple(p.shape)))
        direction /= direction.norm()
        analytic = float((grads[idx] * direction).sum())
        with torch.no_grad():
            p.add_(h * direction)
            lp = float(loss_value())
            p.add_(-2 * h * direction)
            lm = float(loss_value())
            p.add_(h * direction)
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), 1e-8)
        assert abs(analytic - fd) / denom < 1e-3, (
            f"param {idx}: analytic {analytic}, fd {fd}"
        )
