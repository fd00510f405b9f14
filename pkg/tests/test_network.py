"""Backbone tests: wiring oracles, gradients, training loop, serialization."""

import numpy as np
import pytest

from rxgb import costmodel, data, gbdt, netspec, network
from oracles import naive_conv2d


def tiny_spec(with_fc=True, feature_dim=16, classes=4):
    """stem 1->8 on 8x8, one normal block, one stride-2 reduction, pool, fc."""
    layers = [
        netspec.LayerSpec(netspec.FIRST_CONV, "stem", 1, 8, 2),
        netspec.LayerSpec(netspec.NORMAL, "block1", 8, 8, 1),
        netspec.LayerSpec(netspec.REDUCTION, "block2", 8, 16, 2),
        netspec.LayerSpec(netspec.GLOBAL_POOL, "pool", 16, 16),
    ]
    if with_fc:
        layers.append(netspec.LayerSpec(netspec.FC_HEAD, "fc", 16, classes))
    return netspec.NetworkSpec(
        layers=tuple(layers), input_shape=(1, 8, 8), feature_dim=feature_dim,
        class_count=classes,
    )


def oracle_spec():
    """6x6 input so the reduction sees an odd 3x3 grid and must pad."""
    return netspec.NetworkSpec(
        layers=(
            netspec.LayerSpec(netspec.FIRST_CONV, "stem", 1, 4, 2),
            netspec.LayerSpec(netspec.NORMAL, "block1", 4, 4, 1),
            netspec.LayerSpec(netspec.REDUCTION, "block2", 4, 8, 2),
            netspec.LayerSpec(netspec.GLOBAL_POOL, "pool", 8, 8),
            netspec.LayerSpec(netspec.FC_HEAD, "fc", 8, 3),
        ),
        input_shape=(1, 6, 6), feature_dim=8, class_count=3,
    )


def randomize_params(model, seed):
    """Overwrite every parameter with random values so no term is degenerate."""
    rng = np.random.default_rng(seed)
    for key, val in model.params.items():
        if key.endswith("run_var"):
            val[:] = rng.uniform(0.5, 2.0, size=val.shape)
        else:
            val[:] = rng.normal(scale=0.5, size=val.shape)


# --- straight-line oracle ----------------------------------------------------
#
# A literal re-implementation of the exact tiny plan in oracle_spec(), written
# without any rxgb forward/backward code: explicit-loop convolutions, textbook
# batchnorm gradients, and the surrogate/STE rules stated in the docstrings.


def _o_conv_bwd(gy, x, w, stride, padding, pad_value=0.0):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.full((n, ci, h + 2 * padding, wd + 2 * padding), pad_value)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    oh, ow = gy.shape[2], gy.shape[3]
    for b in range(n):
        for o in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    g = gy[b, o, oy, ox]
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(ci):
                                gxp[b, c, oy * stride + i, ox * stride + j] += w[o, c, i, j] * g
                                gw[o, c, i, j] += xp[b, c, oy * stride + i, ox * stride + j] * g
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp, gw


def _o_bn_fwd(x, gamma, beta, eps=1e-5):
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3))
    xhat = (x - m[None, :, None, None]) / np.sqrt(v + eps)[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], (x, m, v, gamma, eps)


def _o_bn_bwd(gy, cache):
    x, m, v, gamma, eps = cache
    count = x.shape[0] * x.shape[2] * x.shape[3]
    inv = 1.0 / np.sqrt(v + eps)
    xc = x - m[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    dxhat = gy * gamma[None, :, None, None]
    dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * -0.5 * inv ** 3
    dmean = (-dxhat.sum(axis=(0, 2, 3)) * inv
             + dvar * (-2.0 / count) * xc.sum(axis=(0, 2, 3)))
    dx = (dxhat * inv[None, :, None, None]
          + dvar[None, :, None, None] * 2.0 * xc / count
          + dmean[None, :, None, None] / count)
    return dx, dgamma, dbeta


def _o_rsign_fwd(x, shift):
    u = x - shift[None, :, None, None]
    return np.where(u >= 0, 1.0, -1.0), u


def _o_rsign_bwd(gy, u, ):
    d = np.zeros_like(u)
    neg = (u >= -1.0) & (u < 0.0)
    pos = (u >= 0.0) & (u < 1.0)
    d[neg] = 2.0 + 2.0 * u[neg]
    d[pos] = 2.0 - 2.0 * u[pos]
    gx = gy * d
    return gx, -gx.sum(axis=(0, 2, 3))


def _o_rprelu_fwd(x, beta, gamma, zeta):
    u = x - gamma[None, :, None, None]
    y = np.where(u >= 0, u, beta[None, :, None, None] * u)
    return y + zeta[None, :, None, None], u


def _o_rprelu_bwd(gy, u, beta):
    pos = u >= 0
    gx = gy * np.where(pos, 1.0, beta[None, :, None, None])
    dbeta = (gy * np.where(pos, 0.0, u)).sum(axis=(0, 2, 3))
    dgamma = -gx.sum(axis=(0, 2, 3))
    dzeta = gy.sum(axis=(0, 2, 3))
    return gx, dbeta, dgamma, dzeta


def _o_eff(latent):
    alpha = np.abs(latent).mean(axis=(1, 2, 3))
    return np.where(latent >= 0, 1.0, -1.0) * alpha[:, None, None, None]


def oracle_tiny_net(params, x, labels):
    """Forward + backward of the oracle_spec() plan, fully straight-line."""
    p = params
    g = {}

    # stem: conv s2 p1, bn
    z0 = naive_conv2d(x, p["stem.conv.w"], stride=2, padding=1)
    h0, bn0c = _o_bn_fwd(z0, p["stem.bn.gamma"], p["stem.bn.beta"])

    # block1 (normal, 4 channels, 3x3 grid)
    a1, u_rs1 = _o_rsign_fwd(h0, p["block1.rsign_conv3x3.shift"])
    w1_eff = _o_eff(p["block1.conv3x3.w_latent"])
    z1 = naive_conv2d(a1, w1_eff, stride=1, padding=1, pad_value=-1.0)
    b1, bn1c = _o_bn_fwd(z1, p["block1.bn_conv3x3.gamma"], p["block1.bn_conv3x3.beta"])
    c1 = b1 + h0
    d1, u_rp1 = _o_rprelu_fwd(c1, p["block1.rprelu_conv3x3.beta"],
                              p["block1.rprelu_conv3x3.gamma"],
                              p["block1.rprelu_conv3x3.zeta"])
    a2, u_rs2 = _o_rsign_fwd(d1, p["block1.rsign_conv1x1.shift"])
    w2_eff = _o_eff(p["block1.conv1x1.w_latent"])
    z2 = naive_conv2d(a2, w2_eff, stride=1, padding=0, pad_value=-1.0)
    b2, bn2c = _o_bn_fwd(z2, p["block1.bn_conv1x1.gamma"], p["block1.bn_conv1x1.beta"])
    c2 = b2 + d1
    e1, u_rp2 = _o_rprelu_fwd(c2, p["block1.rprelu_conv1x1.beta"],
                              p["block1.rprelu_conv1x1.gamma"],
                              p["block1.rprelu_conv1x1.zeta"])

    # block2 (reduction 4->8, stride 2): 3x3 grid pads to 4x4 bottom/right
    xp = np.pad(e1, ((0, 0), (0, 0), (0, 1), (0, 1)))
    a3, u_rs3 = _o_rsign_fwd(xp, p["block2.rsign_conv3x3.shift"])
    w3_eff = _o_eff(p["block2.conv3x3.w_latent"])
    z3 = naive_conv2d(a3, w3_eff, stride=2, padding=1, pad_value=-1.0)
    b3, bn3c = _o_bn_fwd(z3, p["block2.bn_conv3x3.gamma"], p["block2.bn_conv3x3.beta"])
    n, c, hp_, wp_ = xp.shape
    pooled = xp.reshape(n, c, hp_ // 2, 2, wp_ // 2, 2).mean(axis=(3, 5))
    c3 = b3 + pooled
    d3, u_rp3 = _o_rprelu_fwd(c3, p["block2.rprelu_conv3x3.beta"],
                              p["block2.rprelu_conv3x3.gamma"],
                              p["block2.rprelu_conv3x3.zeta"])
    a4, u_rs4 = _o_rsign_fwd(d3, p["block2.rsign_conv1x1.shift"])
    wa_eff = _o_eff(p["block2.conv1x1_a.w_latent"])
    wb_eff = _o_eff(p["block2.conv1x1_b.w_latent"])
    za = naive_conv2d(a4, wa_eff, stride=1, padding=0, pad_value=-1.0)
    zb = naive_conv2d(a4, wb_eff, stride=1, padding=0, pad_value=-1.0)
    ba, bnac = _o_bn_fwd(za, p["block2.bn_conv1x1_a.gamma"], p["block2.bn_conv1x1_a.beta"])
    bb, bnbc = _o_bn_fwd(zb, p["block2.bn_conv1x1_b.gamma"], p["block2.bn_conv1x1_b.beta"])
    cat = np.concatenate([ba + d3, bb + d3], axis=1)
    e2, u_rp4 = _o_rprelu_fwd(cat, p["block2.rprelu_out.beta"],
                              p["block2.rprelu_out.gamma"],
                              p["block2.rprelu_out.zeta"])

    # pool + fc + cross-entropy
    feats = e2.mean(axis=(2, 3))
    logits = feats @ p["fc.w"]
    zmax = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(zmax) / np.exp(zmax).sum(axis=1, keepdims=True)
    nb = len(labels)
    loss = -np.log(probs[np.arange(nb), labels]).mean()

    glog = probs.copy()
    glog[np.arange(nb), labels] -= 1.0
    glog /= nb
    g["fc.w"] = feats.T @ glog
    gfeats = glog @ p["fc.w"].T
    ge2 = np.broadcast_to(gfeats[:, :, None, None] / (e2.shape[2] * e2.shape[3]),
                          e2.shape).copy()

    # block2 backward
    gcat, g["block2.rprelu_out.beta"], g["block2.rprelu_out.gamma"], \
        g["block2.rprelu_out.zeta"] = _o_rprelu_bwd(ge2, u_rp4, p["block2.rprelu_out.beta"])
    gca, gcb = gcat[:, :4], gcat[:, 4:]
    gd3 = gca + gcb
    gza, g["block2.bn_conv1x1_a.gamma"], g["block2.bn_conv1x1_a.beta"] = _o_bn_bwd(gca, bnac)
    gzb, g["block2.bn_conv1x1_b.gamma"], g["block2.bn_conv1x1_b.beta"] = _o_bn_bwd(gcb, bnbc)
    ga4a, gwa = _o_conv_bwd(gza, a4, wa_eff, 1, 0, pad_value=-1.0)
    ga4b, gwb = _o_conv_bwd(gzb, a4, wb_eff, 1, 0, pad_value=-1.0)
    g["block2.conv1x1_a.w_latent"] = gwa * (np.abs(p["block2.conv1x1_a.w_latent"]) <= 1)
    g["block2.conv1x1_b.w_latent"] = gwb * (np.abs(p["block2.conv1x1_b.w_latent"]) <= 1)
    gd3_rs, g["block2.rsign_conv1x1.shift"] = _o_rsign_bwd(ga4a + ga4b, u_rs4)
    gd3 = gd3 + gd3_rs
    gc3, g["block2.rprelu_conv3x3.beta"], g["block2.rprelu_conv3x3.gamma"], \
        g["block2.rprelu_conv3x3.zeta"] = _o_rprelu_bwd(gd3, u_rp3, p["block2.rprelu_conv3x3.beta"])
    gxp = np.repeat(np.repeat(gc3 / 4.0, 2, axis=2), 2, axis=3)   # pool shortcut
    gz3, g["block2.bn_conv3x3.gamma"], g["block2.bn_conv3x3.beta"] = _o_bn_bwd(gc3, bn3c)
    ga3, gw3 = _o_conv_bwd(gz3, a3, w3_eff, 2, 1, pad_value=-1.0)
    g["block2.conv3x3.w_latent"] = gw3 * (np.abs(p["block2.conv3x3.w_latent"]) <= 1)
    ga3_rs, g["block2.rsign_conv3x3.shift"] = _o_rsign_bwd(ga3, u_rs3)
    gxp = gxp + ga3_rs
    ge1 = gxp[:, :, :3, :3]                                       # strip the pad ring

    # block1 backward
    gc2, g["block1.rprelu_conv1x1.beta"], g["block1.rprelu_conv1x1.gamma"], \
        g["block1.rprelu_conv1x1.zeta"] = _o_rprelu_bwd(ge1, u_rp2, p["block1.rprelu_conv1x1.beta"])
    gd1 = gc2.copy()
    gz2, g["block1.bn_conv1x1.gamma"], g["block1.bn_conv1x1.beta"] = _o_bn_bwd(gc2, bn2c)
    ga2, gw2 = _o_conv_bwd(gz2, a2, w2_eff, 1, 0, pad_value=-1.0)
    g["block1.conv1x1.w_latent"] = gw2 * (np.abs(p["block1.conv1x1.w_latent"]) <= 1)
    gd1_rs, g["block1.rsign_conv1x1.shift"] = _o_rsign_bwd(ga2, u_rs2)
    gd1 = gd1 + gd1_rs
    gc1, g["block1.rprelu_conv3x3.beta"], g["block1.rprelu_conv3x3.gamma"], \
        g["block1.rprelu_conv3x3.zeta"] = _o_rprelu_bwd(gd1, u_rp1, p["block1.rprelu_conv3x3.beta"])
    gh0 = gc1.copy()
    gz1, g["block1.bn_conv3x3.gamma"], g["block1.bn_conv3x3.beta"] = _o_bn_bwd(gc1, bn1c)
    ga1, gw1 = _o_conv_bwd(gz1, a1, w1_eff, 1, 1, pad_value=-1.0)
    g["block1.conv3x3.w_latent"] = gw1 * (np.abs(p["block1.conv3x3.w_latent"]) <= 1)
    gh0_rs, g["block1.rsign_conv3x3.shift"] = _o_rsign_bwd(ga1, u_rs1)
    gh0 = gh0 + gh0_rs

    # stem backward
    gz0, g["stem.bn.gamma"], g["stem.bn.beta"] = _o_bn_bwd(gh0, bn0c)
    _, g["stem.conv.w"] = _o_conv_bwd(gz0, x, p["stem.conv.w"], 2, 1)

    return logits, loss, g


def test_forward_backward_match_straight_line_oracle():
    model = network.build_network(oracle_spec(), seed=11)
    randomize_params(model, 12)
    x = np.random.default_rng(13).normal(size=(3, 1, 6, 6))
    labels = np.array([0, 1, 2])
    frozen = {k: v.copy() for k, v in model.params.items()}

    want_logits, want_loss, want_grads = oracle_tiny_net(frozen, x, labels)
    got_loss, got_grads = network.loss_and_grads(model, x, labels)
    got_logits, _ = network.forward(model, x, training=True)

    np.testing.assert_allclose(got_logits, want_logits, rtol=1e-10, atol=1e-12)
    assert abs(got_loss - want_loss) < 1e-10
    assert sorted(got_grads) == sorted(want_grads)
    for key in want_grads:
        np.testing.assert_allclose(
            got_grads[key], want_grads[key], rtol=1e-9, atol=1e-12,
            err_msg=f"gradient mismatch for {key}",
        )


# --- construction ------------------------------------------------------------


def test_build_initial_values_and_shapes():
    spec = tiny_spec()
    model = network.build_network(spec, seed=0)
    p = model.params
    assert p["stem.conv.w"].shape == (8, 1, 3, 3)
    assert p["block1.conv3x3.w_latent"].shape == (8, 8, 3, 3)
    assert p["block2.conv1x1_a.w_latent"].shape == (8, 8, 1, 1)
    assert p["block2.rprelu_out.beta"].shape == (16,)
    assert p["fc.w"].shape == (16, 4)
    assert np.all(p["block1.rsign_conv3x3.shift"] == 0.0)
    assert np.all(p["block1.rprelu_conv3x3.beta"] == 0.25)
    assert np.all(p["block1.rprelu_conv3x3.gamma"] == 0.0)
    assert np.all(p["block1.rprelu_conv3x3.zeta"] == 0.0)
    assert np.all(p["stem.bn.gamma"] == 1.0)
    assert np.all(p["stem.bn.run_var"] == 1.0)
    # Kaiming-uniform fan-in bound
    assert np.abs(p["block1.conv3x3.w_latent"]).max() <= np.sqrt(6.0 / 72)
    assert np.abs(p["fc.w"]).max() <= np.sqrt(6.0 / 16)
    assert set(model.velocities) == set(model.learnable_keys())
    assert not any(k.endswith(("run_mean", "run_var"))
                   for k in model.learnable_keys())


def test_build_is_seed_deterministic():
    a = network.build_network(tiny_spec(), seed=5)
    b = network.build_network(tiny_spec(), seed=5)
    c = network.build_network(tiny_spec(), seed=6)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_forward_validates_input_and_head():
    model = network.build_network(tiny_spec(), seed=0)
    with pytest.raises(ValueError, match="input shape"):
        network.forward(model, np.zeros((2, 1, 7, 8)))
    with pytest.raises(ValueError, match="input shape"):
        network.forward(model, np.zeros((1, 8, 8)))
    headless = network.build_network(tiny_spec(with_fc=False), seed=0)
    with pytest.raises(ValueError, match="fc_head"):
        network.forward(headless, np.zeros((2, 1, 8, 8)))
    feats = network.features_forward(headless, np.zeros((2, 1, 8, 8)))
    assert feats.shape == (2, 16)


def test_forward_finite_on_zero_and_random_input():
    model = network.build_network(tiny_spec(), seed=1)
    for x in (np.zeros((4, 1, 8, 8)),
              np.random.default_rng(2).normal(size=(4, 1, 8, 8))):
        logits, _ = network.forward(model, x, training=True)
        assert logits.shape == (4, 4)
        assert np.isfinite(logits).all()


# --- inference-mode invariants -------------------------------------------------


def test_infer_mode_batch_invariance():
    model = network.build_network(tiny_spec(), seed=7)
    randomize_params(model, 8)
    x = np.random.default_rng(9).normal(size=(9, 1, 8, 8))
    full, _ = network.forward(model, x, training=False)

    # identical samples inside one batch produce identical rows
    dup, _ = network.forward(model, np.repeat(x[:1], 8, axis=0), training=False)
    assert all(np.array_equal(dup[0], dup[i]) for i in range(8))

    # reordering a batch reorders rows bit-identically
    perm = np.random.default_rng(10).permutation(9)
    permuted, _ = network.forward(model, x[perm], training=False)
    assert np.array_equal(permuted, full[perm])

    # different batch splits agree to BLAS-blocking noise
    solo = np.concatenate(
        [network.forward(model, x[i:i + 1], training=False)[0] for i in range(9)]
    )
    np.testing.assert_allclose(solo, full, rtol=0, atol=1e-12)


def test_train_mode_updates_running_stats_infer_mode_does_not():
    model = network.build_network(tiny_spec(), seed=3)
    x = np.random.default_rng(4).normal(size=(6, 1, 8, 8))
    before = model.params["stem.bn.run_mean"].copy()
    network.forward(model, x, training=False)
    assert np.array_equal(model.params["stem.bn.run_mean"], before)
    network.forward(model, x, training=True)
    assert not np.array_equal(model.params["stem.bn.run_mean"], before)


def test_head_factorization_logits_equal_features_times_fc():
    model = network.build_network(tiny_spec(), seed=5)
    randomize_params(model, 6)
    x = np.random.default_rng(7).normal(size=(5, 1, 8, 8))
    logits, _ = network.forward(model, x, training=False)
    feats = network.features_forward(model, x)
    np.testing.assert_allclose(logits, feats @ model.params["fc.w"],
                               rtol=0, atol=1e-10)


# --- finite differences on the smooth tail ------------------------------------
#
# Parameters between the last binarization and the loss have true gradients
# (no sign crossings on the path), so central differences must agree. Latents
# and anything feeding a later RSign go through surrogate gradients instead
# and are covered by the straight-line oracle above.


def test_tail_gradients_match_finite_differences():
    model = network.build_network(oracle_spec(), seed=21)
    randomize_params(model, 22)
    x = np.random.default_rng(23).normal(size=(3, 1, 6, 6))
    labels = np.array([2, 0, 1])
    _, grads = network.loss_and_grads(model, x, labels)

    def loss_at():
        loss, _ = network.loss_and_grads(model, x, labels)
        return loss

    eps = 1e-6
    for key in ("fc.w", "block2.rprelu_out.beta", "block2.rprelu_out.gamma",
                "block2.rprelu_out.zeta", "block2.bn_conv1x1_a.gamma",
                "block2.bn_conv1x1_b.beta"):
        arr = model.params[key]
        flat = arr.reshape(-1)
        idx = np.random.default_rng(24).choice(flat.size, size=min(4, flat.size),
                                               replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_at()
            flat[i] = orig - eps
            lo = loss_at()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            got = grads[key].reshape(-1)[i]
            assert abs(got - fd) < 1e-5 * max(1.0, abs(fd)), (
                f"{key}[{i}]: analytic {got} vs fd {fd}"
            )


# --- training loop -------------------------------------------------------------


def separable_dataset(n, seed, classes=4):
    """Each class lights up one quadrant of an 8x8 image."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = rng.normal(scale=0.1, size=(n, 1, 8, 8))
    quad = [(0, 0), (0, 4), (4, 0), (4, 4)]
    for i, lab in enumerate(labels):
        r, c = quad[lab]
        images[i, 0, r:r + 4, c:c + 4] += 1.0
    return data.Dataset(images=images, labels=labels.astype(np.int64),
                        split="train")


def test_overfits_small_separable_sample():
    ds = separable_dataset(64, seed=31)
    model = network.build_network(tiny_spec(), seed=32)
    hp = network.StageOneConfig(epochs=60, batch_size=16, learning_rate=0.05,
                                momentum=0.9, weight_decay=0.0, seed=33)
    result = network.train_stage1(model, ds, ds, hp)
    assert not result.aborted
    assert result.best_val_top1 == 1.0
    assert result.metrics[-1].train_loss < result.metrics[0].train_loss


def test_zero_learning_rate_leaves_params_unchanged():
    ds = separable_dataset(16, seed=41)
    model = network.build_network(tiny_spec(), seed=42)
    before = {k: v.copy() for k, v in model.params.items()}
    hp = network.StageOneConfig(epochs=1, batch_size=8, learning_rate=0.0,
                                weight_decay=0.0, seed=43)
    result = network.train_stage1(model, ds, ds, hp)
    assert not result.aborted
    for key in model.learnable_keys():
        assert np.array_equal(result.model.params[key], before[key]), key


def test_training_is_deterministic():
    ds = separable_dataset(32, seed=51)
    hp = network.StageOneConfig(epochs=3, batch_size=8, learning_rate=0.02,
                                seed=52, augment=True)
    runs = []
    for _ in range(2):
        model = network.build_network(tiny_spec(), seed=53)
        result = network.train_stage1(model, ds, ds, hp)
        runs.append(result)
    a, b = runs
    assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]
    assert all(np.array_equal(a.model.params[k], b.model.params[k])
               for k in a.model.params)


def test_metrics_log_and_cosine_schedule():
    ds = separable_dataset(16, seed=61)
    model = network.build_network(tiny_spec(), seed=62)
    hp = network.StageOneConfig(epochs=4, batch_size=8, learning_rate=0.04, seed=63)
    result = network.train_stage1(model, ds, ds, hp)
    assert len(result.metrics) == 4
    for e, m in enumerate(result.metrics):
        assert m.epoch == e
        assert m.wall_seconds > 0
        want_lr = 0.5 * 0.04 * (1 + np.cos(np.pi * e / 4))
        assert abs(m.learning_rate - want_lr) < 1e-15
    assert result.best_epoch == min(
        e for e, m in enumerate(result.metrics)
        if m.val_top1 == result.best_val_top1
    )


def test_best_checkpoint_prefers_earlier_tie():
    ds = separable_dataset(64, seed=71)
    model = network.build_network(tiny_spec(), seed=72)
    hp = network.StageOneConfig(epochs=12, batch_size=16, learning_rate=0.05,
                                weight_decay=0.0, seed=73)
    result = network.train_stage1(model, ds, ds, hp)
    tops = [m.val_top1 for m in result.metrics]
    assert result.best_val_top1 == max(tops)
    assert result.best_epoch == tops.index(max(tops))


def test_nan_loss_aborts_with_initial_state():
    ds = separable_dataset(16, seed=81)
    model = network.build_network(tiny_spec(), seed=82)
    model.params["fc.w"][0, 0] = np.nan
    hp = network.StageOneConfig(epochs=3, batch_size=8, seed=83)
    result = network.train_stage1(model, ds, ds, hp)
    assert result.aborted
    assert "epoch 0" in result.abort_reason
    assert result.best_epoch == -1
    assert result.metrics == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_after_completed_epoch():
    ds = separable_dataset(16, seed=91)
    model = network.build_network(tiny_spec(), seed=92)
    hp = network.StageOneConfig(epochs=5, batch_size=16, learning_rate=1e9,
                                momentum=0.9, weight_decay=0.0, seed=93)
    result = network.train_stage1(model, ds, ds, hp)
    assert result.aborted
    assert "non-finite" in result.abort_reason
    assert len(result.metrics) < 5


# --- stage-2 interface ----------------------------------------------------------


def test_extract_features_matches_forward_and_is_deterministic():
    ds = separable_dataset(10, seed=101)
    model = network.build_network(tiny_spec(), seed=102)
    randomize_params(model, 103)
    feats, labels = network.extract_features(model, ds, batch_size=4)
    assert feats.shape == (10, 16)
    assert np.array_equal(labels, ds.labels)
    whole = network.features_forward(model, ds.images)
    np.testing.assert_allclose(feats, whole, rtol=0, atol=1e-12)
    again, _ = network.extract_features(model, ds, batch_size=4)
    assert np.array_equal(feats, again)


def test_infer_hybrid_equals_two_step_pipeline():
    ds = separable_dataset(40, seed=111)
    model = network.build_network(tiny_spec(), seed=112)
    randomize_params(model, 113)
    feats, labels = network.extract_features(model, ds, batch_size=40)
    cfg = gbdt.GBDTConfig(n_classes=4, max_trees=8, max_depth=3)
    ens = gbdt.train_ensemble(feats, labels, cfg)

    pred, scores = network.infer_hybrid(model, ens, ds.images)
    assert np.array_equal(pred, gbdt.predict_class(ens, feats))
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)

    # the persisted-feature path is bit-identical: float32 is canonical
    import os, tempfile
    fd, path = tempfile.mkstemp()
    os.close(fd)
    try:
        data.save_features(path, feats, labels)
        loaded, _ = data.load_features(path)
        assert np.array_equal(gbdt.predict_class(ens, loaded), pred)
    finally:
        os.unlink(path)


def test_infer_hybrid_rejects_width_mismatch():
    model = network.build_network(tiny_spec(), seed=121)
    ens = gbdt.TreeEnsemble(config=gbdt.GBDTConfig(n_classes=4, max_trees=4),
                            n_features=9)
    with pytest.raises(ValueError, match="features"):
        network.infer_hybrid(model, ens, np.zeros((2, 1, 8, 8)))


# --- checkpoint + deployment ----------------------------------------------------


def test_checkpoint_roundtrip_is_byte_identical():
    ds = separable_dataset(16, seed=131)
    model = network.build_network(tiny_spec(), seed=132)
    hp = network.StageOneConfig(epochs=2, batch_size=8, learning_rate=0.03, seed=133)
    trained = network.train_stage1(model, ds, ds, hp).model
    blob = network.checkpoint_bytes(trained)
    loaded = network.parse_checkpoint(blob)
    assert network.checkpoint_bytes(loaded) == blob
    assert loaded.spec == trained.spec
    assert loaded.seed == trained.seed and loaded.epoch == trained.epoch
    for key in trained.params:
        assert np.array_equal(loaded.params[key], trained.params[key])
    for key in trained.velocities:
        assert np.array_equal(loaded.velocities[key], trained.velocities[key])
    x = np.random.default_rng(134).normal(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(
        network.forward(loaded, x)[0], network.forward(trained, x)[0]
    )


def test_checkpoint_rejects_malformed_blobs():
    model = network.build_network(tiny_spec(), seed=141)
    blob = network.checkpoint_bytes(model)
    cases = [
        b"",
        b"NOTMAGIC" + blob[8:],
        blob[:40],
        blob[:-7],
        blob + b"x",
        blob[:8] + (99).to_bytes(4, "little") + blob[12:],
    ]
    for bad in cases:
        with pytest.raises(network.CheckpointError):
            network.parse_checkpoint(bad)


def test_deployed_payload_layout_and_cost_model_agreement():
    spec = tiny_spec()
    model = network.build_network(spec, seed=151)
    randomize_params(model, 152)
    payload = network.deployed_payload(model)
    report = costmodel.cost_report(spec)
    assert report.binary_param_bits % 8 == 0
    assert len(payload) == report.total_param_bits // 8

    # bit section: first latent's signs, packed LSB-first
    latents = [model.params[k] for k in model.params if k.endswith(".w_latent")]
    bits = np.concatenate([(l.reshape(-1) >= 0).astype(np.uint8) for l in latents])
    packed = np.packbits(bits, bitorder="little")
    nbytes = report.binary_param_bits // 8
    assert payload[:nbytes] == packed.tobytes()

    # float section starts with the stem conv weights as float32
    stem = np.frombuffer(payload, dtype="<f4", count=72, offset=nbytes)
    np.testing.assert_array_equal(
        stem, model.params["stem.conv.w"].astype("<f4").reshape(-1)
    )

    headless = network.build_network(tiny_spec(with_fc=False), seed=151)
    report2 = costmodel.cost_report(tiny_spec(with_fc=False))
    assert len(network.deployed_payload(headless)) == report2.total_param_bits // 8


def test_reference_plan_payload_matches_cost_model():
    spec = netspec.reference_spec()
    model = network.build_network(spec, seed=0)
    payload = network.deployed_payload(model)
    report = costmodel.cost_report(spec)
    assert len(payload) == report.total_param_bits // 8 == 3_896_064
