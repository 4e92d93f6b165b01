import math

import numpy as np
import pytest

from textfusion.model import (DEFAULT_BETA, Batch, ModelConfig, ModelParams, combined_loss, extract_retrieval_feature,
                              forward, gradient_report, is_decay_exempt, load_checkpoint, per_head_loss, predict,
                              save_checkpoint, text_targets)


def micro(seed=0, k=3, v=4, t=3, fv=2, n=3, b=5, variant="fused", beta=DEFAULT_BETA):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_classes=k, v_dim=v, t_dim=t, fused_v_dim=fv, seed=seed, variant=variant, beta=beta)
    counts = rng.integers(1, n + 1, size=b)
    counts[-1] = 0
    mask = np.arange(n)[None, :] < counts[:, None]
    text = rng.normal(size=(b, t, n)) * mask[:, None, :]
    return ModelParams.init(cfg), Batch(rng.normal(size=(b, v)) + 1, text, mask, rng.integers(0, k, size=b))


def test_config_defaults():
    cfg = ModelConfig(num_classes=5)
    assert cfg.fused_dim == 812 and cfg.beta == (1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=5, variant="bogus")
    with pytest.raises(ValueError):
        ModelConfig(num_classes=5, beta=(0.0, 1.0, 1.0))


def test_forward_shapes_default_dims():
    rng = np.random.default_rng(0)
    params = ModelParams.init(ModelConfig(num_classes=4))
    mask = np.array([[True, True, False], [True, False, False]])
    batch = Batch(rng.normal(size=(2, 1024)), rng.normal(size=(2, 300, 3)) * mask[:, None], mask, np.array([0, 3]))
    out = forward(params, batch)
    assert out.fused.shape == (2, 812)
    assert out.logits_fused.shape == (2, 4) and out.logits_visual.shape == (2, 4) and out.logits_text.shape == (2, 5)
    assert extract_retrieval_feature(params, batch).shape == (2, 812)
    with pytest.raises(ValueError):
        forward(params, batch.take([0]), "train")


def test_no_text_sample():
    params, batch = micro()
    out = forward(params, batch, "infer")
    assert not out.attended[-1].any() and not out.weights[-1].any()
    bn0 = (0 - params.bn_text.running_mean) / np.sqrt(params.bn_text.running_var + 1e-5) * params.bn_text.gamma \
        + params.bn_text.beta
    np.testing.assert_allclose(out.fused[-1, 2:], bn0)
    np.testing.assert_array_equal(out.logits_text[-1], params.text_b)
    assert text_targets(batch, 3)[-1] == 3
    np.testing.assert_array_equal(text_targets(batch, 3)[:-1], batch.labels[:-1])
    feat = extract_retrieval_feature(params, batch)
    np.testing.assert_allclose(feat[-1, 2:], bn0)


def test_forward_matches_hand_evaluation():
    # K=3, v=2, t=2, fused_v=1, one sample, infer mode; every step spelled out with scalars
    params = ModelParams.init(ModelConfig(num_classes=3, v_dim=2, t_dim=2, fused_v_dim=1))
    params.attention.U[...] = [[0.5, -1.0], [0.25, 2.0]]
    params.proj_W[...] = [[1.5, -0.5]]
    params.bn_visual.gamma[...] = [2.0]
    params.bn_visual.beta[...] = [0.1]
    params.bn_visual.running_mean[...] = [0.2]
    params.bn_visual.running_var[...] = [4.0]
    params.bn_text.gamma[...] = [1.0, 0.5]
    params.bn_text.beta[...] = [0.0, -0.3]
    params.bn_text.running_mean[...] = [0.1, -0.1]
    params.bn_text.running_var[...] = [1.0, 0.25]
    params.fused_W[...] = [[1, 0, 0.5], [0, 1, -1], [0.2, 0.3, 0.4]]
    params.fused_b[...] = [0.0, 0.1, -0.1]
    params.visual_W[...] = [[1, 2], [3, 4], [-1, 0]]
    params.visual_b[...] = [0.5, 0.0, 0.0]
    params.text_W[...] = [[1, 0], [0, 1], [1, 1], [-1, -1]]
    params.text_b[...] = [0, 0, 0, 0.25]
    fv = [1.0, 2.0]
    words = [[1.0, 0.0], [0.0, 1.0]]
    batch = Batch(np.array([fv]), np.array([np.array(words).T]), np.array([[True, True]]), np.array([1]))

    q = [fv[0] * 0.5 + fv[1] * 0.25, fv[0] * -1.0 + fv[1] * 2.0]
    z = [q[0] * w[0] + q[1] * w[1] for w in words]
    e = [math.exp(zi - max(z)) for zi in z]
    a = [ei / sum(e) for ei in e]
    fa = [a[0] * words[0][j] + a[1] * words[1][j] for j in range(2)]
    proj = 1.5 * fv[0] - 0.5 * fv[1]
    bv = 2.0 * (proj - 0.2) / math.sqrt(4.0 + 1e-5) + 0.1
    bt = [1.0 * (fa[0] - 0.1) / math.sqrt(1.0 + 1e-5) + 0.0, 0.5 * (fa[1] + 0.1) / math.sqrt(0.25 + 1e-5) - 0.3]
    fc = [bv] + bt
    l1 = [sum(w * x for w, x in zip(row, fc)) + b for row, b in zip([[1, 0, 0.5], [0, 1, -1], [0.2, 0.3, 0.4]],
                                                                      [0.0, 0.1, -0.1])]
    l2 = [row[0] * fv[0] + row[1] * fv[1] + b for row, b in zip([[1, 2], [3, 4], [-1, 0]], [0.5, 0, 0])]
    l3 = [row[0] * fa[0] + row[1] * fa[1] + b for row, b in zip([[1, 0], [0, 1], [1, 1], [-1, -1]], [0, 0, 0, 0.25])]

    out = forward(params, batch, "infer")
    np.testing.assert_allclose(out.weights[0], a, rtol=1e-13)
    np.testing.assert_allclose(out.fused[0], fc, rtol=1e-13)
    np.testing.assert_allclose(out.logits_fused[0], l1, rtol=1e-13)
    np.testing.assert_allclose(out.logits_visual[0], l2, rtol=1e-13)
    np.testing.assert_allclose(out.logits_text[0], l3, rtol=1e-13)


def test_per_head_loss():
    assert per_head_loss([0.3, 0.3], 1) == pytest.approx(math.log(2), rel=1e-15)
    assert per_head_loss([20.0, 0.0, 0.0], 0) < 1e-3
    with pytest.raises(IndexError):
        per_head_loss([0.0, 0.0], 2)


def test_beta_reductions():
    params, batch = micro(1)
    res = combined_loss(params.copy(), batch, beta=(1, 0, 0))
    assert res.total == res.head_losses[0]
    # zero weights give uniform logits everywhere: every head loss is ln K
    params = ModelParams.init(ModelConfig(num_classes=2, v_dim=3, t_dim=2, fused_v_dim=2))
    for name, t in params.tensors().items():
        if name.startswith("head_"):
            t[...] = 0
    rng = np.random.default_rng(0)
    mask = np.ones((4, 1), dtype=bool)
    batch = Batch(rng.normal(size=(4, 3)), rng.normal(size=(4, 2, 1)), mask, np.array([0, 1, 0, 1]))
    res = combined_loss(params, batch)
    assert res.head_losses[0] == res.head_losses[1] == pytest.approx(math.log(2))
    # head 3 has K+1 outputs; a huge negative bias removes the no-text slot
    params.text_b[2] = -800.0
    res = combined_loss(params, batch)
    assert all(h == pytest.approx(math.log(2), rel=1e-12) for h in res.head_losses)
    assert res.total == pytest.approx(2 * math.log(2), abs=1e-6)
    assert round(res.total, 6) == 1.386294


def test_head_isolation():
    params, batch = micro(2)
    res = combined_loss(params, batch, beta=(1, 0, 0))
    assert not res.grads["head_visual.W"].any() and not res.grads["head_text.W"].any()
    res = combined_loss(params, batch, beta=(1, 1, 0))
    assert res.grads["head_visual.W"].any() and not res.grads["head_text.b"].any()


@pytest.mark.parametrize("variant", ["fused", "average_pool", "visual_only", "text_only"])
def test_gradients_match_finite_differences(variant):
    params, batch = micro(3, b=6, variant=variant)
    for name, t in params.tensors().items():
        if name.endswith(".b") or name.startswith("bn_"):
            t += np.random.default_rng(9).normal(scale=0.3, size=t.shape)
    err, name, idx = gradient_report(params, batch, 1e-5)
    assert err < 1e-4, (name, idx)
    err, _, _ = gradient_report(params, batch, 1e-5, corrupt=True)
    assert err > 1e-2


def test_gradient_step_descends():
    for seed in range(20):
        params, batch = micro(seed, b=6)
        res = combined_loss(params, batch, update_stats=False)
        for name, t in params.tensors().items():
            t -= 1e-4 * res.grads[name]
        assert combined_loss(params, batch, update_stats=False).total < res.total


def test_predict_tie_break_and_scores():
    params, batch = micro(4)
    params.fused_W[...] = 0
    params.fused_b[...] = 0
    classes, scores = predict(params, batch)
    assert (classes == 0).all()
    np.testing.assert_allclose(scores.sum(axis=1), 1, atol=1e-12)
    params.fused_b[...] = [0, 50, 0]
    assert (predict(params, batch)[0] == 1).all()
    params.fused_b[...] = [0, 50, 50]
    assert (predict(params, batch)[0] == 1).all()


def test_predict_uses_variant_head():
    params, batch = micro(5, variant="visual_only")
    params.visual_W[...] = 0
    params.visual_b[...] = [0, 0, 9]
    assert (predict(params, batch)[0] == 2).all()
    params, batch = micro(5, variant="text_only")
    params.text_W[...] = 0
    params.text_b[...] = [0, 1, 0, 99]  # the no-text slot is ignored
    assert (predict(params, batch)[0] == 1).all()


def test_retrieval_feature_is_deterministic():
    params, batch = micro(6)
    a = extract_retrieval_feature(params, batch)
    b = extract_retrieval_feature(params, batch)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(a, forward(params, batch, "infer").fused)


def test_decay_exemption_names():
    names = ModelParams.init(ModelConfig(num_classes=2, v_dim=2, t_dim=2, fused_v_dim=2)).tensors()
    exempt = {n for n in names if is_decay_exempt(n)}
    assert exempt == {"bn_visual.gamma", "bn_visual.beta", "bn_text.gamma", "bn_text.beta",
                      "head_fused.b", "head_visual.b", "head_text.b"}


def test_checkpoint_round_trip(tmp_path):
    params, batch = micro(7)
    combined_loss(params, batch)  # moves running stats
    params.config.n_max = 3
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    for (n1, a), (n2, b) in zip(list(params.tensors().items()) + list(params.buffers().items()),
                                list(loaded.tensors().items()) + list(loaded.buffers().items())):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
