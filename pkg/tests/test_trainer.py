import itertools

import numpy as np
import pytest

from textfusion import dataio
from textfusion.embeddings import load_fixture
from textfusion.model import Batch, ModelConfig, ModelParams
from textfusion.trainer import OptimizerState, TrainConfig, history_csv, index_stream, lr_at, sgd_step, train


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.01
    assert lr_at(6999, cfg) == 0.01
    assert lr_at(7000, cfg) == 0.001
    assert lr_at(16999, cfg) == 0.001
    assert lr_at(17000, cfg) == 0.0001
    assert lr_at(27000, cfg) == 0.00001


def test_lr_schedule_monotone():
    cfg = TrainConfig()
    lrs = [lr_at(i, cfg) for i in range(0, 40000, 250)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def tiny_params():
    return ModelParams.init(ModelConfig(num_classes=2, v_dim=3, t_dim=2, fused_v_dim=2))


def test_sgd_step_examples():
    p = tiny_params()
    before = {n: t.copy() for n, t in p.tensors().items()}
    zeros = {n: np.zeros_like(t) for n, t in p.tensors().items()}
    sgd_step(p, zeros, OptimizerState.zeros_like(p), 0.01, TrainConfig(weight_decay=0.0))
    for n, t in p.tensors().items():
        assert t.tobytes() == before[n].tobytes()

    grads = {n: np.full_like(t, 0.5) for n, t in p.tensors().items()}
    sgd_step(p, grads, OptimizerState.zeros_like(p), 0.1, TrainConfig(momentum=0.0, weight_decay=0.0))
    for n, t in p.tensors().items():
        np.testing.assert_array_equal(t, before[n] - 0.1 * 0.5)


def test_two_momentum_steps():
    p = tiny_params()
    start = p.proj_W.copy()
    grads = {n: np.ones_like(t) for n, t in p.tensors().items()}
    state = OptimizerState.zeros_like(p)
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        sgd_step(p, grads, state, 0.01, cfg)
    np.testing.assert_allclose(p.proj_W - start, -0.01 * 1.0 * 2.9, rtol=1e-12)
    assert state.iteration == 2


def test_decay_exemption():
    p = tiny_params()
    p.bn_text.gamma[...] = 3.0
    p.fused_b[...] = 3.0
    w0 = p.proj_W.copy()
    zeros = {n: np.zeros_like(t) for n, t in p.tensors().items()}
    sgd_step(p, zeros, OptimizerState.zeros_like(p), 0.1, TrainConfig(momentum=0.0, weight_decay=0.5))
    assert (p.bn_text.gamma == 3.0).all() and (p.fused_b == 3.0).all()
    np.testing.assert_allclose(p.proj_W, w0 * (1 - 0.05))


def test_sgd_shape_mismatch():
    p = tiny_params()
    grads = {n: np.zeros_like(t) for n, t in p.tensors().items()}
    grads["proj.W"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        sgd_step(p, grads, OptimizerState.zeros_like(p), 0.1, TrainConfig())


def test_index_stream_epochs():
    first = list(itertools.islice(index_stream(7, 3), 21))
    for e in range(3):
        assert sorted(first[7 * e:7 * e + 7]) == list(range(7))
    assert first == list(itertools.islice(index_stream(7, 3), 21))
    with pytest.raises(ValueError):
        next(index_stream(0, 0))


@pytest.fixture(scope="module")
def overfit_data():
    m = dataio.synth_overfit(3, 20, 6, 0)
    table = load_fixture()
    return dataio.encode(m.split("train"), table, dataio.manifest_nmax(m, table))


def cfgs(**kw):
    return ModelConfig(num_classes=3, v_dim=6, t_dim=10, fused_v_dim=4), TrainConfig(batch_size=8, **kw)


def test_zero_lr_step_keeps_initialization(overfit_data):
    mc, tc = cfgs(max_iters=1, base_lr=0.0)
    result = train(mc, tc, overfit_data)
    init = ModelParams.init(mc)
    for (n, a), b in zip(result.params.tensors().items(), init.tensors().values()):
        assert a.tobytes() == b.tobytes(), n
    assert len(result.history) == 1


def test_training_is_deterministic(overfit_data):
    mc, tc = cfgs(max_iters=40, seed=5)
    a = train(mc, tc, overfit_data)
    b = train(mc, tc, overfit_data)
    assert history_csv(a.history) == history_csv(b.history)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    c = train(mc, cfgs(max_iters=40, seed=6)[1], overfit_data)
    assert history_csv(c.history) != history_csv(a.history)


def test_history_csv_layout(overfit_data):
    mc, tc = cfgs(max_iters=5)
    lines = history_csv(train(mc, tc, overfit_data).history).splitlines()
    assert lines[0] == "iteration,lr,L,L1,L2,L3"
    assert len(lines) == 6 and lines[1].startswith("0,0.01,")


def test_empty_dataset_rejected():
    mc, tc = cfgs()
    empty = Batch(np.zeros((0, 6)), np.zeros((0, 10, 1)), np.zeros((0, 1), bool), np.zeros(0, int))
    with pytest.raises(ValueError):
        train(mc, tc, empty)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr_drop_period=0)
