import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dapnet.engine import Parameter, mul, tsum
from dapnet.model import ModelConfig
from dapnet.pipeline import block_partition, normalize_block
from dapnet.synth import SceneSpec, generate
from dapnet.train import (
    OptimState,
    Schedule,
    adam_step,
    poly_lr,
    read_log,
    train_loop,
)
from dapnet.engine import checkpoint

# --- schedule ---------------------------------------------------------------


def test_poly_lr_endpoints_are_exact():
    s = Schedule(1e-3, 1e-5, 1000)
    assert poly_lr(s, 0) == 0.001
    assert poly_lr(s, 1000) == 1e-5


def test_poly_lr_midpoint():
    s = Schedule(0.001, 1e-5, 400)
    want = 0.00099 * math.pow(0.5, 0.7) + 0.00001
    assert math.isclose(poly_lr(s, 200), want, rel_tol=1e-14)


def test_poly_lr_rejects_out_of_range():
    s = Schedule(1e-3, 1e-5, 10)
    for bad in (-1, 11):
        with pytest.raises(ValueError):
            poly_lr(s, bad)
    with pytest.raises(ValueError):
        Schedule(1e-5, 1e-3, 10)
    with pytest.raises(ValueError):
        Schedule(1e-3, 1e-5, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10**6), st.floats(1e-6, 1.0), st.floats(1.01, 1e4))
def test_poly_lr_monotone_and_bounded(iters, lr_final, ratio):
    s = Schedule(lr_final * ratio, lr_final, iters)
    i = np.sort(np.random.default_rng(iters).uniform(0, iters, 200))
    lr = np.array([poly_lr(s, v) for v in i])
    assert np.all(np.diff(lr) <= 0)
    assert np.all((lr >= s.lr_final) & (lr <= s.lr_initial))


# --- adam -------------------------------------------------------------------


def test_zero_gradient_only_decays_weights():
    w = Parameter(np.array([2.0, -4.0]), "w")
    opt = OptimState()
    adam_step([w], opt, lr=0.1, grads=[np.zeros(2)])
    assert opt.step == 1
    # L2 decay contributes g = wd * w; Adam's first step then moves by lr * sign
    assert np.allclose(w.data, [2.0 - 0.1, -4.0 + 0.1], atol=1e-6)
    no_decay = Parameter(np.array([2.0, -4.0]), "v")
    adam_step([no_decay], OptimState(weight_decay=0.0), lr=0.1, grads=[np.zeros(2)])
    assert np.array_equal(no_decay.data, [2.0, -4.0])


def test_constant_gradient_steps_approach_lr():
    w = Parameter(np.zeros(3), "w")
    opt = OptimState(weight_decay=0.0)
    lr = 1e-3
    for _ in range(2000):
        before = w.data.copy()
        adam_step([w], opt, lr, grads=[np.array([0.5, -2.0, 1e-3])])
    assert np.allclose(np.abs(w.data - before), lr, rtol=1e-4)


def test_one_step_descends_on_a_parabola():
    w = Parameter(np.array([1.0]), "w")
    loss = tsum(mul(w, w))
    loss.backward()
    adam_step([w], OptimState(), lr=0.01)
    assert w.data[0] ** 2 < 1.0


def test_non_finite_gradient_names_the_parameter():
    a, b = Parameter(np.zeros(2), "layer.a"), Parameter(np.zeros(2), "layer.b")
    opt = OptimState()
    with pytest.raises(FloatingPointError, match="layer.b"):
        adam_step([a, b], opt, 0.1, grads=[np.zeros(2), np.array([0.0, np.nan])])
    assert opt.step == 0 and not opt.m


def test_moments_match_parameter_shapes():
    ps = [Parameter(np.ones((2, 3)), "a"), Parameter(np.ones(4), "b")]
    opt = OptimState()
    adam_step(ps, opt, 0.01, grads=[np.ones((2, 3)), np.ones(4)])
    assert opt.m["a"].shape == (2, 3) and opt.v["b"].shape == (4,)


# --- loop ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_blocks():
    cloud = generate(SceneSpec(extent=16.0, classes=("ground", "roof", "tree"), density=1.0, seed=3))
    assert set(cloud.labels.tolist()) == {0, 1, 2}
    return [normalize_block(cloud, b) for b in block_partition(cloud, 8.0, 4.0, 20)]


def test_zero_epochs_returns_initial_model(tmp_path, micro_blocks):
    res = train_loop(micro_blocks, ModelConfig.micro(), epochs=0, batch_size=2, seed=1,
                     sample_size=16, run_dir=tmp_path)
    assert res.log == [] and read_log(tmp_path / "log.csv") == []
    header, state = checkpoint.load(tmp_path / "last.ckpt")
    fresh = type(res.model)(ModelConfig.micro(), seed=1).state_dict()
    assert all(np.array_equal(state[k], fresh[k]) for k in fresh)


def test_training_is_bitwise_reproducible(tmp_path, micro_blocks):
    runs = []
    for k in range(2):
        train_loop(micro_blocks, ModelConfig.micro(), epochs=3, batch_size=2, seed=4, sample_size=16,
                   run_dir=tmp_path / str(k))
        runs.append(((tmp_path / str(k) / "log.csv").read_bytes(),
                     (tmp_path / str(k) / "last.ckpt").read_bytes()))
    assert runs[0] == runs[1]
    log = read_log(tmp_path / "0" / "log.csv")
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert all(0 <= r["train_oa"] <= 1 for r in log)


def test_schedule_runs_to_the_final_rate(micro_blocks):
    res = train_loop(micro_blocks, ModelConfig.micro(), epochs=2, batch_size=3, seed=0, sample_size=16)
    per_epoch = math.ceil(len(micro_blocks) / 3)
    sched = Schedule(1e-3, 1e-5, 2 * per_epoch)
    assert res.optim.step == 2 * per_epoch
    assert res.log[-1]["lr"] == poly_lr(sched, 2 * per_epoch - 1)


def test_loop_rejects_bad_input(micro_blocks):
    with pytest.raises(ValueError):
        train_loop([], ModelConfig.micro())
    with pytest.raises(ValueError, match="classes"):
        train_loop(micro_blocks, ModelConfig.micro(num_classes=2), epochs=1)


def test_repeated_batch_loss_decreases_in_most_trials(micro_blocks):
    from dapnet.model import DAPNet
    from dapnet.pipeline import sample_fixed
    from dapnet.train import _batch_loss

    decreased = 0
    trials = 10
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        net = DAPNet(ModelConfig.micro(), seed=seed)
        samples = [sample_fixed(b, 16, rng) for b in micro_blocks[:2]]
        feats = np.stack([s.features for s in samples])
        labels = np.stack([s.labels for s in samples])
        opt, losses = OptimState(), []
        for _ in range(21):
            net.zero_grad()
            loss, _ = _batch_loss(net, feats, labels)
            loss.backward()
            losses.append(loss.item())
            adam_step(net.parameters(), opt, 1e-2)
        decreased += losses[-1] <= losses[0]
    assert decreased >= 0.9 * trials
