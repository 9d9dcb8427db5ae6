"""Training policy: loss branches, schedules, optimizers, replicas,
the training loop, and checkpointing."""

import math
import os

import numpy as np
import pytest

from microdenoise.autodiff import Tensor, backward
from microdenoise.data import ImagePair
from microdenoise.errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ShapeMismatchError,
)
from microdenoise.formats import load_container, save_container
from microdenoise.network import NetworkConfig, build_network
from microdenoise.train import (
    PAPER_LOW_DOSE_SCHEDULE,
    VAL_EVERY,
    LossConfig,
    OptimizerConfig,
    TrainState,
    adam_step,
    load_checkpoint,
    load_operator,
    loss,
    lr_at,
    parse_schedule,
    reported_loss,
    rmsprop_step,
    save_checkpoint,
    save_identity_checkpoint,
    scaled_huber,
    serialize_schedule,
    sync_replica_step,
    train,
    validate_schedule,
)

TINY = NetworkConfig(input_size=16, width_multiplier=0.0625, middle_repeats=1)


def tiny_net(seed=42):
    return build_network(TINY, seed=seed)


def synthetic_pairs(count, seed=0, size=16):
    """Fixed list of smooth noisy/clean pairs sized for the tiny network."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        base = rng.random((size, size)).astype(np.float32)
        clean = (base + np.roll(base, 1, axis=0) + np.roll(base, 1, axis=1)) / 3.0
        noisy = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
        pairs.append(ImagePair(noisy.astype(np.float32), clean.astype(np.float32),
                               50.0, (0, 0), 0))
    return pairs


def test_schedule_validation():
    with pytest.raises(ConfigError):
        validate_schedule(())
    with pytest.raises(ConfigError):
        validate_schedule(((10, -1.0),))
    with pytest.raises(ConfigError):
        validate_schedule(((10, 1e-3), (10, 1e-4)))
    with pytest.raises(ConfigError):
        validate_schedule(((None, 1e-3), (10, 1e-4)))


def test_lr_boundaries_are_exclusive():
    s = PAPER_LOW_DOSE_SCHEDULE
    assert lr_at(s, 0) == 1.0e-3
    assert lr_at(s, 134107) == 1.0e-3
    assert lr_at(s, 134108) == 2.5e-4
    assert lr_at(s, 151820) == 2.5e-4
    assert lr_at(s, 151821) == 1.0e-4
    assert lr_at(s, 10 ** 9) == 1.0e-4


def test_schedule_serialization_round_trip():
    text = serialize_schedule(PAPER_LOW_DOSE_SCHEDULE)
    assert text == "134108:0.001,151821:0.00025,:0.0001"
    assert parse_schedule(text) == PAPER_LOW_DOSE_SCHEDULE
    assert parse_schedule(":0.001") == ((None, 1e-3),)


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(mse_scale=0.0)
    with pytest.raises(ConfigError):
        LossConfig(ssim_weight=-1.0)
    with pytest.raises(ConfigError):
        LossConfig(l2_scope="biases")
    with pytest.raises(ConfigError):
        OptimizerConfig(kind="sgd")
    with pytest.raises(ConfigError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(bn_freeze_batch=-1)


def test_loss_branch_oracles():
    cfg = LossConfig(l2_rate=0.0)
    assert scaled_huber(1e-3, cfg) == 1.0     # s = t exactly: linear branch
    assert scaled_huber(4e-3, cfg) == 2.0     # sqrt(1 * 4)
    assert scaled_huber(5e-4, cfg) == 0.5
    # tensor path hits the same numbers: constant diff d gives MSE = d^2
    for mse_val, expect in ((1e-3, 1.0), (4e-3, 2.0)):
        d = math.sqrt(mse_val)
        out = Tensor(np.full((8, 8), d, dtype=np.float32))
        tgt = np.zeros((8, 8), dtype=np.float32)
        assert abs(loss(out, tgt, cfg).item() - expect) < 1e-5


def test_loss_branches_meet_continuously():
    cfg = LossConfig(l2_rate=0.0)
    lo = scaled_huber(1e-3 * (1 - 1e-6), cfg)
    hi = scaled_huber(1e-3 * (1 + 1e-6), cfg)
    assert abs(hi - lo) < 1e-5
    assert lo <= 1.0 <= hi


def test_loss_monotone_in_mse():
    cfg = LossConfig(l2_rate=0.0)
    values = [scaled_huber(m, cfg) for m in np.linspace(1e-6, 1e-2, 100)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_loss_gradients_match_closed_forms():
    # linear branch: grad = 2 * scale * diff / N
    # sqrt branch: grad = t * scale * diff / (N * sqrt(t * s))
    rng = np.random.default_rng(0)
    tgt = rng.random((6, 6)).astype(np.float32)
    cfg = LossConfig(l2_rate=0.0)
    for spread, branch in ((0.004, "linear"), (0.07, "sqrt")):
        x = np.clip(tgt + rng.normal(0, spread, tgt.shape), 0, 1).astype(np.float32)
        out = Tensor(x, requires_grad=True)
        lv = loss(out, tgt, cfg)
        backward(lv)
        diff = x.astype(np.float64) - tgt.astype(np.float64)
        s = cfg.mse_scale * (diff ** 2).mean()
        if branch == "linear":
            assert s <= cfg.huber_threshold
            expect = 2.0 * cfg.mse_scale * diff / diff.size
        else:
            assert s > cfg.huber_threshold
            expect = (cfg.huber_threshold * cfg.mse_scale * diff
                      / (diff.size * math.sqrt(cfg.huber_threshold * s)))
        assert np.allclose(out.grad, expect, rtol=1e-4, atol=1e-9), branch


def test_loss_ssim_term():
    rng = np.random.default_rng(1)
    tgt = rng.random((1, 1, 16, 16)).astype(np.float32)
    x = np.clip(tgt + rng.normal(0, 0.05, tgt.shape), 0, 1).astype(np.float32)
    base_cfg = LossConfig(l2_rate=0.0)
    ssim_cfg = LossConfig(l2_rate=0.0, ssim_weight=0.4)
    from microdenoise.metrics import tensor_ssim
    base = loss(Tensor(x), tgt, base_cfg).item()
    with_sim = loss(Tensor(x), tgt, ssim_cfg).item()
    sim = tensor_ssim(Tensor(x), Tensor(tgt)).item()
    assert abs(with_sim - (base + 0.4 * (1.0 - sim))) < 1e-5


def test_loss_l2_scopes():
    net = tiny_net()
    trainables = net.store.trainables()
    rng = np.random.default_rng(2)
    tgt = rng.random((16, 16)).astype(np.float32)
    x = np.clip(tgt + 0.01, 0, 1).astype(np.float32)
    bare = loss(Tensor(x), tgt, LossConfig(l2_rate=0.0), trainables).item()
    for scope in ("all", "weights"):
        cfg = LossConfig(l2_rate=1e-4, l2_scope=scope)
        got = loss(Tensor(x), tgt, cfg, trainables).item()
        if scope == "all":
            names = sorted(trainables)
        else:
            names = [n for n in trainables
                     if n.endswith((".w", ".dw", ".gamma"))]
        direct = sum(float((trainables[n].data.astype(np.float64) ** 2).sum())
                     for n in names)
        assert abs(got - (bare + 1e-4 * direct)) < 1e-4 * direct * 1e-3 + 1e-6
    # the scopes genuinely differ: betas and the output bias drop out
    all_names = set(sorted(trainables))
    weight_names = {n for n in trainables if n.endswith((".w", ".dw", ".gamma"))}
    assert weight_names < all_names


def test_reported_loss_clips_and_skips_l2():
    tgt = np.zeros((8, 8))
    out = np.full((8, 8), 1.5)  # clips to 1.0 -> s = 1000 -> sqrt branch
    cfg = LossConfig(l2_rate=1.0)  # must not contribute
    assert reported_loss(out, tgt, cfg) == pytest.approx(math.sqrt(1000.0))


def test_adam_step_matches_hand_rollout():
    rng = np.random.default_rng(3)
    p0 = rng.standard_normal(5).astype(np.float32)
    g = rng.standard_normal(5).astype(np.float32)
    p = Tensor(p0.copy(), requires_grad=True)
    p.grad = g.astype(np.float64)
    trainables = {"w": p}
    cfg = OptimizerConfig(beta1=0.5, beta2=0.999, eps=1e-8)
    state = TrainState(0, {"w": np.zeros(5)}, {"w": np.zeros(5)})
    # independent numpy rollout of the published update rule
    m = np.zeros(5); v = np.zeros(5); ref = p0.astype(np.float64).copy()
    for t in range(1, 4):
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.5 ** t)
        vhat = v / (1 - 0.999 ** t)
        ref -= 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
        adam_step(trainables, state, cfg, 1e-3)
        state.step += 1
        assert np.allclose(p.data, ref, atol=1e-6), t
    # constant gradient: every bias-corrected step is -lr * g / (|g| + eps)
    expect_delta = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data - p0, 3 * expect_delta, atol=1e-5)


def test_rmsprop_step_matches_hand_rollout():
    g = np.array([0.5, -2.0], dtype=np.float32)
    p = Tensor(np.array([1.0, 1.0], dtype=np.float32), requires_grad=True)
    p.grad = g.astype(np.float64)
    state = TrainState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)})
    cfg = OptimizerConfig(kind="rmsprop", rho=0.9, eps=1e-8)
    rmsprop_step({"w": p}, state, cfg, 0.01)
    v = 0.1 * g.astype(np.float64) ** 2
    expect = 1.0 - 0.01 * g / (np.sqrt(v) + 1e-8)
    assert np.allclose(p.data, expect, atol=1e-6)


def test_zero_gradient_moves_nothing():
    net = tiny_net()
    trainables = net.store.trainables()
    before = {n: t.data.copy() for n, t in trainables.items()}
    state = TrainState.fresh(net)
    adam_step(trainables, state, OptimizerConfig(), 1e-3)
    for n, t in trainables.items():
        assert np.array_equal(t.data, before[n]), n


def test_replica_step_matches_manual_single_step():
    pairs = synthetic_pairs(2, seed=5)
    noisy = np.stack([p.noisy for p in pairs])[:, None]
    target = np.stack([p.ground_truth for p in pairs])[:, None]
    loss_cfg = LossConfig(l2_rate=0.0)
    opt_cfg = OptimizerConfig(schedule=((None, 1e-3),))

    net_a = tiny_net(seed=7)
    state_a = TrainState.fresh(net_a)
    val_a, out_a = sync_replica_step(net_a, noisy, target, state_a,
                                     loss_cfg, opt_cfg, mode="frozen")

    net_b = tiny_net(seed=7)
    trainables = net_b.store.trainables()
    from microdenoise.autodiff import zero_grads
    zero_grads(trainables.values())
    out = net_b.forward(noisy, mode="frozen")
    lv = loss(out, target, loss_cfg, trainables)
    backward(lv)
    state_b = TrainState.fresh(net_b)
    adam_step(trainables, state_b, opt_cfg, 1e-3)

    assert val_a == pytest.approx(lv.item(), abs=1e-9)
    assert np.array_equal(out_a, out.data)
    for n, t in net_a.store.trainables().items():
        assert np.array_equal(t.data, trainables[n].data), n
    assert state_a.step == 1


def test_two_replicas_match_one_within_tolerance():
    pairs = synthetic_pairs(4, seed=9)
    noisy = np.stack([p.noisy for p in pairs])[:, None]
    target = np.stack([p.ground_truth for p in pairs])[:, None]
    loss_cfg = LossConfig()
    opt_cfg = OptimizerConfig()
    results = {}
    for reps in (1, 2):
        net = tiny_net(seed=11)
        before = {n: t.data.copy() for n, t in net.store.trainables().items()}
        sync_replica_step(net, noisy, target, TrainState.fresh(net),
                          loss_cfg, opt_cfg, mode="frozen", replicas=reps)
        results[reps] = {n: t.data - before[n]
                         for n, t in net.store.trainables().items()}
    # per-parameter relative disagreement of the update vectors; elementwise
    # ratios would divide by near-zero deltas and only measure f32 quantization
    worst = 0.0
    for n in results[1]:
        d1 = results[1][n].astype(np.float64)
        d2 = results[2][n].astype(np.float64)
        norm = np.linalg.norm(d1)
        if norm > 0:
            worst = max(worst, float(np.linalg.norm(d1 - d2) / norm))
    assert worst < 1e-5


def test_replica_validation():
    pairs = synthetic_pairs(2)
    noisy = np.stack([p.noisy for p in pairs])[:, None]
    target = np.stack([p.ground_truth for p in pairs])[:, None]
    net = tiny_net()
    state = TrainState.fresh(net)
    with pytest.raises(ConfigError):
        sync_replica_step(net, noisy, target, state, LossConfig(),
                          OptimizerConfig(), replicas=3)
    with pytest.raises(ConfigError):
        sync_replica_step(net, noisy, target, state, LossConfig(),
                          OptimizerConfig(), replicas=0)
    with pytest.raises(ShapeMismatchError):
        sync_replica_step(net, noisy, target[:1], state, LossConfig(),
                          OptimizerConfig())


def test_train_loop_rows_cadence_and_schedule(tmp_path):
    net = tiny_net()
    opt = OptimizerConfig(schedule=((2, 1e-2), (None, 1e-3)), bn_freeze_batch=3)
    log = tmp_path / "curve.csv"
    rows, best = train(net, synthetic_pairs(40), synthetic_pairs(4, seed=77),
                       LossConfig(l2_rate=0.0), opt, batches=10,
                       batch_size=2, log_path=log)
    assert [r[0] for r in rows] == list(range(1, 11))
    # validation every VAL_EVERY batches, literally rows 5 and 10
    with_val = [r[0] for r in rows if r[2] is not None]
    assert with_val == [VAL_EVERY, 2 * VAL_EVERY]
    assert best == min(r[2] for r in rows if r[2] is not None)
    # lr column follows the stepped schedule (boundary exclusive at step 2)
    assert [r[3] for r in rows[:2]] == [1e-2, 1e-2]
    assert all(r[3] == 1e-3 for r in rows[2:])
    # bn freezes at batch 3: steps 0..2 train, later ones run frozen
    assert [r[4] for r in rows[:3]] == ["training"] * 3
    assert all(r[4] == "frozen" for r in rows[3:])
    # the CSV mirrors the rows exactly
    lines = log.read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss,lr,bn_mode"
    assert len(lines) == 11
    first = lines[1].split(",")
    assert first[0] == "1" and float(first[1]) == rows[0][1]
    assert lines[5].split(",")[2] == repr(float(rows[4][2]))


def test_train_checkpoint_files(tmp_path):
    net = tiny_net()
    ckdir = tmp_path / "ck"
    train(net, synthetic_pairs(10), synthetic_pairs(2, seed=3),
          LossConfig(), OptimizerConfig(), batches=5, batch_size=1,
          checkpoint_dir=ckdir, checkpoint_interval=2)
    names = sorted(os.listdir(ckdir))
    assert names == ["ckpt_00000002.mdtc", "ckpt_00000004.mdtc",
                     "ckpt_00000005.mdtc"]


def test_train_nan_dumps_diagnostic(tmp_path):
    net = tiny_net()
    bad = ImagePair(np.full((16, 16), np.nan, dtype=np.float32),
                    np.zeros((16, 16), dtype=np.float32), 1.0, (0, 0), 0)
    ckdir = tmp_path / "ck"
    with pytest.raises(NumericError, match="non-finite"):
        train(net, [bad], synthetic_pairs(1), LossConfig(), OptimizerConfig(),
              batches=1, checkpoint_dir=ckdir)
    assert (ckdir / "diagnostic_nan.mdtc").exists()


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net(seed=1)
    state = TrainState.fresh(net)
    # give the moments nonzero content first
    pairs = synthetic_pairs(2, seed=8)
    noisy = np.stack([p.noisy for p in pairs])[:, None]
    target = np.stack([p.ground_truth for p in pairs])[:, None]
    sync_replica_step(net, noisy, target, state, LossConfig(), OptimizerConfig())
    path = tmp_path / "ck.mdtc"
    save_checkpoint(path, net, state, LossConfig(), OptimizerConfig(),
                    bn_mode="frozen")

    other = tiny_net(seed=99)  # different init, fully overwritten by the load
    restored = load_checkpoint(path, other)
    assert restored.step == state.step
    for name, arr in net.store.state_arrays().items():
        assert np.array_equal(other.store.state_arrays()[name], arr), name
    for name in state.m:
        assert np.array_equal(restored.m[name], state.m[name])
        assert np.array_equal(restored.v[name], state.v[name])
    # bytes are reproducible
    path2 = tmp_path / "ck2.mdtc"
    save_checkpoint(path2, net, state, LossConfig(), OptimizerConfig(),
                    bn_mode="frozen")
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejections(tmp_path):
    net = tiny_net()
    state = TrainState.fresh(net)
    path = tmp_path / "ck.mdtc"
    save_checkpoint(path, net, state)

    wrong = build_network(NetworkConfig(input_size=16, width_multiplier=0.0625,
                                        middle_repeats=2), seed=0)
    with pytest.raises(CheckpointError, match="cannot load"):
        load_checkpoint(path, wrong)

    ident = tmp_path / "id.mdtc"
    save_identity_checkpoint(ident)
    with pytest.raises(CheckpointError, match="not a network checkpoint"):
        load_checkpoint(ident, net)

    arrays, man = load_container(path)
    victim = next(k for k in arrays if k.startswith("opt.m."))
    del arrays[victim]
    broken = tmp_path / "broken.mdtc"
    save_container(broken, arrays, man)
    with pytest.raises(CheckpointError, match="missing first moment"):
        load_checkpoint(broken, tiny_net())


def test_resume_reproduces_the_straight_run(tmp_path):
    train_pairs = synthetic_pairs(20, seed=13)
    val_pairs = synthetic_pairs(4, seed=14)
    loss_cfg = LossConfig()
    opt_cfg = OptimizerConfig()

    straight = tiny_net(seed=21)
    rows_all, _ = train(straight, train_pairs, val_pairs, loss_cfg, opt_cfg,
                        batches=5, batch_size=2)

    first = tiny_net(seed=21)
    ckdir = tmp_path / "ck"
    train(first, train_pairs, val_pairs, loss_cfg, opt_cfg,
          batches=3, batch_size=2, checkpoint_dir=ckdir, checkpoint_interval=100)
    resumed = tiny_net(seed=0)  # init is irrelevant once loaded
    load_checkpoint(ckdir / "ckpt_00000003.mdtc", resumed)
    rows_tail, _ = train(resumed, train_pairs, val_pairs, loss_cfg, opt_cfg,
                         batches=2, batch_size=2)
    assert [r[0] for r in rows_tail] == [4, 5]
    for got, want in zip(rows_tail, rows_all[3:]):
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1], abs=1e-6)


def test_train_rejects_bad_arguments():
    net = tiny_net()
    with pytest.raises(ConfigError):
        train(net, synthetic_pairs(1), synthetic_pairs(1), LossConfig(),
              OptimizerConfig(), batches=0)
    with pytest.raises(ConfigError):
        train(net, [], synthetic_pairs(1), LossConfig(), OptimizerConfig(),
              batches=1)
    with pytest.raises(ConfigError):
        train(net, synthetic_pairs(1), synthetic_pairs(1), LossConfig(),
              OptimizerConfig(), batches=1, checkpoint_interval=0)


def test_identity_operator(tmp_path):
    path = tmp_path / "id.mdtc"
    save_identity_checkpoint(path)
    op, size = load_operator(path)
    assert size is None
    batch = np.random.default_rng(0).random((2, 1, 20, 30)).astype(np.float32)
    assert np.array_equal(op(batch), batch)


def test_network_operator_matches_inference(tmp_path):
    net = tiny_net(seed=33)
    path = tmp_path / "net.mdtc"
    save_checkpoint(path, net, TrainState.fresh(net))
    op, size = load_operator(path)
    assert size == 16
    batch = np.random.default_rng(1).random((1, 1, 16, 16)).astype(np.float32)
    want = net.forward(batch, mode="inference", clip=True).data
    assert np.array_equal(op(batch), want)
