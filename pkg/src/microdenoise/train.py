"""Training policy: scaled Huber loss, ADAM/RMSProp with stepped schedules,
synchronous replica averaging, BN freezing, validation cadence, CSV learning
curves, and checkpointing.

The scalar loss is L = s when s <= t, else sqrt(t*s), where
s = mse_scale * MSE(output, target) and t is the branch threshold; the two
branches meet at s = t and the gradient at the joint comes from the linear
branch. Optional terms add ssim_weight * (1 - SSIM) and
l2_rate * sum(p^2) over learnable parameters.

A synchronous step with R replicas forwards each shard on its own tape and
joins the shard sums into one exact whole-batch loss before the single
backward pass, so the updates match the R=1 step up to floating-point
reassociation even through the nonlinear branch.

Training streams are stateless: batch b draws pair indices
[b*batch_size, (b+1)*batch_size) and validation v draws index v, each from
counter-based generators, so a checkpoint needs only the step counter to
resume exactly. Reported train/val losses are always evaluated on outputs
clipped to [0,1] (the gradient path stays unclipped unless clip_in_loss);
the L2 penalty shapes the gradient but is excluded from reported numbers.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, zero_grads
from .errors import CheckpointError, ConfigError, NumericError, ShapeMismatchError
from .formats import load_container, save_container
from .metrics import mse as _mse_metric
from .metrics import ssim as _ssim_metric
from .metrics import tensor_ssim
from .network import DenoiseNetwork, NetworkConfig, build_network

# stepped schedule used for the low-dose training runs: (until_batch, rate),
# boundaries exclusive, a None boundary extends to the end of training
PAPER_LOW_DOSE_SCHEDULE = ((134108, 1.0e-3), (151821, 2.5e-4), (None, 1.0e-4))


def validate_schedule(schedule) -> tuple:
    sched = tuple((None if u is None else int(u), float(r)) for u, r in schedule)
    if not sched:
        raise ConfigError("schedule is empty")
    prev = -1
    for i, (until, rate) in enumerate(sched):
        if rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {rate}")
        if until is None:
            if i != len(sched) - 1:
                raise ConfigError("only the final schedule segment may be open-ended")
        else:
            if until <= prev:
                raise ConfigError("schedule boundaries must be strictly increasing")
            prev = until
    return sched


def lr_at(schedule, step: int) -> float:
    """Piecewise-constant lookup; boundaries are exclusive (a step equal to
    a segment's until_batch belongs to the next segment); the final rate
    persists beyond the last boundary."""
    sched = validate_schedule(schedule)
    for until, rate in sched:
        if until is None or step < until:
            return rate
    return sched[-1][1]


def serialize_schedule(schedule) -> str:
    return ",".join(f"{'' if u is None else u}:{repr(r)}"
                    for u, r in validate_schedule(schedule))


def parse_schedule(text: str) -> tuple:
    segs = []
    for part in text.split(","):
        until, _, rate = part.partition(":")
        segs.append((None if until == "" else int(until), float(rate)))
    return validate_schedule(segs)


@dataclass(frozen=True)
class LossConfig:
    mse_scale: float = 1000.0
    huber_threshold: float = 1.0
    ssim_weight: float = 0.0
    clip_in_loss: bool = False
    l2_rate: float = 5e-5
    l2_scope: str = "all"  # "all" trainables, or "weights" (kernels + bn gamma)

    def __post_init__(self):
        if self.mse_scale <= 0 or self.huber_threshold <= 0:
            raise ConfigError("mse_scale and huber_threshold must be positive")
        if self.ssim_weight < 0 or self.l2_rate < 0:
            raise ConfigError("ssim_weight and l2_rate must be non-negative")
        if self.l2_scope not in ("all", "weights"):
            raise ConfigError(f"l2_scope must be all or weights, got {self.l2_scope!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.9
    schedule: tuple = ((None, 1.0e-3),)
    bn_freeze_batch: int = None

    def __post_init__(self):
        if self.kind not in ("adam", "rmsprop"):
            raise ConfigError(f"optimizer must be adam or rmsprop, got {self.kind!r}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1 or not 0 < self.rho < 1:
            raise ConfigError("moment decays must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        validate_schedule(self.schedule)
        if self.bn_freeze_batch is not None and self.bn_freeze_batch < 0:
            raise ConfigError("bn_freeze_batch must be non-negative")


@dataclass
class TrainState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, net: DenoiseNetwork) -> "TrainState":
        zeros = {name: np.zeros_like(t.data)
                 for name, t in net.store.trainables().items()}
        return cls(0, zeros, {k: z.copy() for k, z in zeros.items()})


def _l2_names(trainables, scope: str):
    if scope == "all":
        return sorted(trainables)
    return sorted(n for n in trainables
                  if n.endswith(".w") or n.endswith(".dw") or n.endswith(".gamma"))


def scaled_huber(mse_value: float, cfg: LossConfig) -> float:
    """The reported form of the loss branch arithmetic, on plain floats."""
    s = cfg.mse_scale * mse_value
    t = cfg.huber_threshold
    return s if s <= t else math.sqrt(t * s)


def loss(denoised: Tensor, target, cfg: LossConfig = LossConfig(),
         trainables=None) -> Tensor:
    """Differentiable training loss for a single output/target pair."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float32))
    if denoised.data.shape != tgt.data.shape:
        raise ShapeMismatchError(
            f"shape mismatch {denoised.data.shape} vs {tgt.data.shape}")
    out = denoised.clip01() if cfg.clip_in_loss else denoised
    diff = out - tgt
    s = diff.sum_squares() * (cfg.mse_scale / diff.data.size)
    t = cfg.huber_threshold
    base = s if s.item() <= t else (s * t).sqrt()
    if cfg.ssim_weight > 0:
        sim = tensor_ssim(out, tgt)
        base = base + (sim * (-1.0) + 1.0) * cfg.ssim_weight
    if cfg.l2_rate > 0 and trainables:
        penalty = None
        for name in _l2_names(trainables, cfg.l2_scope):
            sq = trainables[name].sum_squares()
            penalty = sq if penalty is None else penalty + sq
        base = base + penalty * cfg.l2_rate
    return base


def reported_loss(outputs, targets, cfg: LossConfig = LossConfig()) -> float:
    """Performance number for logs: loss branch arithmetic on clipped
    outputs, without the L2 penalty."""
    out = np.clip(np.asarray(outputs, dtype=np.float64), 0.0, 1.0)
    tgt = np.asarray(targets, dtype=np.float64)
    value = scaled_huber(_mse_metric(out, tgt), cfg)
    if cfg.ssim_weight > 0:
        imgs = out.reshape(-1, out.shape[-2], out.shape[-1])
        refs = tgt.reshape(-1, tgt.shape[-2], tgt.shape[-1])
        sim = float(np.mean([_ssim_metric(a, b) for a, b in zip(imgs, refs)]))
        value += cfg.ssim_weight * (1.0 - sim)
    return value


def adam_step(trainables, state: TrainState, cfg: OptimizerConfig, lr: float):
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in trainables.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(np.float32)


def rmsprop_step(trainables, state: TrainState, cfg: OptimizerConfig, lr: float):
    for name, p in trainables.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.v[name]
        v *= cfg.rho
        v += (1.0 - cfg.rho) * g * g
        p.data -= (lr * g / (np.sqrt(v) + cfg.eps)).astype(np.float32)


def sync_replica_step(net: DenoiseNetwork, noisy, target, state: TrainState,
                      loss_cfg: LossConfig, opt_cfg: OptimizerConfig,
                      mode: str = "training", replicas: int = 1):
    """One synchronous optimizer step over a batch split into ``replicas``
    shards. Shard forwards run on separate tapes; their sums join into the
    exact whole-batch loss, so the update is independent of the shard count
    up to rounding. Returns (loss value, concatenated outputs)."""
    noisy = np.asarray(noisy, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if noisy.shape != target.shape:
        raise ShapeMismatchError(f"shape mismatch {noisy.shape} vs {target.shape}")
    n = noisy.shape[0]
    if replicas < 1 or replicas > n:
        raise ConfigError(f"cannot split a batch of {n} into {replicas} shards")
    bounds = np.linspace(0, n, replicas + 1).astype(int)

    trainables = net.store.trainables()
    zero_grads(trainables.values())
    total_sq = None
    sim_mean = None
    outputs = []
    t_thresh = loss_cfg.huber_threshold
    for r in range(replicas):
        lo, hi = bounds[r], bounds[r + 1]
        out = net.forward(noisy[lo:hi], mode=mode)
        outputs.append(out.data)
        eff = out.clip01() if loss_cfg.clip_in_loss else out
        diff = eff - Tensor(target[lo:hi])
        sq = diff.sum_squares()
        total_sq = sq if total_sq is None else total_sq + sq
        if loss_cfg.ssim_weight > 0:
            part = tensor_ssim(eff, Tensor(target[lo:hi])) * ((hi - lo) / n)
            sim_mean = part if sim_mean is None else sim_mean + part
    s = total_sq * (loss_cfg.mse_scale / target.size)
    scalar = s if s.item() <= t_thresh else (s * t_thresh).sqrt()
    if sim_mean is not None:
        scalar = scalar + (sim_mean * (-1.0) + 1.0) * loss_cfg.ssim_weight
    if loss_cfg.l2_rate > 0:
        penalty = None
        for name in _l2_names(trainables, loss_cfg.l2_scope):
            sq = trainables[name].sum_squares()
            penalty = sq if penalty is None else penalty + sq
        scalar = scalar + penalty * loss_cfg.l2_rate
    backward(scalar)

    lr = lr_at(opt_cfg.schedule, state.step)
    if opt_cfg.kind == "adam":
        adam_step(trainables, state, opt_cfg, lr)
    else:
        rmsprop_step(trainables, state, opt_cfg, lr)
    state.step += 1
    return scalar.item(), np.concatenate(outputs, axis=0)


class _CyclingSource:
    """Adapter giving a fixed pair list the indexable-stream interface."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        if not self.pairs:
            raise ConfigError("empty pair list")

    def pair(self, index: int):
        return self.pairs[index % len(self.pairs)]


def _as_source(obj):
    return obj if hasattr(obj, "pair") else _CyclingSource(obj)


def _batch_arrays(source, start: int, count: int):
    pairs = [source.pair(i) for i in range(start, start + count)]
    noisy = np.stack([p.noisy for p in pairs])[:, None, :, :]
    target = np.stack([p.ground_truth for p in pairs])[:, None, :, :]
    return noisy, target


VAL_EVERY = 5


def train(net: DenoiseNetwork, train_pairs, val_pairs,
          loss_cfg: LossConfig, opt_cfg: OptimizerConfig,
          batches: int, batch_size: int = 1,
          checkpoint_dir=None, checkpoint_interval: int = 500,
          replicas: int = 1, log_path=None):
    """Run ``batches`` optimizer steps, validating one pair every
    :data:`VAL_EVERY` steps and logging one CSV row per step.

    Returns (rows, best validation loss); rows are (step, train_loss,
    val_loss or None, lr, bn_mode). A non-finite loss dumps a diagnostic
    checkpoint and raises; checkpoints also land every
    ``checkpoint_interval`` steps and at the end.
    """
    train_src = _as_source(train_pairs)
    val_src = _as_source(val_pairs)
    if batches < 1:
        raise ConfigError(f"need at least one batch, got {batches}")
    if checkpoint_interval < 1:
        raise ConfigError("checkpoint_interval must be >= 1")
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    state = getattr(net, "_resumed_state", None)
    if state is None:
        state = TrainState.fresh(net)
    else:
        del net._resumed_state
    rows = []
    best_val = math.inf
    log_file = open(log_path, "w", encoding="ascii", newline="\n") if log_path else None
    try:
        if log_file:
            log_file.write("step,train_loss,val_loss,lr,bn_mode\n")
        for _ in range(batches):
            step = state.step
            mode = ("training" if opt_cfg.bn_freeze_batch is None
                    or step < opt_cfg.bn_freeze_batch else "frozen")
            noisy, target = _batch_arrays(train_src, step * batch_size, batch_size)
            lr = lr_at(opt_cfg.schedule, step)
            loss_val, outputs = sync_replica_step(
                net, noisy, target, state, loss_cfg, opt_cfg,
                mode=mode, replicas=replicas)
            if not math.isfinite(loss_val):
                if checkpoint_dir is not None:
                    save_checkpoint(os.path.join(checkpoint_dir, "diagnostic_nan.mdtc"),
                                    net, state, loss_cfg, opt_cfg, bn_mode=mode)
                raise NumericError(f"non-finite loss {loss_val} at step {state.step}")
            train_report = reported_loss(outputs, target, loss_cfg)
            done = state.step
            val_report = None
            if done % VAL_EVERY == 0:
                vp = val_src.pair(done // VAL_EVERY - 1)
                v_out = net.forward(vp.noisy[None, None], mode="inference", clip=True)
                val_report = reported_loss(v_out.data[0, 0], vp.ground_truth, loss_cfg)
                best_val = min(best_val, val_report)
            rows.append((done, train_report, val_report, lr, mode))
            if log_file:
                val_s = "" if val_report is None else repr(float(val_report))
                log_file.write(f"{done},{repr(float(train_report))},{val_s},"
                               f"{repr(float(lr))},{mode}\n")
            if checkpoint_dir is not None and done % checkpoint_interval == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{done:08d}.mdtc"),
                                net, state, loss_cfg, opt_cfg, bn_mode=mode)
        if checkpoint_dir is not None:
            save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{state.step:08d}.mdtc"),
                            net, state, loss_cfg, opt_cfg, bn_mode=mode)
    finally:
        if log_file:
            log_file.close()
    return rows, best_val


def _manifest_for(net: DenoiseNetwork, state: TrainState, loss_cfg: LossConfig,
                  opt_cfg: OptimizerConfig, bn_mode: str) -> dict:
    cfg = net.cfg
    return {
        "model": "network",
        "step": state.step,
        "bn_mode": bn_mode,
        "input_size": cfg.input_size,
        "width_multiplier": repr(cfg.width_multiplier),
        "middle_repeats": cfg.middle_repeats,
        "aspp_rates": ",".join(str(r) for r in cfg.aspp_rates),
        "aspp_out_channels": cfg.aspp_out_channels,
        "optimizer": opt_cfg.kind,
        "beta1": repr(opt_cfg.beta1),
        "beta2": repr(opt_cfg.beta2),
        "eps": repr(opt_cfg.eps),
        "rho": repr(opt_cfg.rho),
        "schedule": serialize_schedule(opt_cfg.schedule),
        "bn_freeze_batch": ("" if opt_cfg.bn_freeze_batch is None
                            else opt_cfg.bn_freeze_batch),
        "mse_scale": repr(loss_cfg.mse_scale),
        "huber_threshold": repr(loss_cfg.huber_threshold),
        "ssim_weight": repr(loss_cfg.ssim_weight),
        "clip_in_loss": int(loss_cfg.clip_in_loss),
        "l2_rate": repr(loss_cfg.l2_rate),
        "l2_scope": loss_cfg.l2_scope,
    }


def save_checkpoint(path, net: DenoiseNetwork, state: TrainState,
                    loss_cfg: LossConfig = LossConfig(),
                    opt_cfg: OptimizerConfig = OptimizerConfig(),
                    bn_mode: str = "training") -> None:
    arrays = dict(net.store.state_arrays())
    for name, m in state.m.items():
        arrays[f"opt.m.{name}"] = m
    for name, v in state.v.items():
        arrays[f"opt.v.{name}"] = v
    save_container(path, arrays, _manifest_for(net, state, loss_cfg, opt_cfg, bn_mode))


def network_config_from_manifest(man: dict) -> NetworkConfig:
    try:
        return NetworkConfig(
            input_size=int(man["input_size"]),
            width_multiplier=float(man["width_multiplier"]),
            middle_repeats=int(man["middle_repeats"]),
            aspp_rates=tuple(int(r) for r in man["aspp_rates"].split(",")),
            aspp_out_channels=int(man["aspp_out_channels"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"manifest missing or malformed network config: {e}") from None


def load_checkpoint(path, net: DenoiseNetwork) -> TrainState:
    """Restore parameters, BN statistics and optimizer moments into ``net``;
    returns the training state. The checkpoint's network configuration must
    match the one the caller built."""
    arrays, man = load_container(path)
    if man.get("model") != "network":
        raise CheckpointError(f"{path}: not a network checkpoint "
                              f"(model={man.get('model')!r})")
    want = network_config_from_manifest(man)
    if want != net.cfg:
        raise CheckpointError(f"{path}: checkpoint built for {want}, "
                              f"cannot load into {net.cfg}")
    moments_m = {}
    moments_v = {}
    net_arrays = {}
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            moments_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            moments_v[name[6:]] = arr
        else:
            net_arrays[name] = arr
    try:
        net.store.load_state_arrays(net_arrays)
    except (ShapeMismatchError, KeyError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    trainables = net.store.trainables()
    for name, t in trainables.items():
        for pool, label in ((moments_m, "first"), (moments_v, "second")):
            if name not in pool:
                raise CheckpointError(f"{path}: missing {label} moment for {name}")
            if pool[name].shape != t.data.shape:
                raise CheckpointError(f"{path}: moment shape mismatch for {name}")
    net.set_bn_mode(man.get("bn_mode", "training"))
    try:
        step = int(man["step"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad step field: {e}") from None
    state = TrainState(step, moments_m, moments_v)
    net._resumed_state = state
    return state


def save_identity_checkpoint(path) -> None:
    """A stub checkpoint whose loaded operator passes images through
    unchanged; used to exercise tiled inference and the CLI end to end."""
    save_container(path, {}, {"model": "identity"})


def load_operator(path, clip: bool = True):
    """Resolve a checkpoint file into (operator, input_size or None).

    The operator maps a float32 batch N x 1 x S x S to the denoised batch;
    the identity stub accepts any size (input_size None).
    """
    arrays, man = load_container(path)
    model = man.get("model")
    if model == "identity":
        return (lambda batch: np.asarray(batch, dtype=np.float32)), None
    if model != "network":
        raise CheckpointError(f"{path}: unknown model kind {model!r}")
    cfg = network_config_from_manifest(man)
    net = build_network(cfg, seed=0)
    load_checkpoint(path, net)

    def operator(batch):
        return net.forward(batch, mode="inference", clip=clip).data

    return operator, cfg.input_size
