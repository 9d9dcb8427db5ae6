"""Finite-difference verification of every differentiable op.

Each named case builds a small graph on random inputs, projects the output
against a fixed random field to get a scalar, and compares the reverse-mode
gradient of every input against central finite differences at ε=1e-3. The
comparison is ‖analytic − numeric‖∞ normalized by the larger gradient scale.

Case inputs are drawn away from the kinks of relu6 and clip01 so the
two-sided difference never straddles a subgradient switch. The ``tamper``
argument exists for negative-control tests: it may corrupt the analytic
gradients before comparison, and the check must then fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward
from .errors import ConfigError
from .layers import (BatchNormState, batch_norm, bilinear_upsample, broadcast_spatial,
                     concat_channels, conv2d, depthwise_conv2d, depthwise_separable_conv,
                     global_avg_pool, relu6, transposed_conv2d)
from .network import NetworkConfig, build_network

TINY = 1e-12


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        word = "PASS" if self.passed else "FAIL"
        return f"{word}  {self.name:<24s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), TINY)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _away_from(x: np.ndarray, knots, margin: float = 0.05) -> np.ndarray:
    """Push values at least ``margin`` away from each kink location."""
    x = x.copy()
    for k in knots:
        near = np.abs(x - k) < margin
        x[near] = k + margin * np.where(x[near] >= k, 1.0, -1.0)
    return x


def _u(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


# Each case: rng -> (make_graph(tensors) -> Tensor, [input arrays]).

def _case_add(rng):
    a, b = _u(rng, (2, 3, 4, 4)), _u(rng, (2, 3, 4, 4))
    return (lambda ts: ts[0] + ts[1]), [a, b]


def _case_mul(rng):
    a, b = _u(rng, (2, 3, 4, 4)), _u(rng, (2, 3, 4, 4))
    return (lambda ts: ts[0] * ts[1]), [a, b]


def _case_sub_scalar(rng):
    a = _u(rng, (3, 2, 4, 4))
    return (lambda ts: (ts[0] - 0.5) * 2.0), [a]


def _case_div(rng):
    a = _u(rng, (2, 2, 4, 4))
    b = rng.uniform(0.5, 2.0, (2, 2, 4, 4)).astype(np.float32)
    b *= rng.choice([-1.0, 1.0], b.shape).astype(np.float32)
    return (lambda ts: ts[0] / ts[1]), [a, b]


def _case_sqrt(rng):
    a = rng.uniform(0.1, 4.0, (2, 3, 4, 4)).astype(np.float32)
    return (lambda ts: ts[0].sqrt()), [a]


def _case_clip01(rng):
    a = _away_from(rng.uniform(-0.5, 1.5, (2, 3, 4, 4)).astype(np.float32), (0.0, 1.0))
    return (lambda ts: ts[0].clip01()), [a]


def _case_relu6(rng):
    a = _away_from(rng.uniform(-3.0, 9.0, (2, 3, 4, 4)).astype(np.float32), (0.0, 6.0))
    return (lambda ts: relu6(ts[0])), [a]


def _case_mean(rng):
    a = _u(rng, (2, 3, 4, 4))
    return (lambda ts: ts[0].mean()), [a]


def _case_sum_squares(rng):
    a = _u(rng, (2, 3, 4, 4))
    return (lambda ts: ts[0].sum_squares()), [a]


def _case_conv2d(rng):
    x = _u(rng, (1, 3, 8, 8))
    w = _u(rng, (4, 3, 3, 3), -0.5, 0.5)
    return (lambda ts: conv2d(ts[0], ts[1])), [x, w]


def _case_conv2d_strided(rng):
    x = _u(rng, (1, 2, 9, 8))
    w = _u(rng, (3, 2, 3, 3), -0.5, 0.5)
    b = _u(rng, (3,))
    return (lambda ts: conv2d(ts[0], ts[1], bias=ts[2], stride=2)), [x, w, b]


def _case_conv2d_dilated(rng):
    x = _u(rng, (1, 2, 10, 10))
    w = _u(rng, (2, 2, 3, 3), -0.5, 0.5)
    return (lambda ts: conv2d(ts[0], ts[1], dilation=2, padding="valid")), [x, w]


def _case_depthwise(rng):
    x = _u(rng, (2, 3, 7, 7))
    w = _u(rng, (3, 3, 3), -0.5, 0.5)
    return (lambda ts: depthwise_conv2d(ts[0], ts[1], stride=2)), [x, w]


def _case_separable(rng):
    x = _u(rng, (2, 3, 6, 6))
    wd = _u(rng, (3, 3, 3), -0.5, 0.5)
    wp = _u(rng, (4, 3, 1, 1), -0.5, 0.5)
    gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    beta = _u(rng, (3,))

    def make(ts):
        st = BatchNormState(3)
        st.gamma, st.beta = ts[3], ts[4]
        return depthwise_separable_conv(ts[0], ts[1], ts[2], st, mode="training")
    return make, [x, wd, wp, gamma, beta]


def _case_transposed_conv2d(rng):
    x = _u(rng, (1, 3, 4, 4))
    w = _u(rng, (3, 2, 3, 3), -0.5, 0.5)
    return (lambda ts: transposed_conv2d(ts[0], ts[1], stride=2)), [x, w]


def _case_bilinear(rng):
    x = _u(rng, (1, 2, 3, 5))
    return (lambda ts: bilinear_upsample(ts[0], 7, 11)), [x]


def _case_batch_norm_training(rng):
    x = _u(rng, (2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    beta = _u(rng, (3,))

    def make(ts):
        st = BatchNormState(3)
        st.gamma, st.beta = ts[1], ts[2]
        return batch_norm(ts[0], st, mode="training")
    return make, [x, gamma, beta]


def _case_batch_norm_frozen(rng):
    x = _u(rng, (2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    beta = _u(rng, (3,))
    mean = _u(rng, (3,), -0.5, 0.5)
    var = rng.uniform(0.5, 2.0, 3).astype(np.float32)

    def make(ts):
        st = BatchNormState(3)
        st.gamma, st.beta = ts[1], ts[2]
        st.running_mean, st.running_var = mean, var
        return batch_norm(ts[0], st, mode="frozen")
    return make, [x, gamma, beta]


def _case_global_avg_pool(rng):
    x = _u(rng, (2, 3, 5, 5))
    return (lambda ts: global_avg_pool(ts[0])), [x]


def _case_broadcast(rng):
    x = _u(rng, (2, 3, 1, 1))
    return (lambda ts: broadcast_spatial(ts[0], 4, 6)), [x]


def _case_concat(rng):
    a, b, c = _u(rng, (1, 2, 4, 4)), _u(rng, (1, 3, 4, 4)), _u(rng, (1, 1, 4, 4))
    return (lambda ts: concat_channels(ts)), [a, b, c]


def _case_residual_fanout(rng):
    # one tensor feeding two paths; checks gradient accumulation
    x = _u(rng, (1, 2, 5, 5))
    w = _u(rng, (2, 2, 3, 3), -0.5, 0.5)
    return (lambda ts: conv2d(ts[0], ts[1]) + ts[0]), [x, w]


CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "scale_shift": _case_sub_scalar,
    "div": _case_div,
    "sqrt": _case_sqrt,
    "clip01": _case_clip01,
    "relu6": _case_relu6,
    "mean": _case_mean,
    "sum_squares": _case_sum_squares,
    "conv2d": _case_conv2d,
    "conv2d_strided_bias": _case_conv2d_strided,
    "conv2d_dilated": _case_conv2d_dilated,
    "depthwise_conv2d": _case_depthwise,
    "separable_conv": _case_separable,
    "transposed_conv2d": _case_transposed_conv2d,
    "bilinear_upsample": _case_bilinear,
    "concat_channels": _case_concat,
    "batch_norm_training": _case_batch_norm_training,
    "batch_norm_frozen": _case_batch_norm_frozen,
    "global_avg_pool": _case_global_avg_pool,
    "broadcast_spatial": _case_broadcast,
    "residual_fanout": _case_residual_fanout,
}


def _loss_value(make, arrays, r64) -> float:
    out = make([Tensor(a) for a in arrays])
    return float((out.data.astype(np.float64) * r64).sum())


def run_case(name: str, seed: int = 0, eps: float = 1e-3, tol: float = 1e-3,
             tamper=None) -> GradReport:
    if name not in CASES:
        raise ConfigError(f"unknown gradient-check case {name!r}")
    idx = sorted(CASES).index(name)
    make, arrays = CASES[name](np.random.default_rng([seed, idx]))
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = make(tensors)
    r64 = np.random.default_rng([seed, idx, 1]).standard_normal(out.data.shape)
    r64 = r64.astype(np.float32).astype(np.float64)
    loss = (out * Tensor(r64.astype(np.float32))).sum()
    backward(loss)
    grads = [t.grad.astype(np.float64).copy() for t in tensors]
    if tamper is not None:
        tamper(name, grads)
    worst = 0.0
    for k, a in enumerate(arrays):
        fd = np.empty(a.shape, dtype=np.float64)
        work = [arr.copy() if j == k else arr for j, arr in enumerate(arrays)]
        for pos in np.ndindex(*a.shape):
            orig = a[pos]
            work[k][pos] = orig + eps
            fp = _loss_value(make, work, r64)
            work[k][pos] = orig - eps
            fm = _loss_value(make, work, r64)
            work[k][pos] = orig
            fd[pos] = (fp - fm) / (2.0 * eps)
        worst = max(worst, relative_error(grads[k], fd))
    return GradReport(name, worst, tol)


def run_all(seed: int = 0, eps: float = 1e-3, tol: float = 1e-3, tamper=None):
    return [run_case(name, seed=seed, eps=eps, tol=tol, tamper=tamper)
            for name in sorted(CASES)]


def _condition_probe_point(net):
    """Steer every relu6 input into its linear region for the probe.

    A frozen-mode forward is piecewise linear along any one parameter
    direction, so the only finite-difference error sources are relu6 kink
    crossings and 32-bit rounding. Near Xavier init the kink density is
    enormous and finite differences are meaningless; the same remedy the op
    cases use (inputs nudged away from kinks) applies here at network scale.

    β places each post-norm distribution at 0.75 with spread γ, at least
    three standard deviations from the kink at 0 and far below 6: 0.375 for
    the two halves of a residual pair so their sum centers at 0.75, and 0
    with a small γ for middle-block branches so the accumulating trunk keeps
    its center. Keeping the operating point well below 1 also keeps the
    absolute float32 quantization of every intermediate small, which is what
    limits the resolvable difference. Calibrating running statistics to the
    probe batch makes frozen mode reproduce exactly these distributions.
    """
    for name, state in net.store.bn.items():
        if (name.startswith("stem.") or name.endswith(".proj_bn")
                or (name.startswith("entry") and name.endswith("sep3.bn_out"))):
            state.gamma.data[:] = 0.125
            state.beta.data[:] = 0.375
        elif name.startswith("middle") and name.endswith("sep3.bn_out"):
            state.gamma.data[:] = 0.04
            state.beta.data[:] = 0.0
        else:
            state.gamma.data[:] = 0.25
            state.beta.data[:] = 0.75


def _calibrate_bn(net, x):
    """One training-mode forward with decay 0: running stats ← batch stats."""
    saved = [(st, st.decay) for st in net.store.bn.values()]
    for st, _ in saved:
        st.decay = 0.0
    net.forward(x, mode="training")
    for st, decay in saved:
        st.decay = decay


def check_network(width: float = 0.125, input_size: int = 64, seed: int = 0,
                  n_params: int = 10, eps: float = 3e-3, tol: float = 1e-2,
                  tamper=None) -> GradReport:
    """Check the composed network's gradients against finite differences.

    Picks ``n_params`` random parameter tensors and, for each, compares the
    analytic gradient norm against the central finite difference taken along
    the analytic gradient direction. The directional form aggregates the
    whole tensor, so the loss delta stays far above the 32-bit rounding
    floor that buries single-coordinate differences on a 50-layer forward;
    it still catches scaling errors linearly and direction errors through
    the norm. Runs at a conditioned probe point (see
    ``_condition_probe_point``) so no relu6 kink sits inside the step.
    """
    cfg = NetworkConfig(input_size=input_size, width_multiplier=width)
    net = build_network(cfg, seed=seed)
    rng = np.random.default_rng([seed, 9001])
    x = Tensor(rng.uniform(0.05, 0.95, (1, 1, input_size, input_size)).astype(np.float32))
    r64 = rng.standard_normal((1, 1, input_size, input_size))
    r64 = r64.astype(np.float32).astype(np.float64)
    r = Tensor(r64.astype(np.float32))

    _condition_probe_point(net)
    _calibrate_bn(net, x)

    out = net.forward(x, mode="frozen")
    backward((out * r).sum())
    trainables = net.store.trainables()
    names = sorted(trainables)
    picked = [names[int(i)] for i in rng.choice(len(names), size=n_params, replace=False)]

    grads = {nm: trainables[nm].grad.astype(np.float64).copy() for nm in picked}
    if tamper is not None:
        tamper("network", grads)

    worst = 0.0
    for nm in picked:
        t = trainables[nm]
        g = grads[nm]
        claimed = float(np.sqrt((g * g).sum()))
        if claimed == 0.0:
            worst = max(worst, 1.0)  # a dead tensor is itself a failure
            continue
        v = (g / claimed).astype(np.float32)
        orig = t.data.copy()
        t.data = orig + eps * v
        fp = float((net.forward(x, mode="inference").data.astype(np.float64) * r64).sum())
        t.data = orig - eps * v
        fm = float((net.forward(x, mode="inference").data.astype(np.float64) * r64).sum())
        t.data = orig
        fd = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(claimed - fd) / max(claimed, abs(fd), TINY))
    return GradReport(f"network_w{width:g}", worst, tol)
