"""Encoder-decoder denoising network.

Topology, front to back:

  stem      residual downsampling block: 3×3 stride-2 conv (64 ch) plus a
            1×1 stride-2 projection skip, each followed by batch norm,
            summed without activation.
  entry     three Xception-style blocks (128 ch @ 1/4, 256 @ 1/8,
            728 @ 1/16): two separable convs, a strided separable conv, and
            a strided 1×1 projection skip.
  middle    12 identity-skip blocks of three 3×3 separable convs at 728 ch.
  aspp      five parallel branches on the deep map (1×1 conv; 3×3 atrous
            convs at rates 6/12/18; global-average pool broadcast back with
            no conv), concatenated to 3640 ch and bottlenecked to 256 by a
            1×1 conv.
  decoder   bilinear 4× upsample, two concatenations with entry-flow taps
            (each resolved by a separable conv), two stride-2 transposed
            convs back to full resolution, and two final 3×3 convs down to
            one channel. The last conv is linear and carries the network's
            only bias.

Every conv is followed by batch norm then ReLU6 except where noted: block
outputs stay linear (the residual add happens after the last batch norm, and
the consumer activates), and the final 1-channel conv is linear so training
targets in [0,1] are reachable without saturation.

Channel counts scale by ``width_multiplier`` with ceiling rounding. Blocks
are named hierarchically (``entry2.sep1.dw`` and so on) in the parameter
store; the naming is load-bearing for checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError, InternalError, ShapeMismatchError
from .layers import (BatchNormState, batch_norm, bilinear_upsample, broadcast_spatial,
                     concat_channels, conv2d, depthwise_separable_conv, global_avg_pool,
                     relu6, transposed_conv2d)

MODES = ("training", "frozen", "inference")


@dataclass
class NetworkConfig:
    input_size: int = 512
    width_multiplier: float = 1.0
    middle_repeats: int = 12
    aspp_rates: tuple = (6, 12, 18)
    aspp_out_channels: int = 256

    def __post_init__(self):
        if self.input_size % 16 != 0 or self.input_size < 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.middle_repeats < 1:
            raise ConfigError("middle_repeats must be >= 1")
        if self.aspp_out_channels < 2:
            raise ConfigError("aspp_out_channels must be >= 2")

    def scale(self, channels: int) -> int:
        return max(1, math.ceil(channels * self.width_multiplier))


class ParamStore:
    """Named learnable tensors, batch-norm states, and optimizer slots."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise InternalError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def add_bn(self, name: str, channels: int) -> BatchNormState:
        if name in self.bn:
            raise InternalError(f"duplicate batch-norm name {name!r}")
        state = BatchNormState(channels)
        self.bn[name] = state
        return state

    def trainables(self) -> dict[str, Tensor]:
        """All learnable tensors in a stable order, batch-norm γ/β included."""
        out = dict(self.params)
        for name, state in self.bn.items():
            out[f"{name}.gamma"] = state.gamma
            out[f"{name}.beta"] = state.beta
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must carry to reproduce forward passes."""
        out = {name: t.data for name, t in self.trainables().items()}
        for name, state in self.bn.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeMismatchError(
                f"parameter name mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self.trainables().items():
            src = np.asarray(arrays[name], dtype=np.float32)
            if src.shape != t.data.shape:
                raise ShapeMismatchError(f"{name}: shape {src.shape} != {t.data.shape}")
            t.data = src.copy()
        for name, state in self.bn.items():
            state.running_mean = np.asarray(arrays[f"{name}.running_mean"], np.float32).copy()
            state.running_var = np.asarray(arrays[f"{name}.running_var"], np.float32).copy()


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class DenoiseNetwork:
    """The full encoder-decoder; parameters live in ``self.store``."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        self._rng = np.random.default_rng(seed)
        s = cfg.scale
        self.ch_stem = s(64)
        self.ch_entry = (s(128), s(256), s(728))
        self.ch_aspp = s(cfg.aspp_out_channels)
        self.ch_tap_a = s(cfg.aspp_out_channels // 2)
        self.ch_tap_b = self.ch_aspp - self.ch_tap_a
        if self.ch_tap_b < 1:
            raise ConfigError("aspp_out_channels too small for the two decoder taps")
        self.ch_dec = (s(128), s(64), s(32))
        self._build()
        del self._rng

    # -- construction ------------------------------------------------------

    def _conv(self, name, cout, cin, k, bias=False):
        self.store.add_param(f"{name}.w",
                             _xavier(self._rng, (cout, cin, k, k), cin * k * k, cout * k * k))
        if bias:
            self.store.add_param(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _tconv(self, name, cin, cout, k=3):
        # kernel laid out Cin×Cout×k×k for the adjoint orientation
        self.store.add_param(f"{name}.w",
                             _xavier(self._rng, (cin, cout, k, k), cin * k * k, cout * k * k))

    def _bn(self, name, channels):
        self.store.add_bn(name, channels)

    def _sep(self, name, cin, cout):
        self.store.add_param(f"{name}.dw", _xavier(self._rng, (cin, 3, 3), 9, 9))
        self._bn(f"{name}.bn_mid", cin)
        self._conv(f"{name}.pw", cout, cin, 1)
        self._bn(f"{name}.bn_out", cout)

    def _build(self):
        c1, c2, c3 = self.ch_entry
        self._conv("stem.conv", self.ch_stem, 1, 3)
        self._bn("stem.bn", self.ch_stem)
        self._conv("stem.proj", self.ch_stem, 1, 1)
        self._bn("stem.proj_bn", self.ch_stem)

        for i, (cin, cout) in enumerate(
                [(self.ch_stem, c1), (c1, c2), (c2, c3)], start=1):
            p = f"entry{i}"
            self._sep(f"{p}.sep1", cin, cout)
            self._sep(f"{p}.sep2", cout, cout)
            self._sep(f"{p}.sep3", cout, cout)
            self._conv(f"{p}.proj", cout, cin, 1)
            self._bn(f"{p}.proj_bn", cout)

        self._sep("tap_b.sep", c1, self.ch_tap_b)

        for j in range(self.cfg.middle_repeats):
            p = f"middle{j + 1}"
            self._sep(f"{p}.sep1", c3, c3)
            self._sep(f"{p}.sep2", c3, c3)
            self._sep(f"{p}.sep3", c3, c3)

        self._conv("aspp.b0", c3, c3, 1)
        self._bn("aspp.b0_bn", c3)
        for r in self.cfg.aspp_rates:
            self._conv(f"aspp.r{r}", c3, c3, 3)
            self._bn(f"aspp.r{r}_bn", c3)
        n_branches = 2 + len(self.cfg.aspp_rates)
        self._conv("aspp.bottleneck", self.ch_aspp, n_branches * c3, 1)
        self._bn("aspp.bottleneck_bn", self.ch_aspp)

        d1, d2, d3 = self.ch_dec
        self._sep("dec.res1", self.ch_aspp + self.ch_tap_b, self.ch_aspp)
        self._sep("dec.res2", self.ch_aspp + self.ch_tap_a, self.ch_aspp)
        self._tconv("dec.up1", self.ch_aspp, d1)
        self._bn("dec.up1_bn", d1)
        self._tconv("dec.up2", d1, d2)
        self._bn("dec.up2_bn", d2)
        self._conv("dec.conv1", d3, d2, 3)
        self._bn("dec.conv1_bn", d3)
        self._conv("dec.out", 1, d3, 3, bias=True)

    # -- forward pieces ----------------------------------------------------

    def _p(self, name):
        return self.store.params[name]

    def _apply_sep(self, name, x, mode, stride=1, dilation=1, act=True):
        y = depthwise_separable_conv(x, self._p(f"{name}.dw"), self._p(f"{name}.pw.w"),
                                     self.store.bn[f"{name}.bn_mid"],
                                     stride=stride, dilation=dilation, mode=mode)
        y = batch_norm(y, self.store.bn[f"{name}.bn_out"], mode=mode)
        return relu6(y) if act else y

    def _apply_conv_bn(self, name, bn_name, x, mode, stride=1, dilation=1, act=True):
        y = conv2d(x, self._p(f"{name}.w"), stride=stride, dilation=dilation)
        y = batch_norm(y, self.store.bn[bn_name], mode=mode)
        return relu6(y) if act else y

    def entry_flow(self, x: Tensor, mode: str = "training"):
        """Returns (low_level_a, low_level_b, deep)."""
        stem = self._apply_conv_bn("stem.conv", "stem.bn", x, mode, stride=2, act=False) \
            + self._apply_conv_bn("stem.proj", "stem.proj_bn", x, mode, stride=2, act=False)

        h = stem
        taps = None
        for i in range(1, 4):
            p = f"entry{i}"
            a = relu6(h)
            y = self._apply_sep(f"{p}.sep1", a, mode)
            y = self._apply_sep(f"{p}.sep2", y, mode)
            y = self._apply_sep(f"{p}.sep3", y, mode, stride=2, act=False)
            skip = self._apply_conv_bn(f"{p}.proj", f"{p}.proj_bn", h, mode, stride=2,
                                       act=False)
            h = y + skip
            if i == 1:
                low_a = relu6(h)
                low_b = self._apply_sep("tap_b.sep", low_a, mode)
                taps = (low_a, low_b)
        return taps[0], taps[1], h

    def middle_flow(self, deep: Tensor, mode: str = "training") -> Tensor:
        h = deep
        for j in range(self.cfg.middle_repeats):
            p = f"middle{j + 1}"
            y = relu6(h)
            y = self._apply_sep(f"{p}.sep1", y, mode)
            y = self._apply_sep(f"{p}.sep2", y, mode)
            y = self._apply_sep(f"{p}.sep3", y, mode, act=False)
            h = h + y
        return h

    def aspp(self, deep: Tensor, mode: str = "training") -> Tensor:
        d = relu6(deep)
        h, w = d.data.shape[2], d.data.shape[3]
        branches = [self._apply_conv_bn("aspp.b0", "aspp.b0_bn", d, mode)]
        for r in self.cfg.aspp_rates:
            branches.append(self._apply_conv_bn(f"aspp.r{r}", f"aspp.r{r}_bn", d, mode,
                                                dilation=r))
        branches.append(broadcast_spatial(global_avg_pool(d), h, w))
        cat = concat_channels(branches)
        return self._apply_conv_bn("aspp.bottleneck", "aspp.bottleneck_bn", cat, mode)

    def decoder(self, aspp_out: Tensor, low_a: Tensor, low_b: Tensor,
                mode: str = "training") -> Tensor:
        h, w = low_b.data.shape[2], low_b.data.shape[3]
        y = bilinear_upsample(aspp_out, h, w)
        y = self._apply_sep("dec.res1", concat_channels([y, low_b]), mode)
        y = self._apply_sep("dec.res2", concat_channels([y, low_a]), mode)
        y = transposed_conv2d(y, self._p("dec.up1.w"), stride=2)
        y = relu6(batch_norm(y, self.store.bn["dec.up1_bn"], mode=mode))
        y = transposed_conv2d(y, self._p("dec.up2.w"), stride=2)
        y = relu6(batch_norm(y, self.store.bn["dec.up2_bn"], mode=mode))
        y = self._apply_conv_bn("dec.conv1", "dec.conv1_bn", y, mode)
        return conv2d(y, self._p("dec.out.w"), bias=self._p("dec.out.b"))

    def _forward_graph(self, x: Tensor, mode: str) -> Tensor:
        bn_mode = "training" if mode == "training" else "frozen"
        low_a, low_b, deep = self.entry_flow(x, bn_mode)
        deep = self.middle_flow(deep, bn_mode)
        return self.decoder(self.aspp(deep, bn_mode), low_a, low_b, bn_mode)

    def forward(self, x, mode: str = "training", clip: bool = False) -> Tensor:
        """Run the network; mode ∈ {training, frozen, inference}.

        Training mode updates batch-norm running statistics; frozen mode uses
        them but still records gradients; inference mode records nothing and
        optionally clips the output to [0, 1].
        """
        if mode not in MODES:
            raise ConfigError(f"forward mode must be one of {MODES}, got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeMismatchError(f"expected N×1×S×S input, got {x.data.shape}")
        if x.data.shape[2] != self.cfg.input_size or x.data.shape[3] != self.cfg.input_size:
            raise ShapeMismatchError(
                f"input spatial size {x.data.shape[2]}x{x.data.shape[3]} does not match "
                f"configured {self.cfg.input_size}; tile larger images instead")
        if mode == "inference":
            with no_grad():
                y = self._forward_graph(x, mode)
                if clip:
                    y = y.clip01()
            return y
        return self._forward_graph(x, mode)

    def set_bn_mode(self, mode: str):
        for state in self.store.bn.values():
            state.mode = mode

    def param_count(self) -> int:
        return sum(t.data.size for t in self.store.trainables().values())


def build_network(cfg: NetworkConfig, seed: int = 0) -> DenoiseNetwork:
    return DenoiseNetwork(cfg, seed)


def param_count(cfg: NetworkConfig) -> int:
    return build_network(cfg).param_count()
