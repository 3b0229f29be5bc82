"""Supervise autoencoder, transfer network and conditional discriminator.

Both generators share one trunk: ``log2(size)`` stride-2 4x4 convolution
blocks down to a 1x1 latent, ``log2(size) - 1`` stride-2 4x4 deconvolution
blocks back up to ``size / 2``, then a final deconvolution to one channel and
tanh. They differ only in how encoder features re-enter the decoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .engine import (
    Rng,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    relu,
    sigmoid,
    tanh,
)

SKIP_MODES = ("aegg", "unet_concat", "none")
RESIDUAL_SIDES = (2, 4)


class ConfigError(ValueError):
    pass


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass
class NetConfig:
    image_size: int = 32
    base_width: int = 16
    width_cap: int = 128
    leaky_slope: float = 0.2
    skip_mode: str = "aegg"
    tap_range: tuple[int, int] | None = None  # None -> (max(2, size/16), size/2)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.tap_range is not None:
            self.tap_range = tuple(int(v) for v in self.tap_range)
        self.validate()

    @property
    def latent_dim(self) -> int:
        return self.width_cap

    @property
    def taps(self) -> tuple[int, int]:
        if self.tap_range is not None:
            return self.tap_range
        return max(2, self.image_size // 16), self.image_size // 2

    def validate(self) -> None:
        s = self.image_size
        if not (_is_pow2(s) and s >= 8):
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.base_width < 1 or self.width_cap < self.base_width:
            raise ConfigError(f"need 1 <= base_width <= width_cap, got {self.base_width}/{self.width_cap}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        lo, hi = self.taps
        if not (_is_pow2(lo) and _is_pow2(hi)) or lo < 2 or hi > s // 2 or lo > hi:
            raise ConfigError(f"tap_range {self.taps} must be powers of two with 2 <= lo <= hi <= {s // 2}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_range"] = list(self.taps)
        return d


@dataclass
class ShapePlan:
    enc_sides: list[int]
    enc_channels: list[int]
    dec_sides: list[int]
    dec_channels: list[int]
    residual_layers: list[int]
    tap_layers: list[int]
    disc_sides: list[int]
    disc_channels: list[int]
    image_size: int = 0

    @property
    def k(self) -> int:
        return len(self.tap_layers)

    @property
    def tap_sides(self) -> list[int]:
        return [self.dec_sides[j] for j in self.tap_layers]

    def encoder_index(self, side: int) -> int:
        return self.enc_sides.index(side)


def shape_plan(cfg: NetConfig) -> ShapePlan:
    """Per-layer geometry for all three networks."""
    cfg.validate()
    s = cfg.image_size
    m = int(np.log2(s))
    enc_sides = [s >> (i + 1) for i in range(m)]
    enc_ch = [min(cfg.base_width << i, cfg.width_cap) for i in range(m)]
    dec_sides = [2 << j for j in range(m - 1)]
    dec_ch = [enc_ch[enc_sides.index(d)] for d in dec_sides]
    residual = [j for j, d in enumerate(dec_sides) if d in RESIDUAL_SIDES]
    lo, hi = cfg.taps
    taps = [j for j, d in enumerate(dec_sides) if lo <= d <= hi]
    if not taps:
        raise ConfigError(f"tap_range {cfg.taps} selects no decoder layer (sides {dec_sides})")
    n_disc = m - 1
    disc_sides = [s >> (i + 1) for i in range(n_disc)]
    disc_ch = [min(cfg.base_width << i, cfg.width_cap) for i in range(n_disc)]
    return ShapePlan(enc_sides, enc_ch, dec_sides, dec_ch, residual, taps, disc_sides, disc_ch, s)


class Network:
    """Named parameters, batchnorm buffers and a forward function."""

    def __init__(self, kind: str, cfg: NetConfig, skip_mode: str | None = None):
        self.kind = kind
        self.cfg = cfg
        self.plan = shape_plan(cfg)
        self.skip_mode = skip_mode
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    # construction helpers
    def _param(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)

    def _conv(self, name: str, shape: tuple[int, ...], rng: Rng, bias: bool) -> None:
        self._param(f"{name}.weight", rng.normal(0.0, self.cfg.init_std, shape))
        if bias:
            out_ch = shape[1] if "deconv" in name else shape[0]
            self._param(f"{name}.bias", np.zeros(out_ch))

    def _bn(self, name: str, ch: int, rng: Rng) -> None:
        self._param(f"{name}.gamma", rng.normal(1.0, self.cfg.init_std, ch))
        self._param(f"{name}.beta", np.zeros(ch))
        self.buffers[f"{name}.running_mean"] = np.zeros(ch, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(ch, dtype=np.float32)

    # runtime helpers
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def has(self, name: str) -> bool:
        return name in self.params

    def bn(self, name: str, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            self.training,
            self.cfg.bn_momentum,
            self.cfg.bn_eps,
        )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def astype(self, dtype) -> "Network":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __repr__(self) -> str:
        return f"Network(kind={self.kind!r}, skip_mode={self.skip_mode!r}, params={self.n_params()})"


def build_generator(cfg: NetConfig, rng: Rng, skip_mode: str) -> Network:
    """Encoder-decoder trunk with the requested skip wiring.

    Skip handling at every decoder side that has a matching encoder feature:
    ``unet_concat`` concatenates, ``aegg`` sums a residual block of the
    encoder feature into the decoder feature at sides 2 and 4 and
    concatenates elsewhere, ``none`` adds nothing.
    """
    if skip_mode not in SKIP_MODES:
        raise ConfigError(f"unknown skip_mode {skip_mode!r}")
    net = Network("generator", cfg, skip_mode)
    plan = net.plan
    m = len(plan.enc_sides)
    in_ch = 1
    for i, ch in enumerate(plan.enc_channels):
        # first block sees raw pixels; latent block may see a 1x1 map with batch 1
        use_bn = 0 < i < m - 1
        net._conv(f"enc{i}.conv", (ch, in_ch, 4, 4), rng, bias=not use_bn)
        if use_bn:
            net._bn(f"enc{i}.bn", ch, rng)
        in_ch = ch
    for j, ch in enumerate(plan.dec_channels):
        net._conv(f"dec{j}.deconv", (in_ch, ch, 4, 4), rng, bias=False)
        net._bn(f"dec{j}.bn", ch, rng)
        mode = _skip_kind(skip_mode, plan.dec_sides[j])
        if mode == "residual":
            _build_residual(net, f"res{j}", ch, rng)
            in_ch = ch
        elif mode == "concat":
            in_ch = ch + plan.enc_channels[plan.encoder_index(plan.dec_sides[j])]
        else:
            in_ch = ch
    net._conv("out.deconv", (in_ch, 1, 4, 4), rng, bias=True)
    return net


def _skip_kind(skip_mode: str, side: int) -> str:
    if skip_mode == "none":
        return "none"
    if skip_mode == "aegg" and side in RESIDUAL_SIDES:
        return "residual"
    return "concat"


def _build_residual(net: Network, name: str, ch: int, rng: Rng) -> None:
    net._conv(f"{name}.conv1", (ch, ch, 3, 3), rng, bias=False)
    net._bn(f"{name}.bn1", ch, rng)
    net._conv(f"{name}.conv2", (ch, ch, 3, 3), rng, bias=False)
    net._bn(f"{name}.bn2", ch, rng)


def build_supervise(cfg: NetConfig, rng: Rng) -> Network:
    net = build_generator(cfg, rng, "unet_concat")
    net.kind = "supervise"
    return net


def build_transfer(cfg: NetConfig, rng: Rng) -> Network:
    net = build_generator(cfg, rng, cfg.skip_mode)
    net.kind = "transfer"
    return net


def residual_block(net: Network, name: str, feat: Tensor) -> Tensor:
    """feat + BN(conv3x3(ReLU(BN(conv3x3(feat)))))"""
    h = conv2d(feat, net.p(f"{name}.conv1.weight"), None, 1, 1)
    h = relu(net.bn(f"{name}.bn1", h))
    h = conv2d(h, net.p(f"{name}.conv2.weight"), None, 1, 1)
    h = net.bn(f"{name}.bn2", h)
    return add(feat, h)


def _check_input(net: Network, x: Tensor) -> None:
    s = net.cfg.image_size
    if x.data.ndim != 4 or x.shape[1:] != (1, s, s):
        raise ConfigError(f"{net.kind} expects input (n, 1, {s}, {s}), got {x.shape}")


def forward_generator(net: Network, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run a generator; returns the tanh image and its decoder feature taps.

    Taps are the post-ReLU outputs of the tapped decoder blocks, ordered by
    increasing resolution.
    """
    _check_input(net, x)
    plan = net.plan
    m = len(plan.enc_sides)
    slope = net.cfg.leaky_slope
    feats = []
    h = x
    for i in range(m):
        use_bn = net.has(f"enc{i}.bn.gamma")
        h = conv2d(h, net.p(f"enc{i}.conv.weight"), None if use_bn else net.p(f"enc{i}.conv.bias"), 2, 1)
        if use_bn:
            h = net.bn(f"enc{i}.bn", h)
        h = leaky_relu(h, slope)
        feats.append(h)
    taps = []
    tap_set = set(plan.tap_layers)
    for j, side in enumerate(plan.dec_sides):
        h = conv_transpose2d(h, net.p(f"dec{j}.deconv.weight"), None, 2, 1)
        h = relu(net.bn(f"dec{j}.bn", h))
        if j in tap_set:
            taps.append(h)
        enc = feats[plan.encoder_index(side)]
        mode = _skip_kind(net.skip_mode, side)
        if mode == "residual":
            h = add(residual_block(net, f"res{j}", enc), h)
        elif mode == "concat":
            h = concat_channels(h, enc)
    out = conv_transpose2d(h, net.p("out.deconv.weight"), net.p("out.deconv.bias"), 2, 1)
    return tanh(out), taps


def forward_supervise(net: Network, y: Tensor) -> tuple[Tensor, list[Tensor]]:
    return forward_generator(net, y)


def forward_transfer(net: Network, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    return forward_generator(net, x)


def build_discriminator(cfg: NetConfig, rng: Rng) -> Network:
    net = Network("discriminator", cfg)
    plan = net.plan
    in_ch = 2
    for i, ch in enumerate(plan.disc_channels):
        use_bn = i > 0
        net._conv(f"d{i}.conv", (ch, in_ch, 4, 4), rng, bias=not use_bn)
        if use_bn:
            net._bn(f"d{i}.bn", ch, rng)
        in_ch = ch
    net._conv("head.conv", (1, in_ch, 2, 2), rng, bias=True)
    return net


def forward_discriminator(net: Network, x: Tensor, candidate: Tensor) -> Tensor:
    """Probability, shape (n, 1, 1, 1), that ``candidate`` is the real target for ``x``."""
    _check_input(net, x)
    if candidate.shape != x.shape:
        raise ConfigError(f"discriminator: candidate shape {candidate.shape} != condition shape {x.shape}")
    h = concat_channels(x, candidate)
    for i in range(len(net.plan.disc_channels)):
        use_bn = net.has(f"d{i}.bn.gamma")
        h = conv2d(h, net.p(f"d{i}.conv.weight"), None if use_bn else net.p(f"d{i}.conv.bias"), 2, 1)
        if use_bn:
            h = net.bn(f"d{i}.bn", h)
        h = relu(h)
    h = conv2d(h, net.p("head.conv.weight"), net.p("head.conv.bias"), 1, 0)
    return sigmoid(h)
