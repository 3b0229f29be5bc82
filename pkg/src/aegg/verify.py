"""Finite-difference gradient checks over every op and the tiny composite networks."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .engine import (
    Rng,
    Tensor,
    add,
    add_scalars,
    batchnorm2d,
    bce_loss,
    concat_channels,
    conv2d,
    conv_transpose2d,
    grad_check,
    l1_loss,
    leaky_relu,
    relu,
    sigmoid,
    tanh,
    weighted_sum,
)
from .engine.gradcheck import GradCheckReport
from .models import (
    NetConfig,
    Network,
    build_discriminator,
    build_supervise,
    build_transfer,
    forward_discriminator,
    forward_generator,
    residual_block,
)


def _t(rng: np.random.Generator, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape))
    return Tensor(rng.normal(size=shape))


def _away_from_zero(rng, shape, margin=0.05):
    # keep kink-op inputs clear of 0 so +-h never straddles the kink
    v = rng.normal(size=shape)
    return Tensor(np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin + v, v))


def op_cases(seed: int = 0) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 5, 5)
    w = _t(rng, 4, 3, 4, 4)
    b = _t(rng, 4)
    u = rng.normal(size=(2, 4, 2, 2))
    yield "conv2d", lambda: weighted_sum(conv2d(x, w, b, 2, 1), u), [x, w, b]

    xt = _t(rng, 2, 3, 3, 3)
    wt = _t(rng, 3, 2, 4, 4)
    bt = _t(rng, 2)
    ut = rng.normal(size=(2, 2, 6, 6))
    yield "conv_transpose2d", lambda: weighted_sum(conv_transpose2d(xt, wt, bt, 2, 1), ut), [xt, wt, bt]

    xb = _t(rng, 2, 3, 3, 3)
    gamma = Tensor(1 + 0.1 * rng.normal(size=3))
    beta = _t(rng, 3)
    ub = rng.normal(size=xb.shape)
    rm, rv = np.zeros(3), np.ones(3)
    yield "batchnorm2d_train", lambda: weighted_sum(batchnorm2d(xb, gamma, beta, rm, rv, True), ub), [xb, gamma, beta]
    rm_e, rv_e = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    yield "batchnorm2d_eval", lambda: weighted_sum(batchnorm2d(xb, gamma, beta, rm_e, rv_e, False), ub), [xb, gamma, beta]

    xa = _away_from_zero(rng, (2, 2, 3, 3))
    ua = rng.normal(size=xa.shape)
    yield "leaky_relu", lambda: weighted_sum(leaky_relu(xa, 0.2), ua), [xa]
    yield "relu", lambda: weighted_sum(relu(xa), ua), [xa]
    xs = _t(rng, 2, 2, 3, 3)
    yield "tanh", lambda: weighted_sum(tanh(xs), ua), [xs]
    yield "sigmoid", lambda: weighted_sum(sigmoid(xs), ua), [xs]

    ca, cb = _t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)
    uc = rng.normal(size=(2, 5, 3, 3))
    yield "concat_channels", lambda: weighted_sum(concat_channels(ca, cb), uc), [ca, cb]
    aa, ab = _t(rng, 2, 2, 3, 3), _t(rng, 2, 2, 3, 3)
    yield "add", lambda: weighted_sum(add(aa, ab), ua), [aa, ab]

    lp = _t(rng, 2, 1, 4, 4)
    target = Tensor(lp.data + np.where(rng.random(lp.shape) < 0.5, -1, 1) * rng.uniform(0.1, 1, lp.shape))
    yield "l1_loss", lambda: l1_loss(lp, target), [lp]
    pr = _t(rng, 4, 1, 1, 1, lo=0.05, hi=0.95)
    yield "bce_loss", lambda: bce_loss(pr, [1, 0, 1, 0]), [pr]


def _tiny_cfg(size: int) -> NetConfig:
    return NetConfig(image_size=size, base_width=2, width_cap=4)


def _net_loss(net: Network, x: Tensor, weights: list[np.ndarray]) -> Tensor:
    out, taps = forward_generator(net, x)
    terms = [weighted_sum(out, weights[0])] + [weighted_sum(t, w) for t, w in zip(taps, weights[1:])]
    return add_scalars(*terms)


def net_cases(size: int = 8, seed: int = 0) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed + 100)
    cfg = _tiny_cfg(size)
    # larger init than training so signals are not vanishingly small
    cfg.init_std = 0.5
    x = Tensor(np.where(rng.random((2, 1, size, size)) < 0.4, 1.0, -1.0))

    def weights_for(net):
        out, taps = forward_generator(net, x)
        return [rng.normal(size=out.shape)] + [rng.normal(size=t.shape) for t in taps]

    res = Network("residual", cfg)
    res._conv("r.conv1", (3, 3, 3, 3), Rng(seed), bias=False)
    res._bn("r.bn1", 3, Rng(seed + 1))
    res._conv("r.conv2", (3, 3, 3, 3), Rng(seed + 2), bias=False)
    res._bn("r.bn2", 3, Rng(seed + 3))
    res.astype(np.float64)
    feat = _t(rng, 2, 3, 4, 4)
    ur = rng.normal(size=feat.shape)
    yield "residual_block", lambda: weighted_sum(residual_block(res, "r", feat), ur), res.parameters() + [feat]

    sup = build_supervise(cfg, Rng(seed)).astype(np.float64)
    ws = weights_for(sup)
    yield f"supervise_net_{size}", lambda: _net_loss(sup, x, ws), sup.parameters()

    tr = build_transfer(cfg, Rng(seed + 1)).astype(np.float64)
    wtr = weights_for(tr)
    yield f"transfer_net_{size}", lambda: _net_loss(tr, x, wtr), tr.parameters()

    disc = build_discriminator(cfg, Rng(seed + 2)).astype(np.float64)
    cand = Tensor(np.tanh(rng.normal(size=x.shape)))
    yield f"discriminator_{size}", lambda: bce_loss(forward_discriminator(disc, x, cand), 1.0), disc.parameters()


def run_all(size: int = 8, tol: float = 5e-3, h: float = 1e-3, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    results = []
    for name, build, params in list(op_cases(seed)) + list(net_cases(size, seed)):
        for p in params:
            p.data = p.data.astype(np.float64)
        results.append((name, grad_check(build, params, tol=tol, h=h)))
    return results
