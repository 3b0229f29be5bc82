"""Losses, joint training of supervise net / transfer net / discriminator, checkpoints and metrics."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .engine import (
    Adam,
    Rng,
    Tensor,
    add_scalars,
    backward,
    bce_loss,
    frozen,
    l1_loss,
    no_grad,
    scale,
)
from .glyph_data import Corpus, CorpusError, batch_iter, stack_pairs
from .models import (
    SKIP_MODES,
    ConfigError,
    NetConfig,
    Network,
    build_discriminator,
    build_generator,
    build_supervise,
    build_transfer,
    forward_discriminator,
    forward_supervise,
    forward_transfer,
    shape_plan,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "l_sup", "l_rec", "l_adv_d", "l_adv_g", "total_g")
GEN_LOSSES = ("non_saturating", "saturating")


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, record: dict):
        super().__init__(msg)
        self.record = record


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    lambda_s: float = 100.0
    lambda_r: float = 100.0
    lambda_j: list[float] | None = None  # None -> 1 per tap
    lambda_pixel: float = 100.0
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 16
    epochs: int = 10
    seed: int = 0
    use_supervise: bool = True
    use_adversarial: bool = True
    d_steps_per_g: int = 1
    augment: bool = True
    flip_p: float = 0.5
    gen_loss: str = "non_saturating"

    def __post_init__(self):
        self.validate()

    @property
    def taps_weights(self) -> list[float]:
        k = shape_plan(self.net).k
        return [1.0] * k if self.lambda_j is None else list(self.lambda_j)

    def validate(self) -> None:
        for name in ("lambda_s", "lambda_r", "lambda_pixel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.lambda_j is not None:
            k = shape_plan(self.net).k
            if len(self.lambda_j) != k:
                raise ConfigError(f"lambda_j: need {k} weights (one per tap), got {len(self.lambda_j)}")
            if any(v < 0 for v in self.lambda_j):
                raise ConfigError("lambda_j: weights must be >= 0")
        if self.batch < 1:
            raise ConfigError(f"batch: must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.d_steps_per_g < 1:
            raise ConfigError(f"d_steps_per_g: must be >= 1, got {self.d_steps_per_g}")
        if not 0 <= self.flip_p <= 1:
            raise ConfigError(f"flip_p: must be in [0, 1], got {self.flip_p}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.gen_loss not in GEN_LOSSES:
            raise ConfigError(f"gen_loss: must be one of {GEN_LOSSES}, got {self.gen_loss!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build from a JSON-like mapping, reporting problems per field."""
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
        return cls(net=_net_from_dict(data.get("net", {})), **_typed_fields(cls, data, skip={"net"}, where="config"))


_SCALAR_TYPES = {"float": (int, float), "int": (int,), "bool": (bool,), "str": (str,)}


def _typed_fields(cls, data: dict, skip: set[str], where: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in data.items():
        if key in skip:
            continue
        if key not in fields:
            raise ConfigError(f"{where}.{key}: unknown field")
        ftype = str(fields[key].type)
        base = ftype.split("|")[0].strip()
        if base.startswith("list") or base.startswith("tuple"):
            if value is None and "None" in ftype:
                out[key] = None
                continue
            if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where}.{key}: expected a list of numbers, got {value!r}")
            out[key] = value
            continue
        ok = _SCALAR_TYPES.get(base, (object,))
        if isinstance(value, bool) and base != "bool":
            raise ConfigError(f"{where}.{key}: expected {base}, got bool")
        if not isinstance(value, ok):
            raise ConfigError(f"{where}.{key}: expected {base}, got {type(value).__name__}")
        out[key] = float(value) if base == "float" else value
    return out


def _net_from_dict(data) -> NetConfig:
    if not isinstance(data, dict):
        raise ConfigError("config.net: must be an object")
    try:
        return NetConfig(**_typed_fields(NetConfig, data, skip=set(), where="config.net"))
    except ConfigError as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith("config.") else f"config.net: {msg}") from None


# ------------------------------------------------------------------ losses


def loss_supervise(recon: Tensor, y: Tensor) -> Tensor:
    return l1_loss(recon, y)


def loss_reconstruct(T: Sequence[Tensor], S: Sequence[Tensor], lambda_j: Sequence[float]) -> Tensor:
    """Weighted sum of per-tap L1 between transfer taps and (detached) supervise taps."""
    if not (len(T) == len(S) == len(lambda_j)) or not T:
        raise ValueError(f"tap count mismatch: |T|={len(T)} |S|={len(S)} |lambda|={len(lambda_j)}")
    terms = [scale(l1_loss(t, s.detach()), w) for t, s, w in zip(T, S, lambda_j)]
    return add_scalars(*terms)


def loss_adversarial_d(D: Network, x: Tensor, y_real: Tensor, y_fake: Tensor) -> Tensor:
    fake = y_fake.detach()
    real_term = bce_loss(forward_discriminator(D, x, y_real), 1.0)
    fake_term = bce_loss(forward_discriminator(D, x, fake), 0.0)
    return add_scalars(real_term, fake_term)


def loss_adversarial_g(D: Network, x: Tensor, y_fake: Tensor, form: str = "non_saturating") -> Tensor:
    """Generator side of the adversarial game; wrap the backward in ``frozen(D.parameters())``."""
    prob = forward_discriminator(D, x, y_fake)
    if form == "saturating":
        # minimise log(1 - D) literally
        return scale(bce_loss(prob, 0.0), -1.0)
    return bce_loss(prob, 1.0)


def total_g_loss(cfg: TrainConfig, parts: dict):
    """adv_g*[adv] + lambda_s*sup*[sup] + lambda_r*rec*[sup] + lambda_pixel*pix.

    ``parts`` maps 'adv_g', 'sup', 'rec', 'pix' to Tensors or floats; missing
    entries count as zero. Returns the same kind as its inputs.
    """
    weighted = []
    if cfg.use_adversarial and parts.get("adv_g") is not None:
        weighted.append((parts["adv_g"], 1.0))
    if cfg.use_supervise:
        if parts.get("sup") is not None:
            weighted.append((parts["sup"], cfg.lambda_s))
        if parts.get("rec") is not None:
            weighted.append((parts["rec"], cfg.lambda_r))
    if parts.get("pix") is not None:
        weighted.append((parts["pix"], cfg.lambda_pixel))
    if any(isinstance(v, Tensor) for v, _ in weighted):
        terms = [v if w == 1.0 else scale(v, w) for v, w in weighted]
        return add_scalars(*terms) if terms else Tensor(np.float32(0))
    return float(sum(float(v) * w for v, w in weighted))


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    cfg: TrainConfig
    G: Network
    A: Network | None
    D: Network | None
    opt_g: Adam
    opt_d: Adam | None
    rng: Rng
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf

    def nets(self) -> dict[str, Network]:
        out = {"G": self.G}
        if self.A is not None:
            out["A"] = self.A
        if self.D is not None:
            out["D"] = self.D
        return out

    def set_mode(self, training: bool) -> None:
        for net in self.nets().values():
            net.training = training


def init_state(cfg: TrainConfig) -> TrainState:
    init_rng = Rng(cfg.seed)
    G = build_transfer(cfg.net, init_rng)
    A = build_supervise(cfg.net, init_rng) if cfg.use_supervise else None
    D = build_discriminator(cfg.net, init_rng) if cfg.use_adversarial else None
    gen_params = G.parameters() + (A.parameters() if A is not None else [])
    opt_g = Adam(gen_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_d = Adam(D.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) if D is not None else None
    return TrainState(cfg, G, A, D, opt_g, opt_d, Rng(cfg.seed + 1))


# ------------------------------------------------------------------ steps


def d_step(state: TrainState, X: Tensor, Y: Tensor) -> float:
    """One discriminator update against a fresh, detached G(X)."""
    with no_grad():
        fake, _ = forward_transfer(state.G, X)
    loss = loss_adversarial_d(state.D, X, Y, fake)
    backward(loss)
    state.opt_d.step()
    return loss.item()


def g_step(state: TrainState, X: Tensor, Y: Tensor) -> dict:
    """One joint update of the transfer net (and supervise net when enabled)."""
    cfg = state.cfg
    parts: dict = {}
    S = None
    if cfg.use_supervise:
        recon, S = forward_supervise(state.A, Y)
        parts["sup"] = loss_supervise(recon, Y)
    gen, T = forward_transfer(state.G, X)
    parts["pix"] = l1_loss(gen, Y)
    if S is not None:
        parts["rec"] = loss_reconstruct(T, S, cfg.taps_weights)
    d_params = state.D.parameters() if state.D is not None else []
    with frozen(d_params):
        if cfg.use_adversarial:
            parts["adv_g"] = loss_adversarial_g(state.D, X, gen, cfg.gen_loss)
        total = total_g_loss(cfg, parts)
        backward(total)
    state.opt_g.step()
    rec = {k: v.item() for k, v in parts.items()}
    rec["total_g"] = total.item()
    return rec


def train_step(state: TrainState, X: Tensor, Y: Tensor) -> dict:
    """D update(s) first, then the G/A update. Returns the metrics record."""
    cfg = state.cfg
    l_adv_d = 0.0
    if cfg.use_adversarial:
        for _ in range(cfg.d_steps_per_g):
            l_adv_d = d_step(state, X, Y)
    parts = g_step(state, X, Y)
    state.step += 1
    record = {
        "step": state.step,
        "l_sup": parts.get("sup", 0.0),
        "l_rec": parts.get("rec", 0.0),
        "l_adv_d": l_adv_d,
        "l_adv_g": parts.get("adv_g", 0.0),
        "total_g": parts["total_g"],
        "l_pix": parts["pix"],
    }
    bad = [k for k, v in record.items() if k != "step" and not math.isfinite(v)]
    if bad:
        raise TrainingAborted(f"non-finite loss at step {state.step}: {', '.join(bad)}", record)
    return record


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsLog:
    steps: list[dict] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.steps.append(record)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.steps:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in CSV_FIELDS[1:]])

    def write_val_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "step", "val_l1", "val_iou"))
            for r in self.val:
                w.writerow([r["epoch"], r["step"], repr(r["val_l1"]), repr(r["val_iou"])])

    @staticmethod
    def read_csv(path: str | os.PathLike) -> list[dict]:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def _as_predictor(G) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(G, Network):
        def predict(X: np.ndarray) -> np.ndarray:
            return forward_transfer(G, Tensor(X))[0].data
        return predict
    return G


def evaluate(G, corpus: Corpus, split: str = "val", batch: int = 64) -> tuple[float, float]:
    """Mean L1 over [-1, 1] pixels and pooled binary IoU of ink (+1) pixels.

    ``G`` is a network (run in eval mode) or any callable mapping an
    (n, 1, s, s) array of inputs to outputs.
    """
    pairs = corpus.select(split)
    if not pairs:
        raise CorpusError(f"split {split!r} is empty")
    predict = _as_predictor(G)
    was_training = G.training if isinstance(G, Network) else None
    if isinstance(G, Network):
        G.eval()
    abs_sum = 0.0
    count = 0
    inter = union = 0
    try:
        with no_grad():
            for start in range(0, len(pairs), batch):
                X, Y = stack_pairs(pairs[start:start + batch])
                out = np.asarray(predict(X.data), dtype=np.float64)
                abs_sum += float(np.abs(out - Y.data).sum())
                count += out.size
                pred_ink = out > 0
                true_ink = Y.data > 0
                inter += int(np.count_nonzero(pred_ink & true_ink))
                union += int(np.count_nonzero(pred_ink | true_ink))
    finally:
        if was_training is not None:
            G.training = was_training
    iou = 1.0 if union == 0 else inter / union
    return abs_sum / count, iou


# ------------------------------------------------------------------ checkpoint


def _net_tensors(prefix: str, net: Network) -> list[tuple[str, np.ndarray]]:
    out = [(f"{prefix}/{k}", p.data) for k, p in net.params.items()]
    out += [(f"{prefix}/buf/{k}", b) for k, b in net.buffers.items()]
    return out


def _opt_tensors(prefix: str, opt: Adam, names: list[str]) -> list[tuple[str, np.ndarray]]:
    out = [(f"{prefix}/t", np.asarray(opt.t))]
    for name, m, v in zip(names, opt.m, opt.v):
        out.append((f"{prefix}/m/{name}", m))
        out.append((f"{prefix}/v/{name}", v))
    return out


def _gen_param_names(state: TrainState) -> list[str]:
    names = [f"G/{k}" for k in state.G.params]
    if state.A is not None:
        names += [f"A/{k}" for k in state.A.params]
    return names


def state_tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    net = state.cfg.net
    lo, hi = net.taps
    meta = {
        "image_size": net.image_size,
        "base_width": net.base_width,
        "width_cap": net.width_cap,
        "leaky_slope": net.leaky_slope,
        "skip_mode": SKIP_MODES.index(net.skip_mode),
        "tap_lo": lo,
        "tap_hi": hi,
        "bn_momentum": net.bn_momentum,
        "bn_eps": net.bn_eps,
        "init_std": net.init_std,
        "use_supervise": int(state.cfg.use_supervise),
        "use_adversarial": int(state.cfg.use_adversarial),
    }
    out = ckpt.pack_scalars("cfg/", meta)
    for prefix, n in state.nets().items():
        out += _net_tensors(prefix, n)
    out += _opt_tensors("opt_g", state.opt_g, _gen_param_names(state))
    if state.opt_d is not None:
        out += _opt_tensors("opt_d", state.opt_d, [f"D/{k}" for k in state.D.params])
    out += ckpt.pack_scalars("meta/", {"step": state.step, "epoch": state.epoch, "best_val": state.best_val})
    out.append(("meta/rng", state.rng.state_words()))
    return out


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    ckpt.write_tensors(path, state_tensors(state))


def net_config_from_tensors(t: dict[str, np.ndarray]) -> NetConfig:
    def g(k):
        if f"cfg/{k}" not in t:
            raise ckpt.CheckpointError(f"checkpoint lacks cfg/{k}")
        return t[f"cfg/{k}"].item()

    return NetConfig(
        image_size=int(g("image_size")),
        base_width=int(g("base_width")),
        width_cap=int(g("width_cap")),
        leaky_slope=float(np.float32(g("leaky_slope"))),
        skip_mode=SKIP_MODES[int(g("skip_mode"))],
        tap_range=(int(g("tap_lo")), int(g("tap_hi"))),
        bn_momentum=float(np.float32(g("bn_momentum"))),
        bn_eps=float(np.float32(g("bn_eps"))),
        init_std=float(np.float32(g("init_std"))),
    )


def _fill_net(prefix: str, net: Network, t: dict[str, np.ndarray]) -> None:
    for k, p in net.params.items():
        key = f"{prefix}/{k}"
        if key not in t:
            raise ckpt.CheckpointError(f"checkpoint lacks {key}")
        if t[key].shape != p.shape:
            raise ckpt.CheckpointError(f"{key}: shape {t[key].shape} != expected {p.shape}")
        p.data = t[key].copy()
    for k, b in net.buffers.items():
        key = f"{prefix}/buf/{k}"
        if key not in t:
            raise ckpt.CheckpointError(f"checkpoint lacks {key}")
        net.buffers[k] = t[key].copy()


def _fill_opt(prefix: str, opt: Adam, names: list[str], t: dict[str, np.ndarray]) -> None:
    opt.t = int(t[f"{prefix}/t"].item())
    for i, name in enumerate(names):
        opt.m[i] = t[f"{prefix}/m/{name}"].copy()
        opt.v[i] = t[f"{prefix}/v/{name}"].copy()


def _cfg_key(net: NetConfig) -> dict:
    # floats travel through the archive as float32
    return {k: (np.float32(v) if isinstance(v, float) else v) for k, v in net.to_dict().items()}


def load_checkpoint(path: str | os.PathLike, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a full training state.

    Without ``cfg`` a default TrainConfig around the stored network config is
    used; pass the run's config to resume training with its hyperparameters.
    """
    t = ckpt.read_tensors(path)
    net_cfg = net_config_from_tensors(t)
    use_sup = bool(t["cfg/use_supervise"].item())
    use_adv = bool(t["cfg/use_adversarial"].item())
    if cfg is None:
        cfg = TrainConfig(net=net_cfg, use_supervise=use_sup, use_adversarial=use_adv)
    else:
        if _cfg_key(net_cfg) != _cfg_key(cfg.net):
            raise ckpt.CheckpointError(f"network config in checkpoint {net_cfg} differs from run config {cfg.net}")
        if (use_sup, use_adv) != (cfg.use_supervise, cfg.use_adversarial):
            raise ckpt.CheckpointError("ablation flags in checkpoint differ from run config")
    state = init_state(cfg)
    for prefix, n in state.nets().items():
        _fill_net(prefix, n, t)
    _fill_opt("opt_g", state.opt_g, _gen_param_names(state), t)
    if state.opt_d is not None:
        _fill_opt("opt_d", state.opt_d, [f"D/{k}" for k in state.D.params], t)
    state.step = int(t["meta/step"].item())
    state.epoch = int(t["meta/epoch"].item())
    state.best_val = float(t["meta/best_val"].item())
    state.rng.set_state_words(t["meta/rng"])
    return state


def load_transfer(path: str | os.PathLike) -> Network:
    """Load only the transfer network (what inference needs)."""
    t = ckpt.read_tensors(path, prefixes=("cfg/", "G/"))
    G = build_transfer(net_config_from_tensors(t), Rng(0))
    _fill_net("G", G, t)
    return G.eval()


# ------------------------------------------------------------------ loops


def train_loop(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | os.PathLike | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState, dict], bool | None] | None = None,
) -> tuple[TrainState, MetricsLog]:
    """Train from ``state`` (or a fresh one) until ``cfg.epochs`` epochs are done.

    Each epoch ends with a validation pass in eval mode and, with ``out_dir``,
    writes ``last.aegg``, ``best.aegg`` (lowest validation L1) and the CSVs.
    ``on_epoch`` may return True to stop early.
    """
    state = state or init_state(cfg)
    if state.cfg is not cfg:
        state.cfg = cfg
    mlog = MetricsLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    has_val = bool(corpus.select("val"))
    while state.epoch < cfg.epochs:
        state.set_mode(True)
        for X, Y in batch_iter(corpus, "train", cfg.batch, state.rng, cfg.augment, cfg.flip_p):
            mlog.append(train_step(state, X, Y))
        state.epoch += 1
        summary = {"epoch": state.epoch, "step": state.step}
        improved = False
        if has_val:
            l1, iou = evaluate(state.G, corpus, "val")
            summary.update(val_l1=l1, val_iou=iou)
            mlog.val.append(summary)
            l1_32 = float(np.float32(l1))
            if l1_32 < state.best_val:
                state.best_val = l1_32
                improved = True
        log.info("epoch %d step %d %s", state.epoch, state.step,
                 " ".join(f"{k}={v:.4f}" for k, v in summary.items() if k.startswith("val")))
        if out is not None:
            save_checkpoint(state, out / "last.aegg")
            if improved or not has_val:
                save_checkpoint(state, out / "best.aegg")
            mlog.write_csv(out / "metrics.csv")
            mlog.write_val_csv(out / "val_metrics.csv")
        if on_epoch is not None and on_epoch(state, summary):
            break
    return state, mlog


def fit_autoencoder(
    corpus: Corpus,
    net_cfg: NetConfig,
    epochs: int,
    skip_mode: str = "unet_concat",
    batch: int = 16,
    lr: float = 0.002,
    beta1: float = 0.5,
    seed: int = 0,
) -> tuple[Network, list[float]]:
    """Train a supervise-style autoencoder on the targets alone.

    Returns the net and the per-epoch validation L1 of reconstructing y.
    """
    net = build_generator(net_cfg, Rng(seed), skip_mode)
    net.kind = "supervise"
    opt = Adam(net.parameters(), lr, beta1)
    rng = Rng(seed + 1)
    ae_view = Corpus([dataclasses.replace(p, x=p.y) for p in corpus.pairs], corpus.split, corpus.style)
    history = []
    for _ in range(epochs):
        net.train()
        for _, Y in batch_iter(ae_view, "train", batch, rng):
            recon, _ = forward_supervise(net, Y)
            loss = loss_supervise(recon, Y)
            backward(loss)
            opt.step()
        predict = lambda X: forward_supervise(net, Tensor(X))[0].data  # noqa: E731
        net.eval()
        history.append(evaluate(predict, ae_view, "val")[0])
    return net, history
