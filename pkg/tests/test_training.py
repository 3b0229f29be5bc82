import json
import math

import numpy as np
import pytest

from aegg.checkpoint import CheckpointError, read_tensors, write_tensors
from aegg.engine import BCE_CLAMP, Rng, Tensor, backward, frozen, get_tape
from aegg.glyph_data import StyleTransform, batch_iter, split_corpus, synth_corpus
from aegg.models import ConfigError, NetConfig, build_discriminator, forward_transfer
from aegg.training import (
    CSV_FIELDS,
    MetricsLog,
    TrainConfig,
    evaluate,
    init_state,
    load_checkpoint,
    load_transfer,
    loss_adversarial_d,
    loss_adversarial_g,
    loss_reconstruct,
    loss_supervise,
    save_checkpoint,
    state_tensors,
    total_g_loss,
    train_loop,
    train_step,
)

TINY = NetConfig(image_size=16, base_width=4, width_cap=16)


def tiny_cfg(**kw):
    base = dict(net=TINY, batch=4, epochs=1, augment=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return split_corpus(synth_corpus(12, 16, StyleTransform.parse("thicken"), 0), 0.25, 0)


def pm1(shape, seed):
    return Tensor(np.where(np.random.default_rng(seed).random(shape) < 0.5, 1.0, -1.0))


# ---------------------------------------------------------------- losses


def test_loss_supervise_cases():
    y = pm1((2, 1, 4, 4), 0)
    assert loss_supervise(y, y).item() == 0.0
    assert loss_supervise(Tensor(-y.data), y).item() == pytest.approx(2.0)
    r = Tensor(np.random.default_rng(1).normal(size=y.shape))
    assert loss_supervise(r, y).item() == pytest.approx(np.abs(r.data - y.data).mean(), rel=1e-6)
    get_tape().clear()


def test_loss_reconstruct_linearity():
    T = [Tensor(np.full((1, 2, 2, 2), 0.5)), Tensor(np.full((1, 2, 4, 4), 0.25))]
    S = [Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 4, 4)))]
    assert loss_reconstruct(T, S, [1, 1]).item() == pytest.approx(0.75)
    assert loss_reconstruct(T, S, [2, 2]).item() == pytest.approx(1.5)
    assert loss_reconstruct(S, S, [1, 1]).item() == 0.0
    with pytest.raises(ValueError):
        loss_reconstruct(T, S, [1])
    get_tape().clear()


def test_loss_reconstruct_detaches_supervise_taps():
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    s = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    backward(loss_reconstruct([t], [s], [1.0]))
    assert t.grad is not None and s.grad is None


def _const_disc(p):
    """Discriminator whose head emits logit(p) for every input."""
    D = build_discriminator(NetConfig(image_size=8, base_width=2, width_cap=4), Rng(0))
    for name, prm in D.named_parameters():
        if name.endswith("weight"):
            prm.data[:] = 0
    D.p("head.conv.bias").data[:] = math.log(p / (1 - p))
    return D


def test_adversarial_d_cases():
    x, y = pm1((3, 1, 8, 8), 0), pm1((3, 1, 8, 8), 1)
    assert loss_adversarial_d(_const_disc(0.5), x, y, y).item() == pytest.approx(2 * math.log(2), rel=1e-6)
    get_tape().clear()


def test_adversarial_perfect_d_hits_clamp():
    # D saturates to exactly 1 on the real input and 0 on the fake one
    D = build_discriminator(NetConfig(image_size=8, base_width=2, width_cap=4), Rng(0))
    for name, prm in D.named_parameters():
        if name.endswith("weight"):
            prm.data[:] = 0
    x = pm1((2, 1, 8, 8), 0)
    D.p("head.conv.bias").data[:] = 200.0
    real = loss_adversarial_d(D, x, x, x).item()
    get_tape().clear()
    assert real == pytest.approx(-math.log(BCE_CLAMP), rel=1e-4)  # fake term clamps
    D.p("head.conv.bias").data[:] = 60.0
    assert loss_adversarial_g(D, x, x).item() == pytest.approx(-math.log(1 - BCE_CLAMP), abs=1e-6)
    get_tape().clear()


def test_adversarial_g_half():
    x = pm1((2, 1, 8, 8), 0)
    assert loss_adversarial_g(_const_disc(0.5), x, x).item() == pytest.approx(math.log(2), rel=1e-6)
    assert loss_adversarial_g(_const_disc(0.5), x, x, "saturating").item() == pytest.approx(-math.log(2), rel=1e-6)
    get_tape().clear()


def test_total_g_loss_oracle_and_ablations():
    parts = {"adv_g": 0.01, "sup": 0.02, "rec": 0.03}
    cfg = TrainConfig(net=TINY)
    assert total_g_loss(cfg, parts) == pytest.approx(5.01, abs=1e-6)
    assert total_g_loss(TrainConfig(net=TINY, use_adversarial=False), parts) == pytest.approx(5.0, abs=1e-6)
    assert total_g_loss(TrainConfig(net=TINY, use_supervise=False), parts) == pytest.approx(0.01, abs=1e-6)
    assert total_g_loss(cfg, {"adv_g": 0.0, "sup": 0.0, "rec": 0.0}) == 0.0
    assert total_g_loss(cfg, dict(parts, pix=0.5)) == pytest.approx(55.01, abs=1e-6)
    t = total_g_loss(cfg, {k: Tensor(np.float32(v)) for k, v in parts.items()})
    assert t.item() == pytest.approx(5.01, rel=1e-6)
    get_tape().clear()


# ---------------------------------------------------------------- config


def test_config_roundtrip_and_field_errors():
    cfg = TrainConfig(net=TINY, lambda_s=3.0)
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError, match="config.lr"):
        TrainConfig.from_dict({"lr": "fast"})
    with pytest.raises(ConfigError, match="config.bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="lambda_j"):
        TrainConfig(net=TINY, lambda_j=[1.0])
    with pytest.raises(ConfigError):
        TrainConfig(net=TINY, batch=0)


# ---------------------------------------------------------------- steps


def _batch(corpus, n=4):
    return next(iter(batch_iter(corpus, "train", n, Rng(0))))


def _grads(net):
    return {k: (None if p.grad is None else p.grad.copy()) for k, p in net.named_parameters()}


def test_gradient_isolation_d_step(corpus):
    s = init_state(tiny_cfg())
    X, Y = _batch(corpus)
    fake, _ = forward_transfer(s.G, X)
    backward(loss_adversarial_d(s.D, X, Y, fake))
    assert all(p.grad is None for p in s.G.parameters() + s.A.parameters())
    assert all(p.grad is not None for p in s.D.parameters())


def test_gradient_isolation_g_step(corpus):
    s = init_state(tiny_cfg())
    X, Y = _batch(corpus)
    gen, _ = forward_transfer(s.G, X)
    with frozen(s.D.parameters()):
        backward(loss_adversarial_g(s.D, X, gen))
    assert all(p.grad is None for p in s.D.parameters())
    assert all(p.grad is not None and np.any(p.grad) for p in s.G.parameters())


def _ga_grads(lambda_r, corpus):
    s = init_state(tiny_cfg(lambda_r=lambda_r))
    s.opt_g.step = lambda: None  # keep grads for inspection
    X, Y = _batch(corpus)
    train_step(s, X, Y)
    return _grads(s.A), _grads(s.G)


def test_tap_detachment(corpus):
    a1, g1 = _ga_grads(100.0, corpus)
    a2, g2 = _ga_grads(250.0, corpus)
    for k in a1:
        np.testing.assert_array_equal(a1[k], a2[k])
    assert any(not np.array_equal(g1[k], g2[k]) for k in g1)


def test_ablation_no_supervise_no_adversarial(corpus):
    s = init_state(tiny_cfg(use_supervise=False, use_adversarial=False))
    assert s.A is None and s.D is None
    rec = train_step(s, *_batch(corpus))
    assert rec["l_sup"] == rec["l_rec"] == rec["l_adv_d"] == rec["l_adv_g"] == 0.0
    assert rec["total_g"] == pytest.approx(100 * rec["l_pix"], rel=1e-5)


def test_train_step_determinism(corpus):
    runs = []
    for _ in range(2):
        s = init_state(tiny_cfg())
        runs.append([train_step(s, X, Y) for X, Y in batch_iter(corpus, "train", 4, Rng(5))])
    assert runs[0] == runs[1]
    assert all(math.isfinite(v) for r in runs[0] for v in r.values())


# ---------------------------------------------------------------- loop and checkpoints


def test_train_loop_epochs_and_files(corpus, tmp_path):
    cfg = tiny_cfg(epochs=2)
    state, mlog = train_loop(cfg, corpus, tmp_path)
    assert state.epoch == 2 and state.step == 2 * math.ceil(9 / 4)
    assert len(mlog.steps) == state.step and len(mlog.val) == 2
    for name in ("last.aegg", "best.aegg", "metrics.csv", "val_metrics.csv"):
        assert (tmp_path / name).exists()
    text = (tmp_path / "metrics.csv").read_bytes()
    assert text.startswith(b"step,l_sup,l_rec,l_adv_d,l_adv_g,total_g\n") and b"\r" not in text
    rows = MetricsLog.read_csv(tmp_path / "metrics.csv")
    assert [r["step"] for r in rows] == list(range(1, state.step + 1))
    assert list(rows[0]) == list(CSV_FIELDS)


def test_validation_uses_eval_mode(corpus):
    cfg = tiny_cfg()
    seen = []

    def spy(state, summary):
        seen.append(state.G.training)

    state, _ = train_loop(cfg, corpus, on_epoch=spy)
    # evaluate restores the training flag, and its result matches an explicit eval-mode pass
    assert seen == [True]
    l1, _ = evaluate(state.G, corpus)
    state.G.eval()
    l1_eval, _ = evaluate(state.G, corpus)
    assert l1 == l1_eval


def test_split_run_resume_bit_exact(corpus, tmp_path):
    full_cfg = tiny_cfg(epochs=2)
    _, full = train_loop(full_cfg, corpus, tmp_path / "full")
    _, first = train_loop(tiny_cfg(epochs=1), corpus, tmp_path / "a")
    resumed = load_checkpoint(tmp_path / "a" / "last.aegg", tiny_cfg(epochs=2))
    _, second = train_loop(tiny_cfg(epochs=2), corpus, tmp_path / "b", resumed)
    assert first.steps + second.steps == full.steps
    a = read_tensors(tmp_path / "full" / "last.aegg")
    b = read_tensors(tmp_path / "b" / "last.aegg")
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_byte_identity(corpus, tmp_path):
    s = init_state(tiny_cfg())
    train_step(s, *_batch(corpus))
    save_checkpoint(s, tmp_path / "one.aegg")
    save_checkpoint(load_checkpoint(tmp_path / "one.aegg"), tmp_path / "two.aegg")
    assert (tmp_path / "one.aegg").read_bytes() == (tmp_path / "two.aegg").read_bytes()
    names = [n for n, _ in state_tensors(s)]
    stored = read_tensors(tmp_path / "one.aegg")
    assert list(stored) == names
    assert all(stored[n].shape == np.asarray(a).shape for n, a in state_tensors(s))


def test_load_transfer_only_reads_transfer(corpus, tmp_path):
    s = init_state(tiny_cfg())
    save_checkpoint(s, tmp_path / "c.aegg")
    G = load_transfer(tmp_path / "c.aegg")
    assert not G.training
    for (k, p), (_, q) in zip(G.named_parameters(), s.G.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_checkpoint_errors(tmp_path):
    write_tensors(tmp_path / "ok.aegg", [("a", np.arange(6).reshape(2, 3))])
    raw = bytearray((tmp_path / "ok.aegg").read_bytes())
    np.testing.assert_array_equal(read_tensors(tmp_path / "ok.aegg")["a"], np.arange(6).reshape(2, 3))

    bad = bytearray(raw)
    bad[0] ^= 0xFF
    (tmp_path / "magic.aegg").write_bytes(bad)
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(tmp_path / "magic.aegg")

    ver = bytearray(raw)
    ver[4] = 9
    (tmp_path / "ver.aegg").write_bytes(ver)
    with pytest.raises(CheckpointError, match="version"):
        read_tensors(tmp_path / "ver.aegg")

    (tmp_path / "trunc.aegg").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_tensors(tmp_path / "trunc.aegg")

    with pytest.raises(CheckpointError, match="duplicate"):
        write_tensors(tmp_path / "dup.aegg", [("a", np.zeros(1)), ("a", np.zeros(1))])


def test_resume_rejects_other_config(corpus, tmp_path):
    s = init_state(tiny_cfg())
    save_checkpoint(s, tmp_path / "c.aegg")
    other = TrainConfig(net=NetConfig(image_size=16, base_width=8, width_cap=16))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.aegg", other)


# ---------------------------------------------------------------- evaluate


def test_evaluate_oracles():
    ident = split_corpus(synth_corpus(8, 16, StyleTransform(), 0), 0.5, 0)
    assert evaluate(lambda X: X, ident) == (0.0, 1.0)
    assert evaluate(lambda X: -X, ident)[1] == 0.0

    thick = split_corpus(synth_corpus(8, 16, StyleTransform.parse("thicken"), 0), 0.5, 0)
    inter = union = 0
    for p in thick.select("val"):
        xi, yi = p.x.pixels == 255, p.y.pixels == 255
        inter += int(np.sum(xi & yi))
        union += int(np.sum(xi | yi))
    l1, iou = evaluate(lambda X: X, thick)
    assert iou == pytest.approx(inter / union)
    assert l1 > 0


def test_evaluate_empty_split():
    c = synth_corpus(4, 16, StyleTransform(), 0)
    with pytest.raises(Exception, match="empty"):
        evaluate(lambda X: X, c, "val")
