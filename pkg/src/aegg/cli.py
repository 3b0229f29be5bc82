"""``aegg`` command line: gen-data, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError
from .glyph_data import CorpusError, PGMError, StyleTransform, load_corpus, save_corpus, split_corpus, stack_pairs, synth_corpus
from .models import ConfigError

log = logging.getLogger("aegg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def write_run_manifest(out_dir: Path, command: str, *, config=None, corpus=None, seed=None) -> None:
    manifest = {
        "command": command,
        "config": str(config) if config is not None else None,
        "corpus": str(corpus) if corpus is not None else None,
        "seed": seed,
        "out": str(out_dir),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args) -> int:
    if args.size < 16 or args.size & (args.size - 1):
        raise UsageError(f"--size must be a power of two >= 16, got {args.size}")
    if args.chars < 2:
        raise UsageError("--chars must be >= 2")
    if not 0 < args.val_fraction < 1:
        raise UsageError("--val-fraction must be in (0, 1)")
    try:
        style = StyleTransform.parse(args.style, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    corpus = split_corpus(synth_corpus(args.chars, args.size, style, args.seed), args.val_fraction, args.seed)
    out = Path(args.out)
    try:
        save_corpus(corpus, out)
    except OSError as e:
        log.error("cannot write corpus to %s: %s", out, e)
        return EXIT_RUNTIME
    write_run_manifest(out, "gen-data", corpus=out, seed=args.seed)
    n_val = len(corpus.select("val"))
    print(f"wrote {len(corpus)} pairs ({len(corpus) - n_val} train / {n_val} val) to {out}")
    return EXIT_OK


def load_config(path: str):
    from .training import TrainConfig

    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})") from None
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .training import load_checkpoint, train_loop

    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    corpus = load_corpus(args.corpus, side=cfg.net.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
    write_run_manifest(out, "train", config=args.config, corpus=args.corpus, seed=cfg.seed)
    state = load_checkpoint(args.resume, cfg) if args.resume else None
    state, mlog = train_loop(cfg, corpus, out, state)
    plot_losses(mlog.steps, mlog.val, out / "loss_curves.png")
    last = mlog.val[-1] if mlog.val else {}
    print(f"trained {state.epoch} epochs / {state.step} steps; "
          + " ".join(f"{k}={last[k]:.6f}" for k in ("val_l1", "val_iou") if k in last))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import infer_files
    from .training import load_transfer

    if args.median < 1 or args.median % 2 == 0:
        raise UsageError(f"--median must be an odd integer >= 1, got {args.median}")
    G = load_transfer(args.ckpt)
    written = infer_files(G, args.input, args.out, args.median, args.threshold)
    write_run_manifest(Path(args.out), "infer", seed=None)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .engine import no_grad
    from .glyph_data import from_tensor
    from .models import forward_transfer
    from .plotting import plot_samples
    from .training import evaluate, load_transfer

    G = load_transfer(args.ckpt)
    corpus = load_corpus(args.corpus, side=G.cfg.image_size)
    l1, iou = evaluate(G, corpus, args.split)
    line = f"l1={l1:.6f} iou={iou:.6f}"
    print(line)
    out = Path(args.out) if args.out else Path(args.ckpt).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{args.split}.txt").write_text(line + "\n", encoding="utf-8")
    pairs = corpus.select(args.split)[: args.samples]
    if pairs:
        X, Y = stack_pairs(pairs)
        with no_grad():
            gen, _ = forward_transfer(G, X)
        rows = [(p.x.pixels, from_tensor(gen.data[i:i + 1]).pixels, p.y.pixels) for i, p in enumerate(pairs)]
        plot_samples(rows, out / f"eval_{args.split}_samples.png")
    write_run_manifest(out, "eval", corpus=args.corpus)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_all

    results = run_all(size=args.size, tol=args.tol, h=args.h, seed=args.seed)
    for name, rep in results:
        print(rep.line(name))
    failed = [n for n, r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aegg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"aegg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic paired glyph corpus")
    g.add_argument("--chars", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--style", default="thicken+shear",
                   help="identity, thicken, thin, shear, wave, or a '+'-joined chain; 'kind:magnitude' overrides")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint training of supervise/transfer/discriminator")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None, help="override config epochs")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="stylize PGM glyphs with the transfer net only")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", nargs="+", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--median", type=int, default=3)
    i.add_argument("--threshold", type=int, default=127)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="validation L1 and binary IoU of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--out", default=None)
    e.add_argument("--samples", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every op and the tiny nets")
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--tol", type=float, default=5e-3)
    c.add_argument("--h", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("AEGG_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"aegg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, PGMError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"aegg {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
