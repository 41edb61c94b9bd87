"""Command-line entry point: ``ccnet {synth,train,eval,retrieve,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CCNetError


def _ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad recall list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("recall cutoffs must be positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccnet", description="Cycled composition retrieval")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,eval,retrieve,gradcheck}")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spec", type=Path, help="JSON synthetic spec (desk defaults if omitted)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--log", type=Path, help="loss log path (default: OUT.log.csv)")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("eval", help="Recall@K on a split")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", required=True)
    p.add_argument("--recall", type=_ks, default=(10, 50))
    p.add_argument("--ensemble", nargs="+", type=Path, default=[], metavar="CKPT")
    p.add_argument("--scorer", choices=("ccnet", "composition", "correction"), default="ccnet")
    p.add_argument("--report", type=Path, help="key-value report path (default: CKPT.SPLIT.recall.json)")
    p.add_argument(
        "--gallery",
        choices=("auto", "category", "split", "targets"),
        default="auto",
        help="candidate pool per query (default: whole category when known)",
    )

    p = sub.add_parser("retrieve", help="rank candidates for one query")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ref", required=True)
    p.add_argument("--caption", required=True, action="append", help="relative caption (repeat for two)")
    p.add_argument("--topk", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="check every parameter entry")
    return parser


def _load_model(path):
    from .checkpoint import load_checkpoint
    from .model import CCNet

    state, _ = load_checkpoint(path)
    return CCNet.from_state(state)


def cmd_synth(args) -> int:
    from .data.synthetic import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate_synthetic(spec, args.out)
    counts = ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items())
    print(f"wrote {len(ds.store)} images ({counts}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data.dataset import load_dataset
    from .train import TrainConfig, train

    cfg = TrainConfig.load(args.config)
    ds = load_dataset(args.data)
    log_path = args.log or args.out.with_name(args.out.name + ".log.csv")
    result = train(cfg, ds, out=args.out, log_path=log_path, resume=args.resume, progress=print)
    print(f"trained {len(result.log_rows)} steps in {result.seconds:.1f}s -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .data.dataset import load_dataset
    from .retrieval import evaluate

    ds = load_dataset(args.data)
    models = [_load_model(p) for p in [args.ckpt, *args.ensemble]]
    report = evaluate(models, ds, ds.split(args.split), args.recall, args.scorer, args.gallery)
    out = args.report or args.ckpt.with_name(f"{args.ckpt.name}.{args.split}.recall.json")
    report.write(out)
    sys.stdout.write(report.to_text())
    print(f"report -> {out}")
    return 0


def cmd_retrieve(args) -> int:
    from .data.dataset import load_dataset
    from .data.triplets import merge_captions
    from .errors import MissingIdError
    from .retrieval import combined_probability
    from .tensor import no_grad

    if len(args.caption) > 2:
        raise CCNetError("at most two captions per query")
    ds = load_dataset(args.data)
    model = _load_model(args.ckpt)
    if args.ref not in ds.store:
        raise MissingIdError(args.ref)
    if ds.image_categories is not None:
        cat = ds.image_categories.get(args.ref)
        gallery = sorted(i for i, c in ds.image_categories.items() if c == cat)
    else:
        gallery = sorted(ds.store.ids)
    tokens = merge_captions(args.caption)
    with no_grad():
        x_ref = model.images(*ds.store.batch([args.ref])).data
        t = model.captions([tokens], ds.words).data
        x_gal = model.images(*ds.store.batch(gallery)).data
        s_r, s_c = model.gallery_scores(x_ref, t, x_gal)
    ranked = combined_probability(s_r[0], s_c[0], gallery, query_id=args.ref)
    for rank, (cid, prob) in enumerate(ranked.top(args.topk), 1):
        print(f"{rank}\t{cid}\t{prob:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, grad_check

    result = grad_check(seed=args.seed, per_tensor=None if args.full else 4, raise_on_fail=False)
    for group, err in sorted(result.errors.items()):
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{group:<14} max rel err {err:.3e}  {status}")
    print(f"{result.checked} entries checked")
    bad = result.failures()
    if bad:
        print(f"gradient check failed: {sorted(bad)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CCNetError, OSError, KeyError) as exc:
        print(f"ccnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


cli_run = main

if __name__ == "__main__":
    sys.exit(main())
