"""Command line entry point: ``cpseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from cpseg.autodiff import Rng
from cpseg.checkpoint import load_checkpoint, save_checkpoint
from cpseg.config import TrainConfig
from cpseg.data.io import load_dataset, merge_dataset, write_dataset
from cpseg.data.synth import generate_dataset
from cpseg.data.taxonomy import default_taxonomy
from cpseg.evaluation import ablate_merge, ablate_prompts, evaluate
from cpseg.exceptions import CPSegError
from cpseg.gradcheck_suite import CHECKS, TOLERANCE, run_gradcheck
from cpseg.inference import prompts_for_image, read_image, segment_image
from cpseg.prompt_chain import PromptMode, restrict_chain
from cpseg.train import STREAM_EVAL_PROMPTS, train
from cpseg.validation import check_seeds

log = logging.getLogger("cpseg")


def _load_config(path: Optional[str]) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_synth(args) -> int:
    taxonomy = default_taxonomy()
    samples = generate_dataset(args.n, args.seed, tuple(args.size), taxonomy=taxonomy)
    if args.merge:
        samples, taxonomy = merge_dataset(samples, taxonomy)
    n_val = args.n // 5 if args.n_val is None else args.n_val
    write_dataset(samples, args.out, taxonomy, seed=args.seed, n_val=n_val)
    print(f"wrote {len(samples)} samples ({len(samples) - n_val} train / {n_val} val, K={taxonomy.K}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.prompt_mode:
        config = config.with_(prompt_mode=PromptMode.parse(args.prompt_mode).value)
    data = load_dataset(args.data)
    samples = data.split(args.split)
    result = train(config, samples, data.taxonomy,
                   callback=lambda epoch, loss: print(f"epoch {epoch} loss {loss:.5f}", flush=True))
    save_checkpoint(args.out, result.model, result.loss_trace)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    samples = data.val if args.split == "val" else data.split(args.split)
    report = evaluate(model, samples, data.taxonomy, merge=args.merge, timed=args.time)
    _write(args.report, report.to_csv(args.method))
    print(f"mIoU {100 * report.miou:.2f}  pixel accuracy {100 * report.pixel_accuracy:.2f}")
    if args.time:
        print(f"{report.runtime_seconds:.5f} s per image")
    return 0


def cmd_segment(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    # the model sees only what its prompting mode allows
    mode = model.config.mode
    prompts = restrict_chain(mode, prompts_for_image(args.image, args.prompts),
                             Rng(model.config.seed).child(STREAM_EVAL_PROMPTS))
    labels = segment_image(model, image, prompts, args.out, args.dump_thought_maps)
    print(f"wrote {args.out} ({labels.shape[0]}x{labels.shape[1]}, {len(prompts.nodes)} prompts, {mode.label})")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    seeds = check_seeds(args.seeds)
    data = load_dataset(args.data)
    run = ablate_prompts if args.kind == "prompts" else ablate_merge
    result = run(config, data.train, data.val, data.taxonomy, seeds)
    _write(args.report, result.to_csv())
    for row in result.rows:
        print(f"{row.label:<26} mIoU {100 * row.mean:.2f} +- {100 * row.sd:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _load_config(args.config)
    results = run_gradcheck(config, args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} max rel error {r.max_error:.3e} ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpseg", description="Chain-of-thought prompted flood segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[64, 64])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--merge", action="store_true", help="collapse flooded/non-flooded pairs")
    p.add_argument("--n-val", type=int, default=None, help="validation samples (default n/5)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON or TOML config")
    p.add_argument("--out", required=True)
    p.add_argument("--prompt-mode", default=None, help="standard, two, random or cot")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--merge", action="store_true", help="score over merged classes")
    p.add_argument("--report", required=True)
    p.add_argument("--time", action="store_true", help="add seconds per image")
    p.add_argument("--split", default="val")
    p.add_argument("--method", default="CPSeg", help="label of the report row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts", default=None, help="prompts.jsonl (default: the image's dataset)")
    p.add_argument("--dump-thought-maps", default=None, metavar="DIR")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("ablate", help="multi-seed ablation")
    p.add_argument("kind", choices=("prompts", "merge"))
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config", default=None)
    p.add_argument("--only", nargs="+", choices=sorted(CHECKS), default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CPSegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
