"""``swift`` command line: run, bench, model gen/inspect.

Exit codes: 0 success, 2 config error, 3 data error, 4 engine error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .bench import ingest_jsonl, load_stream, run_benchmark, run_requests, write_csv, write_report
from .config import load_config
from .errors import BadConfig, BadPlantIndex, DatasetError, IoError, ModelFormatError, SwiftError
from .model_io import ArchConfig, describe, load_bundle, save_bundle
from .orchestrator import GenerationRequest
from .synthetic import make_synthetic_model

log = logging.getLogger("swiftsd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ENGINE = 0, 2, 3, 4

ENGINE_FLAGS = {
    "--mode": dict(choices=["greedy", "sample"]),
    "--temperature": dict(type=float),
    "--top-p": dict(type=float),
    "--seed": dict(type=int),
    "--max-new-tokens": dict(type=int),
    "--epsilon": dict(type=float),
    "--max-draft": dict(type=int),
    "--gamma": dict(type=int),
    "--max-opt-steps": dict(type=int),
    "--bayes-interval": dict(type=int),
    "--patience": dict(type=int),
    "--score-target": dict(type=float),
    "--skip-ratio": dict(type=float),
    "--alpha-tolerance": dict(type=float),
}


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="SWFT1 model file")
    p.add_argument("--config", help="flat YAML/JSON file with engine keys")
    for flag, kw in ENGINE_FLAGS.items():
        p.add_argument(flag, default=None, **kw)
    p.add_argument("--zero-mask", action="store_true", default=None, help="diagnostic: draft with the full model")
    p.add_argument("--no-optimize", dest="optimize", action="store_false", default=None)
    p.add_argument("--no-vanilla", action="store_true", help="skip the vanilla baseline run")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write per-call records here")


def _env_seed(default):
    raw = os.environ.get("SWIFT_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise BadConfig(f"SWIFT_SEED must be an integer, got {raw!r}") from None


def _engine_config(args):
    overrides = {flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_")) for flag in ENGINE_FLAGS}
    overrides["zero_mask"] = args.zero_mask
    overrides["optimize"] = args.optimize
    overrides["seed"] = _env_seed(overrides["seed"])
    return load_config(args.config, **overrides)


def _emit(result, args) -> None:
    if args.report:
        write_report(result, args.report)
    if args.csv:
        write_csv(result, args.csv)
    rep = result.report
    print(
        f"tokens={rep.n_tokens} M={rep.M:.3f} alpha={rep.alpha:.3f} r={rep.r:.3f} "
        f"E(spd)={rep.expected_speedup if rep.expected_speedup is None else round(rep.expected_speedup, 3)} "
        f"wall_speedup={rep.wall_speedup if rep.wall_speedup is None else round(rep.wall_speedup, 3)}",
        file=sys.stderr,
    )


def cmd_run(args) -> int:
    config = _engine_config(args)
    bundle = load_bundle(args.model)
    tok = bundle.tokenizer
    if args.dataset:
        reqs = ingest_jsonl(args.dataset, args.template, tok, config)
        if args.count is not None:
            reqs = reqs[: args.count]
    elif args.prompt is not None:
        ids = [tok.bos_id] + tok.encode(args.prompt)
        reqs = [GenerationRequest.from_config(ids, config, stop_tokens=frozenset({tok.eos_id}))]
    else:
        raise BadConfig("one of --prompt or --dataset is required")
    result = run_requests(bundle, [("run", reqs)], config, vanilla=not args.no_vanilla)
    for out in result.outputs:
        print(tok.decode(out))
    _emit(result, args)
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _engine_config(args)
    bundle = load_bundle(args.model)
    stream = load_stream(args.stream)
    result = run_benchmark(bundle, stream, config, vanilla=not args.no_vanilla)
    _emit(result, args)
    if not args.report:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _parse_plant(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise BadConfig(f"--plant expects comma-separated integers, got {text!r}") from None


def cmd_model_gen(args) -> int:
    seed = _env_seed(args.seed)
    cfg = ArchConfig(
        n_blocks=args.blocks,
        d_model=args.dmodel,
        n_heads=args.heads,
        d_ff=args.dff or 2 * args.dmodel,
        vocab_size=args.vocab,
        max_seq=args.max_seq,
    )
    try:
        bundle = make_synthetic_model(seed, cfg, _parse_plant(args.plant))
    except BadPlantIndex as exc:
        raise BadConfig(str(exc)) from None
    save_bundle(bundle, args.out)
    print(json.dumps(describe(bundle), indent=2))
    return EXIT_OK


def cmd_model_inspect(args) -> int:
    print(json.dumps(describe(load_bundle(args.path)), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swift", description="On-the-fly self-speculative decoding")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="generate for a prompt or a JSONL dataset")
    _add_engine_flags(p)
    p.add_argument("--prompt")
    p.add_argument("--dataset")
    p.add_argument("--template", default="{prompt}")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a multi-segment stream and report metrics")
    _add_engine_flags(p)
    p.add_argument("--stream", required=True, help="YAML/JSON stream spec")
    p.set_defaults(func=cmd_bench)

    model = sub.add_parser("model", help="model file utilities")
    msub = model.add_subparsers(dest="model_command", required=True)
    g = msub.add_parser("gen", help="write a seeded synthetic model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blocks", type=int, default=4)
    g.add_argument("--dmodel", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--dff", type=int)
    g.add_argument("--vocab", type=int, default=259)
    g.add_argument("--max-seq", type=int, default=512)
    g.add_argument("--plant", help="comma-separated no-op sublayer indices")
    g.add_argument("--out", default="model.swft")
    g.set_defaults(func=cmd_model_gen)
    i = msub.add_parser("inspect", help="print a model summary")
    i.add_argument("path")
    i.set_defaults(func=cmd_model_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ModelFormatError, IoError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SwiftError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
