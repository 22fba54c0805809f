"""Command-line entry point: ``hoiprompt <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError, DataError, HOIError, InvalidConfigError

logger = logging.getLogger("hoiprompt")


def _cmd_train(args) -> int:
    from .config import load_config
    from .runtime import train

    cfg = load_config(args.config)
    result = train(cfg, resume=args.resume)
    last = result.losses[-1] if result.losses else {}
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": len(result.losses),
                      "final_total": last.get("total")}))
    return 0


def _cmd_eval(args) -> int:
    from .config import load_config
    from .runtime import run_eval

    cfg = load_config(args.config)
    report = run_eval(cfg, args.checkpoint, split_path=args.split, out_dir=args.out)
    summary = {k: report[k].get("full") for k in ("default", "known_objects")}
    for k in ("default", "known_objects"):
        if "zero_shot" in report[k]:
            summary[k + "_zero_shot"] = report[k]["zero_shot"]
    print(json.dumps(summary))
    return 0


def _cmd_infer(args) -> int:
    from .runtime import infer

    texts: List[str] = list(args.texts or [])
    if args.text_file:
        path = Path(args.text_file)
        if not path.exists():
            raise DataError(f"text file not found: {path}")
        texts.extend(line.strip() for line in path.read_text().splitlines() if line.strip())
    doc, json_path, png_path = infer(args.checkpoint, args.image, texts, open_mode=args.open,
                                     out_prefix=args.out, top_k=args.top_k, threshold=args.threshold)
    print(json.dumps({"detections": len(doc["detections"]), "json": str(json_path), "image": str(png_path)}))
    return 0


def _cmd_gen_synth(args) -> int:
    from .data import SynthSpec, generate_synthetic, hoi_counts, save_dataset

    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    try:
        spec = SynthSpec.from_json(json.loads(spec_path.read_text()))
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"cannot parse {spec_path}: {exc}") from exc
    samples, registry = generate_synthetic(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out / "annotations.jsonl", registry, image_dir=None if args.inline else "images")
    registry.save(out / "registry.json")
    counts = hoi_counts(samples, registry)
    (out / "counts.json").write_text(json.dumps({str(k): v for k, v in sorted(counts.items())}, indent=2) + "\n")
    print(json.dumps({"samples": len(samples), "hoi_categories": registry.num_hois, "out": str(out)}))
    return 0


def _cmd_gen_splits(args) -> int:
    from .data import CategoryRegistry, make_split

    counts_path = Path(args.counts)
    if not counts_path.exists():
        raise DataError(f"counts file not found: {counts_path}")
    registry_path = Path(args.registry) if args.registry else counts_path.with_name("registry.json")
    if not registry_path.exists():
        raise DataError(f"registry file not found: {registry_path}")
    registry = CategoryRegistry.load(registry_path)
    try:
        counts = {int(k): int(v) for k, v in json.loads(counts_path.read_text()).items()}
    except (ValueError, AttributeError) as exc:
        raise DataError(f"malformed counts file {counts_path}: {exc}") from exc
    split = make_split(registry, counts, args.kind, args.k)
    split.save(args.out)
    print(json.dumps({"kind": split.kind, "unseen": len(split.unseen_hoi_ids), "seen": len(split.seen_hoi_ids),
                      "digest": split.digest()}))
    return 0


def _make_backend(spec: str, timeout: float, retries: int):
    from .knowledge import FixtureBackend, HTTPLLMBackend

    if spec.startswith(("http://", "https://")):
        return HTTPLLMBackend(spec, timeout=timeout, retries=retries)
    if spec.startswith("fixture:"):
        spec = spec[len("fixture:"):]
    path = Path(spec)
    if not path.is_dir():
        raise ConfigError(f"backend must be an http(s) URL or a fixture directory, got {spec!r}")
    return FixtureBackend(path)


def _cmd_retrieve(args) -> int:
    from .data import CategoryRegistry
    from .knowledge import KnowledgeCache, KnowledgeClient

    registry_path = Path(args.registry)
    if not registry_path.exists():
        raise DataError(f"registry file not found: {registry_path}")
    registry = CategoryRegistry.load(registry_path)
    backend = _make_backend(args.backend, args.timeout, args.retries)
    cache_path = Path(args.cache) if args.cache else registry_path.with_name("knowledge.jsonl")
    client = KnowledgeClient(backend, KnowledgeCache(cache_path))
    entries = client.retrieve_all(registry, args.n)
    print(json.dumps({"entries": len(entries), "cache": str(cache_path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoiprompt", description="HOI detection with foundation-model prompts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="zero-shot split file; must match the one used for training")
    p.add_argument("--out", help="output directory for report.json, report.csv, detections.jsonl")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="detect interactions in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--texts", nargs="+", help="interaction phrases or descriptions")
    group.add_argument("--text-file", help="file with one text per line")
    p.add_argument("--open", action="store_true", help="score against the given texts")
    p.add_argument("--out", help="output prefix (default: next to the image)")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.0)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON generator spec")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--inline", action="store_true", help="store pixels inside the JSONL instead of PNG files")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("gen-splits", help="generate a zero-shot split")
    p.add_argument("--kind", required=True, choices=["RF-UC", "NF-UC", "UO", "UV"])
    p.add_argument("--k", type=int, help="number of unseen categories (objects/verbs for UO/UV)")
    p.add_argument("--counts", required=True, help="JSON map of hoi id to training count")
    p.add_argument("--registry", help="registry JSON (default: registry.json next to --counts)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_splits)

    p = sub.add_parser("retrieve-knowledge", help="fetch category descriptions into the cache")
    p.add_argument("--registry", required=True)
    p.add_argument("--n", type=int, required=True, help="word limit")
    p.add_argument("--backend", required=True, help="fixture directory or http(s) endpoint")
    p.add_argument("--cache", help="cache JSONL (default: knowledge.jsonl next to the registry)")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=_cmd_retrieve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HOIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
