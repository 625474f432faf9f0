"""Command-line entry point: ``sci-reid {gen,train,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
Structured outputs are JSON Lines; each file starts with a config record.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .errors import ContractError, SciError
from .evalkit import PROTOCOLS, EvalResult, parse_protocols
from .pipeline import RunConfig, ablate, evaluate_model, load_dataset, model_from_checkpoint, to_checkpoint, train
from .synthdata import MANIFEST_NAME, save

log = logging.getLogger("sci_reid")

CHECKPOINT_NAME = "checkpoint.sci"
TRAIN_LOG_NAME = "train_log.jsonl"
METRICS_NAME = "metrics.jsonl"
ABLATION_NAME = "ablation.jsonl"


class UsageError(Exception):
    pass


class OutputExistsError(SciError):
    """Refusing to overwrite existing outputs without ``--force``."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _protocol_list(text: str) -> List[str]:
    try:
        return [p.mode for p in parse_protocols(text)]
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=_seed, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--protocol", type=_protocol_list,
                        help=f"comma-separated subset of {', '.join(PROTOCOLS)}")
    common.add_argument("--kmax", type=_positive_int, help="longest CMC rank reported")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sci-reid", description="Cloth-changing re-id at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="two-stage training, writes a checkpoint")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--no-sse", action="store_true", help="single identity prompt, no clothing removal")
    p.add_argument("--no-sim", action="store_true", help="disable the text-guided refinement module")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from the checkpoint config)")
    p = sub.add_parser("ablate", parents=[common], help="train and compare the four variants")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.protocol:
        d["protocols"] = args.protocol
    if args.kmax:
        d["k_max"] = args.kmax
    if getattr(args, "no_sse", False):
        d["use_sse"] = False
    if getattr(args, "no_sim", False):
        d["use_sim"] = False
    return RunConfig.from_dict(d)


def _prepare_out(out: Path, names: List[str], force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise OutputExistsError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_jsonl(path: Path, records: List[Dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _config_record(cfg: RunConfig, **extra) -> Dict:
    return {"type": "config", "seed": cfg.seed, "config": cfg.to_dict(), **extra}


def _emit(record: Dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_gen(args) -> Dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, [MANIFEST_NAME], args.force)
    ds = load_dataset(cfg, None)
    save(ds, out)
    rec = {"type": "gen", "out": str(out), "counts": ds.counts(), "seed": cfg.seed, "data": ds.config}
    _emit(rec)
    return rec


def cmd_train(args) -> Dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    ds = load_dataset(cfg, args.data)
    _prepare_out(out, [CHECKPOINT_NAME, TRAIN_LOG_NAME], args.force)
    run = train(cfg, ds)
    save_checkpoint(to_checkpoint(run), out / CHECKPOINT_NAME)
    digest = file_sha256(out / CHECKPOINT_NAME)
    rows = [dict(type="epoch", **r) for r in run.log_rows]
    _write_jsonl(out / TRAIN_LOG_NAME, [_config_record(cfg, data=args.data)] + rows)
    rec = {"type": "train", "checkpoint": str(out / CHECKPOINT_NAME), "sha256": digest,
           "epochs_logged": len(rows), "seed": cfg.seed}
    _emit(rec)
    return rec


def cmd_eval(args) -> Dict:
    ckpt_cfg, model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    d = ckpt_cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = RunConfig.from_dict(d)
    protocols = args.protocol or cfg.protocols
    k_max = args.kmax or cfg.k_max
    out = Path(args.out)
    ds = load_dataset(cfg, args.data)
    _prepare_out(out, [METRICS_NAME], args.force)
    results = evaluate_model(model, ds, protocols, k_max)
    records = [_config_record(cfg, checkpoint=str(args.checkpoint), data=args.data,
                              protocols=protocols, k_max=k_max)]
    records += [dict(type="metrics", **res.to_record()) for res in results.values()]
    _write_jsonl(out / METRICS_NAME, records)
    for rec in records[1:]:
        _emit({k: rec[k] for k in ("protocol", "rank1", "map", "num_valid_queries") if k in rec})
    return {m: r for m, r in results.items()}


def read_metrics(path) -> Dict[str, EvalResult]:
    out = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "metrics":
                out[rec["protocol"]] = EvalResult.from_record(rec)
    return out


def cmd_ablate(args) -> List[Dict]:
    cfg = resolve_config(args)
    out = Path(args.out)
    ds = load_dataset(cfg, args.data)
    _prepare_out(out, [ABLATION_NAME], args.force)
    rows = ablate(cfg, ds)
    _write_jsonl(out / ABLATION_NAME, [_config_record(cfg, data=args.data)] + [dict(type="ablation", **r) for r in rows])
    print(f"{'variant':<10} {'protocol':<15} {'rank1':>7} {'mAP':>7}")
    for r in rows:
        print(f"{r['variant']:<10} {r['protocol']:<15} {r['rank1']:7.4f} {r['map']:7.4f}")
    return rows


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except SciError as exc:
        print(f"sci-reid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, TypeError) as exc:
        print(f"sci-reid {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
