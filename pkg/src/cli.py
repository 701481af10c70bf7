from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from .config import (
    build_train_config,
    configure_logging,
    load_experiment_config,
    resolve_output_dir,
)
from .errors import ArgumentError, ConfigError, exit_code_for
from .graph import run_ablation, run_similarity_study, run_transfer
from .state import ExperimentConfig, Session, SyntheticMarketConfig
from .tools.dataset import (
    compute_popularity,
    load_id_map,
    load_market,
    partition,
    save_id_map,
    validation_hash,
    write_native_csv,
)
from .tools.markov import MarkovRecommender, estimate_transitions, export_transitions
from .tools.metrics import evaluate
from .tools.nn_model import LstmRecommender, load_checkpoint, save_checkpoint, train, write_loss_trace
from .tools.report_tools import FORMATS, emit_report, read_result
from .tools.synthgen import derive_related_market, generate_market, load_latent, write_market


logger = logging.getLogger("sessionrec")


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_config(Path(args.config))
    updates: Dict[str, Any] = {}
    if getattr(args, "output_dir", None):
        updates["output_dir"] = args.output_dir
    if getattr(args, "max_workers", None):
        updates["max_workers"] = args.max_workers
    if getattr(args, "no_plots", False):
        updates["plots"] = False
    return config.model_copy(update=updates) if updates else config


def _load_sessions_arg(args: argparse.Namespace, market_id: str = "data"):
    item_ids = load_id_map(Path(args.id_map)) if args.id_map else None
    return load_market(market_id, Path(args.data), args.format, item_ids)


def cmd_gen(args: argparse.Namespace) -> int:
    config = SyntheticMarketConfig(
        market_id=args.market_id,
        n_x=args.n_x,
        n_sessions=args.n_sessions,
        zipf_s=args.zipf_s,
        temperature=args.temperature,
        length_dist=args.length_dist,
        popularity_coupling=args.coupling,
        seed=args.seed,
    )
    if args.derive_from:
        base = load_latent(Path(args.derive_from))
        market, latent = derive_related_market(base, args.perturbation, config)
    else:
        market, latent = generate_market(config)
    manifest = write_market(
        Path(args.out), market, latent, config, perturbation=args.perturbation, derived_from=args.derive_from
    )
    print(f"Synthetic market written: {manifest}")
    return 0


def cmd_prep(args: argparse.Namespace) -> int:
    market = _load_sessions_arg(args, args.market_id)
    out = Path(args.out)
    write_native_csv(out / f"{args.market_id}.csv", market.sessions, market.item_ids)
    save_id_map(out / f"{args.market_id}.idmap.csv", market.item_ids)
    print(
        f"Prepared {len(market.sessions)} sessions over {market.catalog_size} items -> "
        f"{out / (args.market_id + '.csv')}"
    )
    return 0


def _split(args: argparse.Namespace, sessions: List[Session]):
    split = partition(sessions, args.seed)
    return split, split.for_fraction(args.fraction)


def cmd_train(args: argparse.Namespace) -> int:
    market = _load_sessions_arg(args)
    train_config = build_train_config(
        {
            "loss": args.loss,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "neg_samples": args.neg_samples,
            "lr": args.lr,
            "seed": args.seed,
            "progress": args.progress,
        }
    )
    _, sessions = _split(args, market.sessions)
    params, trace = train(sessions, market.catalog_size, train_config)

    checkpoint = Path(args.out)
    id_map = save_id_map(checkpoint.with_suffix(".idmap.csv"), market.item_ids)
    save_checkpoint(checkpoint, params, train_config, id_map=id_map.name)
    write_loss_trace(checkpoint.with_suffix(".loss.csv"), trace)
    print(f"Checkpoint written: {checkpoint} (final mean loss {trace[-1]:.4f})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if bool(args.checkpoint) == bool(args.markov):
        raise ArgumentError("eval needs exactly one of --checkpoint or --markov")

    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
        params, _, meta = load_checkpoint(checkpoint)
        if not args.id_map and meta.get("id_map"):
            args.id_map = str(checkpoint.parent / str(meta["id_map"]))
        market = _load_sessions_arg(args)
        n_x = params.n_x
        kept = [s for s in market.sessions if max(s) < n_x]
        if len(kept) < len(market.sessions):
            logger.warning("Dropped %d sessions with items unknown to the model", len(market.sessions) - len(kept))
        split, _ = _split(args, kept)
        recommender = LstmRecommender(params)
    else:
        market = _load_sessions_arg(args)
        n_x = market.catalog_size
        split, sessions = _split(args, market.sessions)
        transitions = estimate_transitions(sessions, n_x)
        if args.export_transitions:
            export_transitions(Path(args.export_transitions), transitions, market.item_ids)
        recommender = MarkovRecommender(transitions, seed=args.seed, n_walks=args.n_walks)

    popularity = compute_popularity(split.training, n_x)
    report = evaluate(recommender, split.validation, args.k, popularity, n_x)
    payload = report.model_dump()
    payload.update(seed=args.seed, data=str(args.data), validation_hash=validation_hash(split.validation))
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        print(f"Metrics written: {out}")
    else:
        print(text, end="")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    results = run_ablation(config)
    print(f"Ablation finished: {len(results)} curve(s) in {resolve_output_dir(config.output_dir)}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    results = run_transfer(config)
    print(f"Transfer finished: {len(results)} result(s) in {resolve_output_dir(config.output_dir)}")
    return 0


def cmd_similarity(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    report = run_similarity_study(config)
    width = max(len(m) for m in report.market_ids)
    for market_id, row in zip(report.market_ids, report.matrix):
        print(f"{market_id:<{width}}  " + "  ".join(f"{v:6.3f}" for v in row))
    print()
    for market_id, ranked in report.rankings.items():
        closest = ", ".join(f"{r.market_id} {r.similarity:.3f} ({r.label})" for r in ranked)
        print(f"{market_id:<{width}}  sources: {closest}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    result = read_result(Path(args.result))
    out = Path(args.out) if args.out else Path(args.result).parent
    for path in emit_report([result], out, args.formats):
        print(f"Wrote {path}")
    return 0


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="Session file to read.")
    p.add_argument("--format", default="native-csv", choices=["native-csv", "yoochoose-buys"])
    p.add_argument("--id-map", default=None, help="id-map CSV (external_id,index) fixing the catalog order.")


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="Experiment JSON; merged over config/defaults.json.")
    p.add_argument("--output-dir", default=None, help="Override the config's output_dir.")
    p.add_argument("--max-workers", type=int, default=None, help="Parallel jobs (LangGraph max_concurrency).")
    p.add_argument("--no-plots", action="store_true", help="Skip SVG plots.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sessionrec",
        description="Session-based recommendation lab: synthetic markets, LSTM and Markov recommenders, "
        "data-size ablations, transfer and market-similarity studies.",
    )
    parser.add_argument("--log-level", default=None, help="Overrides SESSIONREC_LOG_LEVEL.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="Generate a synthetic market (CSV, id-map, latent structure, manifest).")
    p.add_argument("--market-id", default="synthetic")
    p.add_argument("--n-x", type=int, default=500)
    p.add_argument("--n-sessions", type=int, default=50000)
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--length-dist", type=float, default=0.35)
    p.add_argument("--coupling", type=float, default=1.0, help="Popularity coupling of the latent transitions.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--derive-from", default=None, help="Latent .npz of a base market to perturb.")
    p.add_argument("--perturbation", type=float, default=0.0)
    p.add_argument("--out", required=True, help="Output directory.")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("prep", help="Clean a session file and write native CSV plus id-map.")
    _add_data_args(p)
    p.add_argument("--market-id", default="market")
    p.add_argument("--out", required=True, help="Output directory.")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="Train the LSTM recommender on one training fraction.")
    _add_data_args(p)
    p.add_argument("--loss", default=None, choices=["cross-entropy", "bpr"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--neg-samples", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--progress", action="store_true")
    p.add_argument("--out", required=True, help="Checkpoint path (.npz).")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Score a checkpoint or the Markov baseline on the validation split.")
    _add_data_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--markov", action="store_true")
    p.add_argument("--n-walks", type=int, default=500)
    p.add_argument("--export-transitions", default=None, help="Write the Markov transitions as from,to,prob CSV.")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="Metrics JSON path; printed when omitted.")
    p.set_defaults(func=cmd_eval)

    for name, func, text in [
        ("ablate", cmd_ablate, "Data-size ablation: metrics against training fraction."),
        ("transfer", cmd_transfer, "Train on source markets, validate on the target market."),
        ("similarity", cmd_similarity, "Market similarity matrix from a global embedding."),
    ]:
        p = sub.add_parser(name, help=text)
        _add_experiment_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="Re-render CSV/SVG (and JSON) from a saved result JSON.")
    p.add_argument("--result", required=True)
    p.add_argument("--formats", nargs="+", default=["csv", "svg"], choices=list(FORMATS))
    p.add_argument("--out", default=None, help="Output directory; defaults to the result's directory.")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()  # SESSIONREC_OUTPUT_ROOT / SESSIONREC_LOG_LEVEL, if set

    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    if args.command in ("train", "eval"):
        tenths = args.fraction * 10
        if abs(tenths - round(tenths)) > 1e-9 or not 1 <= round(tenths) <= 10:
            parser.error("--fraction must be one of 0.1, 0.2, ..., 1.0")

    try:
        return args.func(args)
    except ValidationError as exc:
        logger.error("%s", ConfigError(str(exc)))
        return ConfigError.exit_code
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        if code == 1:
            logger.exception("Unexpected failure")
        else:
            logger.error("%s", exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
