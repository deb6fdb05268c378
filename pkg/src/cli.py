"""
Command-line front door: dataset synthesis, training runs, evaluation, ablation grids,
affinity dumps and the MCP tool server.

Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""

import argparse
import asyncio
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from config import GRIDS, ExperimentConfig, ablation_configs, config_keys, data_root, load_config, output_root
from errors import EXIT_OK, ConfigError, DatasetError, FedLPPAError, exit_code_for
from fed_protocol import AffinityMatrix, evaluate_split, run_method
from formats import read_json, safe_json_dumps, write_json
from segmodel import load_checkpoint
from synth_data import default_4site_config, generate_federation, load_federation, load_site_specs

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DEFAULT_ABLATION_GRIDS = ("table5", "strategy")


def setup_logging(level: str = "INFO") -> None:
    """Log to stderr so stdout stays free for results"""
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(
    sites: str = "default4",
    seed: int = 0,
    out: Optional[str] = None,
    force: bool = False,
    workers: int = 1,
    n_train: Optional[int] = None,
    n_test: Optional[int] = None,
) -> Path:
    """Write a synthetic federation to ``out`` (default: $FEDLPPA_DATA_ROOT/default4)"""
    specs = default_4site_config() if sites == "default4" else load_site_specs(sites)
    if n_train is not None or n_test is not None:
        specs = [
            replace(
                s,
                n_train=n_train if n_train is not None else s.n_train,
                n_test=n_test if n_test is not None else s.n_test,
            )
            for s in specs
        ]
    root = Path(out) if out else data_root() / "default4"
    generate_federation(specs, seed, root, force=force, workers=workers)
    logger.info(f"Dataset written to {root}")
    return root


def cmd_train(cfg: ExperimentConfig, progress: bool = True) -> Path:
    """Run one method end to end and return its run directory"""
    cfg = cfg.validate()
    dataset = cfg.resolved_dataset_dir()
    if not dataset.is_dir():
        raise DatasetError(f"Dataset directory {dataset} does not exist; run `synth` first")
    train = load_federation(dataset, "train")
    test = load_federation(dataset, "test")
    step = 2**cfg.depth
    for split in train:
        h, w = split.spec.image_size
        if h % step or w % step:
            raise ConfigError(
                f"depth={cfg.depth} needs image sides divisible by {step}; site {split.spec.site_id} is {h}x{w}"
            )
    run_dir = cfg.resolved_run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    replace(cfg, dataset_dir=str(dataset), output_dir=str(run_dir)).save(run_dir / "config.json")
    run_method(cfg, train, test, run_dir, progress=progress)
    logger.info(f"Run finished: {run_dir}")
    return run_dir


def cmd_eval(run_dir: str, dataset: Optional[str] = None) -> Dict:
    """Re-evaluate saved checkpoints on the test splits; writes summary.json"""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    dataset_dir = Path(dataset) if dataset else cfg.resolved_dataset_dir()
    test = load_federation(dataset_dir, "test")
    sites = {}
    for k, split in enumerate(test):
        name = "global" if cfg.shared_model else f"site_{k}"
        checkpoint = run_dir / "checkpoints" / name
        if not checkpoint.is_dir():
            raise DatasetError(f"Missing checkpoint {checkpoint}")
        model = load_checkpoint(checkpoint)
        client_id = k if model.tdf is not None else 0
        sites[f"site_{k}"] = evaluate_split(model, split, client_id, model.config.num_classes)
    keys = list(next(iter(sites.values())).keys()) if sites else []
    overall = {key: float(np.mean([scores[key] for scores in sites.values()])) for key in keys}
    summary = {"method": cfg.method, "strategy": cfg.strategy, "seed": cfg.seed, "sites": sites, "overall": overall}
    if (run_dir / "communication.json").exists():
        summary["communication"] = read_json(run_dir / "communication.json")
    write_json(run_dir / "summary.json", summary)
    return summary


def cmd_ablate(
    base: ExperimentConfig,
    grids: Sequence[str] = DEFAULT_ABLATION_GRIDS,
    seeds: Optional[Sequence[int]] = None,
    progress: bool = True,
) -> List[Dict]:
    """Run every row of the requested grids for each seed; writes ablation.csv"""
    seeds = list(seeds) if seeds else [base.seed]
    root = base.resolved_run_dir() if (base.output_dir or base.run_name) else output_root() / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    table = []
    for grid in grids:
        for row_name, row_cfg in ablation_configs(base, grid).items():
            dsc, hd = [], []
            for seed in seeds:
                run_dir = root / grid / _slug(row_name) / f"s{seed}"
                run_cfg = replace(row_cfg, seed=seed, output_dir=str(run_dir), run_name="")
                cmd_train(run_cfg, progress=progress)
                overall = cmd_eval(str(run_dir))["overall"]
                dsc.append(overall["dsc"])
                hd.append(overall["hd95"])
            table.append(
                {
                    "grid": grid,
                    "row": row_name,
                    "seeds": " ".join(str(s) for s in seeds),
                    "dsc": float(np.mean(dsc)),
                    "hd95": float(np.mean(hd)),
                }
            )
            logger.info(f"[{grid}] {row_name}: dsc={table[-1]['dsc']:.4f} hd95={table[-1]['hd95']:.2f}")
    with open(root / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["grid", "row", "seeds", "dsc", "hd95"])
        writer.writeheader()
        writer.writerows(table)
    return table


def _slug(name: str) -> str:
    return name.replace("+", "plus_").strip("_") or "row"


def affinity_rounds(run_dir: Path) -> List[int]:
    return sorted(int(p.stem.rsplit("_", 1)[-1]) for p in Path(run_dir).glob("affinity_round_*.csv"))


def cmd_dump_affinity(run_dir: str, round_t: Optional[int] = None) -> AffinityMatrix:
    """Affinity matrix recorded at ``round_t`` (latest when omitted)"""
    rounds = affinity_rounds(Path(run_dir))
    if not rounds:
        raise DatasetError(f"{run_dir} has no affinity records (method without prompts?)")
    round_t = rounds[-1] if round_t is None else round_t
    if round_t not in rounds:
        raise ConfigError(f"No affinity recorded for round {round_t}; available: {rounds[0]}..{rounds[-1]}")
    return AffinityMatrix.from_csv(Path(run_dir) / f"affinity_round_{round_t}.csv")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON experiment config")
    for key in config_keys():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        parser.add_argument(*flags, dest=key, default=None, metavar=key.upper())


def _overrides(args: argparse.Namespace) -> Dict:
    return {key: getattr(args, key) for key in config_keys() if getattr(args, key, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlppa", description="Personalized federated weakly-supervised segmentation"
    )
    parser.add_argument("--log-level", default=os.getenv("FEDLPPA_LOG_LEVEL", "INFO"))
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic multi-site dataset")
    synth.add_argument("--sites", default="default4", help='"default4" or a JSON site list')
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", help="Dataset directory")
    synth.add_argument("--force", action="store_true", help="Overwrite a non-empty dataset directory")
    synth.add_argument("--workers", type=int, default=1)
    synth.add_argument("--n-train", type=int, default=None)
    synth.add_argument("--n-test", type=int, default=None)

    train = sub.add_parser("train", help="Run one federated or baseline method")
    _add_config_flags(train)

    evaluate = sub.add_parser("eval", help="Evaluate a finished run and write summary.json")
    evaluate.add_argument("--run-dir", required=True)
    evaluate.add_argument("--dataset", default=None)

    ablate = sub.add_parser("ablate", help="Run ablation / comparison grids")
    _add_config_flags(ablate)
    ablate.add_argument("--grid", action="append", choices=sorted(GRIDS), help="Repeatable; default table5 + strategy")
    ablate.add_argument("--seeds", type=int, nargs="+", default=None)

    dump = sub.add_parser("dump-affinity", help="Print a recorded affinity matrix as CSV")
    dump.add_argument("--run-dir", required=True)
    dump.add_argument("--round", type=int, default=None, dest="round_t")

    serve = sub.add_parser("serve", help="Expose the harness as MCP tools over SSE")
    serve.add_argument("--host", default=os.getenv("HOST", "0.0.0.0"))
    serve.add_argument("--port", type=int, default=int(os.getenv("PORT", "8000")))
    return parser


def _dispatch(args: argparse.Namespace) -> None:
    progress = not args.quiet
    if args.command == "synth":
        root = cmd_synth(args.sites, args.seed, args.out, args.force, args.workers, args.n_train, args.n_test)
        print(root)
    elif args.command == "train":
        print(cmd_train(load_config(args.config, _overrides(args)), progress))
    elif args.command == "eval":
        print(safe_json_dumps(cmd_eval(args.run_dir, args.dataset)))
    elif args.command == "ablate":
        base = load_config(args.config, _overrides(args))
        table = cmd_ablate(base, args.grid or DEFAULT_ABLATION_GRIDS, args.seeds, progress)
        print(safe_json_dumps(table))
    elif args.command == "dump-affinity":
        matrix = cmd_dump_affinity(args.run_dir, args.round_t)
        for row in matrix.a:
            print(",".join(f"{v:.6f}" for v in row))
    elif args.command == "serve":
        from server import serve

        asyncio.run(serve(args.host, args.port))


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        _dispatch(args)
    except (FedLPPAError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
