"""``dcfl`` command line: partition, run, sweep, report.

Artifacts go to ``<output.dir>/<config-hash>/``. Exit codes: 0 success,
1 config error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from dcfl import __version__
from dcfl.config import ExperimentSpec, describe_defaults, result_relevant
from dcfl.dataset import (Dataset, concat, generate_synthetic, load_covtype_csv, load_mnist_idx,
                          subsample, train_test_split)
from dcfl.errors import ConfigError, DataError, DivergenceError
from dcfl.evaluation import (improvement_report, mean_std, read_results_csv, run_grid,
                             split_baseline, write_delta_csv, write_results_csv)
from dcfl.model import save_params
from dcfl.orchestrator import derive_seed, run_federated, write_run_log
from dcfl.partition import alpha_to_json, build_federation, read_federation, write_federation

logger = logging.getLogger("dcfl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_data(cfg: dict) -> tuple[Dataset, Dataset, dict[str, str]]:
    """Load, subsample and split the configured dataset; also return input checksums."""
    ds_cfg = cfg["dataset"]
    name = ds_cfg["name"]
    sources: dict[str, str] = {}
    try:
        if name == "covtype":
            if not ds_cfg["path"]:
                raise ConfigError("config key dataset.path: required for covtype")
            ds = load_covtype_csv(ds_cfg["path"])
            sources[ds_cfg["path"]] = sha256_file(ds_cfg["path"])
        elif name == "mnist":
            imgs, labs = ds_cfg["mnist_images"], ds_cfg["mnist_labels"]
            if not imgs or len(imgs) != len(labs):
                raise ConfigError("config keys dataset.mnist_images / dataset.mnist_labels: "
                                  "need matching non-empty lists")
            ds = concat([load_mnist_idx(i, l) for i, l in zip(imgs, labs)])
            for p in [*imgs, *labs]:
                sources[p] = sha256_file(p)
        elif name == "synthetic":
            ds = generate_synthetic(ds_cfg["synthetic_classes"], ds_cfg["synthetic_dim"],
                                    ds_cfg["synthetic_per_class"],
                                    ds_cfg["synthetic_separation"], ds_cfg["seed"])
        else:
            raise ConfigError(f"config key dataset.name: unknown dataset {name!r}")
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise DataError(str(exc)) from None
    if ds_cfg["subsample"]:
        ds = subsample(ds, ds_cfg["subsample"], derive_seed(ds_cfg["seed"], 0, "subsample"))
    train, test = train_test_split(ds, ds_cfg["train_fraction"], ds_cfg["seed"])
    return train, test, sources


def _out_dir(spec: ExperimentSpec, override: str | None) -> Path:
    root = Path(override or spec.raw["output"]["dir"])
    out = root / spec.hash
    out.mkdir(parents=True, exist_ok=True)
    return out


def _federation(cfg: dict, run_cfg, train: Dataset):
    path = cfg["partition"]["federation_file"]
    if path:
        try:
            fed = read_federation(path, train.num_classes)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
        fed.check(train)
        return fed
    return build_federation(train, run_cfg.partition)


def cmd_partition(spec: ExperimentSpec, out_root: str | None = None) -> Path:
    train, _, sources = load_data(spec.raw)
    run_cfg = spec.run_config(train.feature_dim, train.num_classes)
    fed = build_federation(train, run_cfg.partition)
    out = _out_dir(spec, out_root)
    fed_path = out / "federation.jsonl"
    write_federation(fed, fed_path)
    manifest = {
        "config_hash": spec.hash,
        "seed": run_cfg.partition.seed,
        "num_clients": run_cfg.partition.num_clients,
        "alpha_local": alpha_to_json(run_cfg.partition.alpha_local),
        "alpha_global": alpha_to_json(run_cfg.partition.alpha_global),
        "train_samples": len(train),
        "retained_samples": fed.meta["retained"],
        "client_totals": [len(s) for s in fed.shards],
        "data_sha256": sources,
        "federation_sha256": sha256_file(fed_path),
    }
    _write_json(manifest, out / "manifest.json")
    logger.info("wrote %s (%d clients)", fed_path, len(fed))
    return fed_path


def cmd_run(spec: ExperimentSpec, out_root: str | None = None) -> Path:
    train, test, _ = load_data(spec.raw)
    run_cfg = spec.run_config(train.feature_dim, train.num_classes)
    fed = _federation(spec.raw, run_cfg, train)
    out = _out_dir(spec, out_root)
    h = spec.hash
    _write_json(result_relevant(spec.raw), out / "config.json")
    started = time.perf_counter()
    repeats = []
    for r in range(run_cfg.repeats):
        seed = derive_seed(run_cfg.master_seed, r, "repeat")
        rep_cfg = dataclasses.replace(run_cfg, master_seed=seed)
        result = run_federated(rep_cfg, fed, train, test,
                               on_round=lambda log, r=r: logger.info(
                                   "repeat %d round %d f1=%.4f clients=%d", r, log.round,
                                   log.f1, len(log.selected)))
        write_run_log(result, out / f"log-repeat{r}.jsonl",
                      {"config_hash": h, "repeat": r, "master_seed": seed})
        save_params(result.final_params, out / f"params-repeat{r}.bin")
        repeats.append({"repeat": r, "final_f1": result.final_f1, "best_f1": result.best_f1,
                        "best_round": result.best_round,
                        "distances": [log.to_json()["distance"] for log in result.rounds]})
    finals = [x["final_f1"] for x in repeats]
    bests = [x["best_f1"] for x in repeats]
    summary = {
        "config_hash": h,
        "final_f1_mean": mean_std(finals)[0], "final_f1_std": mean_std(finals)[1],
        "best_f1_mean": mean_std(bests)[0], "best_f1_std": mean_std(bests)[1],
        "repeats": repeats,
    }
    path = out / "summary.json"
    _write_json(summary, path)
    # kept apart so that every other artifact is byte-identical across reruns
    _write_json({"config_hash": h, "wall_time_s": round(time.perf_counter() - started, 3)},
                out / "timing.json")
    logger.info("wrote %s", path)
    return path


def cmd_sweep(spec: ExperimentSpec, out_root: str | None = None) -> Path:
    sw = spec.sweep()
    train, test, _ = load_data(spec.raw)
    run_cfg = spec.run_config(train.feature_dim, train.num_classes)
    out = _out_dir(spec, out_root)
    _write_json(result_relevant(spec.raw), out / "config.json")
    cells = run_grid(run_cfg, sw["axis"], sw["values"], sw["strategies"], sw["targets"],
                     train, test, dataset=spec.raw["dataset"]["name"], modes=sw["modes"],
                     repartition_per_repeat=sw["repartition_per_repeat"], jobs=run_cfg.jobs,
                     on_run=lambda v, value, r, res: logger.info(
                         "%s target=%s %s=%s repeat %d final f1=%.4f", v.label, v.target,
                         sw["axis"], value, r, res.final_f1))
    results = out / "results.csv"
    write_results_csv(cells, results)
    failures = {f"{c.strategy}/{c.target}/{c.value}": c.failures for c in cells if c.failures}
    if failures:
        _write_json(failures, out / "failures.json")
    base, dc = split_baseline(cells)
    if base and dc:
        write_delta_csv(improvement_report(base, dc), out / "deltas.csv")
    logger.info("wrote %s", results)
    return results


def cmd_report(results: str, out: str | None) -> Path:
    try:
        cells = read_results_csv(results)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{results}: malformed results CSV ({exc})") from None
    base, dc = split_baseline(cells)
    if not base or not dc:
        raise DataError(f"{results}: needs both baseline (target=none) and DC rows")
    try:
        rows = improvement_report(base, dc)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    path = Path(out) if out else Path(results).with_name("deltas.csv")
    write_delta_csv(rows, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcfl",
        description="Federated learning simulator with distribution-controlled client selection.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults (YAML sections):\n" + describe_defaults()
        + "\n\nprecedence: defaults < --config file < --set overrides",
    )
    parser.add_argument("--version", action="version", version=f"dcfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--jobs", type=int, help="concurrent client updates / grid runs")
        p.add_argument("--out", help="output root (overrides output.dir)")
        p.add_argument("--quiet", "-q", action="store_true")

    for name, text in (("partition", "write the federation JSON-lines file and manifest"),
                       ("run", "train one configuration for run.repeats repeats"),
                       ("sweep", "run a grid and write results.csv (and deltas.csv)")):
        common(sub.add_parser(name, help=text, epilog=describe_defaults(),
                              formatter_class=argparse.RawDescriptionHelpFormatter))
    rep = sub.add_parser("report", help="delta CSV from an existing results.csv")
    rep.add_argument("results")
    rep.add_argument("--out", help="delta CSV path (default: deltas.csv next to results)")
    rep.add_argument("--quiet", "-q", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            print(cmd_report(args.results, args.out))
            return EXIT_OK
        overrides = list(args.set)
        if args.jobs is not None:
            overrides.append(f"run.jobs={args.jobs}")
        spec = ExperimentSpec.load(args.config, overrides)
        logger.info("config hash %s", spec.hash)
        handler = {"partition": cmd_partition, "run": cmd_run, "sweep": cmd_sweep}[args.command]
        print(handler(spec, args.out))
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logger.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
