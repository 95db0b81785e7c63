"""Command-line entry point: ``gridzsl {gen-data,run-scenario,grid-search,report}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import analysis
from .bench import (
    BenchData,
    Benchmark,
    BenchSettings,
    GridSeries,
    MissingDataError,
    ResultsTable,
    ScenarioKind,
    SearchSpace,
    TrainingError,
    TrainOptions,
    grid_search,
    od_curves_csv,
)
from .gnn import MAX_LAYERS, LayerKind, save_model
from .grid_model import GridError, GridTopology, load_grid, save_grid, topology_from_dict
from .powerflow import PowerFlowError, generate_time_series, load_snapshots, save_snapshots
from .scenarios import apply_manifest, load_manifest, make_topology_variants, save_manifest

log = logging.getLogger("gridzsl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- manifest

def sha256_of(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    output_dir: str
    started: str
    finished: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)

    def record(self, out: Path) -> None:
        """Checksum every file below ``out`` except the manifest itself."""
        self.finished = _now()
        self.artifacts = {
            p.relative_to(out).as_posix(): sha256_of(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"
        }
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=1) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- parsing helpers

def parse_layers(text: str) -> tuple[int, ...]:
    """'1-3', '2,8-10' or 'all'."""
    if text.strip().lower() == "all":
        return tuple(range(1, MAX_LAYERS + 1))
    out: set[int] = set()
    try:
        for part in text.split(","):
            lo, _, hi = part.strip().partition("-")
            out.update(range(int(lo), int(hi or lo) + 1))
    except ValueError:
        raise UsageError(f"cannot parse layers {text!r}; use e.g. 1-3 or 2,8-10") from None
    if not out or not all(1 <= n <= MAX_LAYERS for n in out):
        raise UsageError(f"layers must lie in 1-{MAX_LAYERS}, got {text!r}")
    return tuple(sorted(out))


def parse_models(text: str) -> tuple[LayerKind, ...]:
    if text.strip().lower() == "all":
        return tuple(LayerKind)
    try:
        return tuple(dict.fromkeys(LayerKind.parse(m) for m in text.split(",")))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_scenarios(text: str) -> tuple[ScenarioKind, ...]:
    if text.strip().lower() == "all":
        return tuple(ScenarioKind)
    try:
        return tuple(dict.fromkeys(ScenarioKind.parse(s) for s in text.split(",")))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_flags(text: str) -> tuple[bool, ...]:
    """'true', 'false' or 'both' (also 'true,false')."""
    table = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}
    words = [w.strip().lower() for w in str(text).split(",")]
    if words == ["both"]:
        return (True, False)
    try:
        return tuple(dict.fromkeys(table[w] for w in words))
    except KeyError:
        raise UsageError(f"expected true, false or both, got {text!r}") from None


def resolve_grid(name: str) -> GridTopology:
    """A grid file path or the name of a bundled fixture (mv30, mv15)."""
    path = Path(name)
    if not path.exists():
        bundled = resources.files("gridzsl") / "data" / f"{name}.json"
        if not bundled.is_file():
            raise DataError(f"grid {name!r} is neither a file nor a bundled fixture")
        with resources.as_file(bundled) as p:
            return load_grid(p)
    return load_grid(path)


# ---------------------------------------------------------------- dataset layout
#
# <data>/<grid>/grid.json, snapshots.json, variants.json, variants/<id>.json

def write_dataset(topology: GridTopology, steps: int, seed: int, out: Path) -> int:
    d = out / topology.name
    (d / "variants").mkdir(parents=True, exist_ok=True)
    save_grid(topology, d / "grid.json")
    save_snapshots(generate_time_series(topology, steps, seed=seed), d / "snapshots.json")
    variants = make_topology_variants(topology)
    save_manifest(variants, d / "variants.json")
    for v in variants:
        save_snapshots(generate_time_series(v.variant_topology, steps, seed=seed),
                       d / "variants" / f"{v.variant_id}.json")
    return len(variants)


def read_dataset(data_dir: Path, name: str) -> tuple[GridSeries, tuple[GridSeries, ...]]:
    d = data_dir / name
    if not (d / "grid.json").is_file():
        raise MissingDataError(f"dataset {name!r} not found under {data_dir}")
    topology = topology_from_dict(json.loads((d / "grid.json").read_text()), name=name)
    base = GridSeries(topology, tuple(load_snapshots(d / "snapshots.json")))
    variants = []
    if (d / "variants.json").is_file():
        for v in apply_manifest(topology, load_manifest(d / "variants.json")):
            snaps = load_snapshots(d / "variants" / f"{v.variant_id}.json")
            variants.append(GridSeries(v.variant_topology, tuple(snaps), v))
    return base, tuple(variants)


def read_bench_data(data_dir: Path, pq: str, mv: str | None) -> BenchData:
    base, variants = read_dataset(data_dir, pq)
    other = None
    if mv and (data_dir / mv / "grid.json").is_file():
        other = read_dataset(data_dir, mv)[0]
    elif mv:
        log.warning("dataset %r not found; cross-grid scenarios are unavailable", mv)
    return BenchData(base, variants, other)


# ---------------------------------------------------------------- commands

def _settings(args) -> BenchSettings:
    if args.epochs < 1 or args.lr <= 0 or args.hidden_dim < 1:
        raise UsageError("epochs and hidden-dim must be >= 1 and lr > 0")
    return BenchSettings(observability=args.observability, hidden_dim=args.hidden_dim,
                         train=TrainOptions(epochs=args.epochs, lr=args.lr))


def _space(args) -> SearchSpace:
    return SearchSpace(parse_models(args.models), parse_layers(args.layers),
                       parse_flags(args.fp), parse_flags(args.adm))


def cmd_gen_data(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be a positive integer")
    out = Path(args.out)
    manifest = RunManifest("gen-data", args.config, args.seed, str(out), _now())
    for name in args.grid:
        topology = resolve_grid(name)
        n = write_dataset(topology, args.steps, args.seed, out)
        print(f"{topology.name}: {args.steps} snapshots, {n} variant datasets")
    manifest.record(out)
    return EXIT_OK


def _bench(args) -> Benchmark:
    return Benchmark(read_bench_data(Path(args.data), args.pq, args.mv), _settings(args))


def _run(args, bench: Benchmark, scenarios: Sequence[ScenarioKind], space: SearchSpace,
         out: Path, jobs: int) -> ResultsTable:
    seeds = tuple(range(args.seed, args.seed + args.repeats))
    outcome = grid_search(scenarios, space, bench, seeds, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    outcome.table.write_csv(out / "results.csv")
    od = outcome.table.filter(scenario=ScenarioKind.OD)
    if len(od):
        (out / "od_curves.csv").write_text(od_curves_csv(od))
    if outcome.errors:
        (out / "errors.log").write_text("".join(f"{w}: {m}\n" for w, m in outcome.errors))
        log.error("%d configuration(s) failed; see errors.log", len(outcome.errors))
    return outcome.table


def cmd_run_scenario(args) -> int:
    out = Path(args.out)
    manifest = RunManifest("run-scenario", args.config, args.seed, str(out), _now())
    bench = _bench(args)
    # in-process, so the trained models stay available for saving
    table = _run(args, bench, parse_scenarios(args.scenario), _space(args), out, jobs=1)
    if args.save_models:
        (out / "models").mkdir(exist_ok=True)
        for role, config, model in bench.trained_models():
            tag = (f"{role}-{config.kind.value}-L{config.layers}-fp{int(config.use_fp)}"
                   f"-adm{int(config.use_adm)}-s{config.seed}")
            save_model(model, out / "models" / f"{tag}.json")
    sys.stdout.write(table.to_csv())
    manifest.record(out)
    return EXIT_OK


def cmd_grid_search(args) -> int:
    out = Path(args.out)
    manifest = RunManifest("grid-search", args.config, args.seed, str(out), _now())
    table = _run(args, _bench(args), parse_scenarios(args.scenarios), _space(args), out,
                 args.jobs)
    print(f"{len(table)} rows written to {out / 'results.csv'}")
    manifest.record(out)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.results)
    if not path.is_file():
        raise DataError(f"{path} does not exist")
    try:
        table = ResultsTable.read_csv(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if not len(table):
        raise DataError(f"{path} holds no results")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("report", args.config, 0, str(out), _now())
    truncated = analysis.truncate_results(table, args.max_layers)
    aug = analysis.aggregate_augmentations(truncated)
    corr = analysis.correlation_matrix(truncated)
    (out / "augmentations.csv").write_text(analysis.augmentations_csv(aug))
    (out / "correlation.csv").write_text(corr.to_csv())
    (out / "params_vs_mse.csv").write_text(analysis.params_vs_mse(table))
    (out / "depth_means.csv").write_text(analysis.depth_means_csv(analysis.depth_means(table)))
    print("# augmentation means")
    sys.stdout.write(analysis.augmentations_csv(aug))
    print("# correlation")
    sys.stdout.write(corr.to_csv())
    manifest.record(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="data", help="dataset directory written by gen-data")
    p.add_argument("--pq", default="mv30", help="dataset of the base grid")
    p.add_argument("--mv", default="mv15", help="dataset of the second grid")
    p.add_argument("--models", default="all", help="comma list of GCN,GAT,GIN,GraphSAGE")
    p.add_argument("--layers", default="1-10", help="depths, e.g. 1-3 or 2,8-10")
    p.add_argument("--fp", default="both", help="feature propagation: true, false or both")
    p.add_argument("--adm", default="both", help="admittance weights: true, false or both")
    p.add_argument("--seed", type=int, default=0, help="first model seed")
    p.add_argument("--repeats", type=int, default=1, help="seeds per configuration")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--hidden-dim", type=int, default=4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--observability", type=float, default=0.5)
    p.add_argument("--out", default="results")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="gridzsl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", help="simulate load-flow datasets")
    p.add_argument("--grid", action="append", help="grid file or bundled name; repeatable")
    p.add_argument("--steps", type=int, default=192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = subs["run-scenario"] = sub.add_parser("run-scenario", help="train and score one scenario")
    p.add_argument("--scenario", required=False, default="od")
    _add_training(p)
    p.set_defaults(models="GCN", layers="2", fp="true", adm="false", func=cmd_run_scenario)
    p.add_argument("--save-models", action="store_true", help="write trained weights")

    p = subs["grid-search"] = sub.add_parser("grid-search", help="sweep the configuration space")
    p.add_argument("--scenarios", default="all", help="comma list, e.g. od,tc1,tc2")
    _add_training(p)
    p.set_defaults(func=cmd_grid_search)

    p = subs["report"] = sub.add_parser("report", help="summaries of a results.csv")
    p.add_argument("--results", default="results/results.csv")
    p.add_argument("--max-layers", type=int, default=7)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    for p in subs.values():
        p.add_argument("--config", help="JSON file of option values; flags override it")
    return parser, subs


def _apply_config(argv: Sequence[str], parser, subs) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subs[args.command]
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    # list-valued options in JSON map onto the comma syntax of the flags
    values = {k: ",".join(map(str, v)) if isinstance(v, list) and k != "grid" else v
              for k, v in values.items()}
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(argv, parser, subs)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gen-data" and not args.grid:
            args.grid = ["mv30", "mv15"]
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gridzsl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MissingDataError, GridError, OSError) as exc:
        print(f"gridzsl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PowerFlowError, TrainingError) as exc:
        print(f"gridzsl: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
