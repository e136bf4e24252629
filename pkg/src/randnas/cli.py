"""Command-line entry point.

Exit codes: 0 success, 1 reproduction mismatch, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, parse_assignment, parse_value, read_config_file
from .numcore import split_stream
from .pipeline import (
    COMMANDS,
    METHOD_LABELS,
    StageReport,
    SweepRow,
    amortized_cost,
    execute,
    render_cost,
    render_sweep,
    write_outputs,
)
from .reproharness import (
    MANIFEST_NAME,
    RESULTS_NAME,
    aggregate,
    checklist_report,
    load_manifest,
    read_records,
    verify_exact,
)
from .searchspace import (
    TooManyArchitectures,
    count_architectures,
    enumerate_architectures,
    sample_architecture,
    validate_space,
)

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seeds.master=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="randnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("space", help="inspect the configured search space")
    sp.add_argument("action", choices=["count", "sample", "enumerate", "validate"])
    sp.add_argument("--limit", type=int, default=10_000)
    sp.add_argument("-n", type=int, default=1, help="number of samples")
    _add_config_args(sp)

    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name} and write its artifacts")
        _add_config_args(p)
        p.add_argument("--out", help="output directory (must not hold a completed run)")
        if name in ("stage2", "stage3"):
            p.add_argument("--arch", action="append", default=[], help="genotype text (repeatable)")
        if name == "sweep":
            p.add_argument("--setting", action="append", default=[],
                           metavar="LABEL:KEY=V;KEY=V", help="one sweep row (repeatable)")

    rp = sub.add_parser("reproduce", help="re-execute a manifest and diff its outputs")
    rp.add_argument("manifest")

    rep = sub.add_parser("report", help="render tables from a results directory")
    rep.add_argument("results_dir")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Built-in defaults < config file < --set flags."""
    overrides = {}
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} not found")
        overrides.update(read_config_file(args.config))
    for assignment in args.set:
        key, value = parse_assignment(assignment)
        overrides[key] = value
    if args.seed is not None:
        overrides["seeds.master"] = args.seed
    if getattr(args, "arch", None):
        overrides["arch.genotypes"] = tuple(args.arch)
    if getattr(args, "setting", None):
        overrides["sweep.settings"] = parse_value("sweep.settings", "|".join(args.setting))
    return PipelineConfig.default().with_overrides(overrides)


def cmd_space(args, cfg: PipelineConfig) -> int:
    space = cfg.space()
    if args.action == "validate":
        problems = validate_space(space)
        print("ok" if not problems else "\n".join(problems))
        return EXIT_OK if not problems else EXIT_USAGE
    if args.action == "count":
        print(count_architectures(space))
    elif args.action == "sample":
        rng = split_stream(cfg.master_seed, "cli/space-sample")
        for _ in range(args.n):
            print(sample_architecture(space, rng))
    else:
        try:
            archs = enumerate_architectures(space, args.limit)
        except TooManyArchitectures as exc:
            raise UsageError(str(exc)) from None
        for arch in archs:
            print(arch)
    return EXIT_OK


def cmd_run(args, cfg: PipelineConfig) -> int:
    out = execute(args.command, cfg)
    target = Path(args.out) if args.out else Path("runs") / f"{args.command}-{out.manifest().stored_hash[:12]}"
    try:
        write_outputs(out, target)
    except FileExistsError as exc:
        raise UsageError(f"refusing to overwrite: {exc}") from None
    for block in out.text:
        print(block)
        print()
    print(f"wrote {target}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    path = Path(args.manifest)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise UsageError(f"manifest {args.manifest} not found")
    manifest = load_manifest(manifest_path)
    results = manifest_path.parent / RESULTS_NAME
    records = read_records(results) if results.is_file() else None
    report = verify_exact(manifest, records)
    print(report.render())
    return EXIT_OK if report.exact else EXIT_MISMATCH


def render_report(directory: Path) -> str:
    manifest_path = directory / MANIFEST_NAME
    results_path = directory / RESULTS_NAME
    if not results_path.is_file():
        raise UsageError(f"no {RESULTS_NAME} in {directory}")
    records = read_records(results_path)
    if not records:
        raise UsageError(f"{results_path} is empty")
    blocks = []
    report_json = directory / "report.json"
    doc = json.loads(report_json.read_text()) if report_json.is_file() else {}
    for stage in ("stage2", "stage3"):
        if stage in doc:
            d = doc[stage]
            blocks.append(StageReport(d["stage"], d["metric_name"], d["labels"], d["values"],
                                      d["genotypes"], d["winner"]).render())
    if "sweep" in doc:
        blocks.append(render_sweep([SweepRow(r["label"], r["values"], r["genotypes"])
                                    for r in doc["sweep"]]))
    lines = ["Aggregates (stage, metric): n, best, average, std"]
    for (stage, metric), s in aggregate(records).items():
        lines.append(f"  {stage:>6} {metric:<8} n={s.n} best={s.best:.5f} "
                     f"average={s.average:.5f} std={s.std:.5f}")
    blocks.append("\n".join(lines))
    if "cost" in doc:
        c = doc["cost"]
        cost = amortized_cost(c["total_search_seconds"], c["num_archs_evaluated"])
        blocks.append(render_cost(cost, METHOD_LABELS.get(doc.get("command"), doc.get("command", ""))))
    manifest = load_manifest(manifest_path) if manifest_path.is_file() else None
    blocks.append(checklist_report(manifest).render(directory.name))
    return "\n\n".join(blocks)


def cmd_report(args) -> int:
    directory = Path(args.results_dir)
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    print(render_report(directory))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args)
        if args.command == "space":
            return cmd_space(args, cfg)
        return cmd_run(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
