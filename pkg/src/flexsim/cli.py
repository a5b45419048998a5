"""Command-line front end: validate, mspec-check, build, run, bench, explore, export-poset.

Exit status is 0 on success, 1 when the inputs are well formed but violate
a rule (validation findings, faults, failed builds) and 2 on usage or I/O
errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    ImageConfig,
    Mechanism,
    Sharing,
    enumerate_space,
    parse_config,
    parse_hardening,
    parse_sharing,
    validate_config,
)
from .errors import FlexError
from .explore import (
    Mode,
    ResultsFileProvider,
    SimulatorProvider,
    build_poset,
    explore,
    export_dot,
    report_json,
)
from .machine import CostModel, measure_alloc_latency, measure_gate_latency, run
from .mspec import check_requires, parse_mspec, violations_to_json
from .source import parse_program
from .transform import image_from_json, image_to_json, instantiate, layout_report

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
DEFAULT_SPACE_HARDENING = ("cfi", "asan")


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _load_json(path: str):
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _cost_model(path: str | None) -> CostModel:
    if path is None:
        return CostModel()
    try:
        return CostModel.from_json(_load_json(path))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _mechanism(name: str) -> Mechanism:
    try:
        return Mechanism(name)
    except ValueError:
        raise UsageError(f"unknown mechanism {name!r}; one of {[m.value for m in Mechanism]}") from None


def load_space(path: str) -> list[ImageConfig]:
    """A JSON list of config file paths, or an enumerator directive object."""
    data = _load_json(path)
    base = Path(path).parent
    if isinstance(data, list):
        return [parse_config(_read(str(base / p))) for p in data]
    if isinstance(data, dict):
        missing = {"components", "partitions", "mechanism"} - set(data)
        if missing:
            raise UsageError(f"{path}: enumerator needs {sorted(missing)}")
        sharing = parse_sharing(data.get("sharing", "dss"))
        hardening = {parse_hardening(h) for h in data.get("hardening", DEFAULT_SPACE_HARDENING)}
        return enumerate_space(data["components"], data["partitions"], hardening,
                               _mechanism(data["mechanism"]), sharing)
    raise UsageError(f"{path}: expected a list of config files or an enumerator object")


def _provider(spec: str, args):
    kind, _, rest = spec.partition(":")
    if kind == "results" and rest:
        return ResultsFileProvider(_load_json(rest))
    if kind == "sim" and rest:
        program_path, _, entry = rest.partition(":")
        program = parse_program(_read(program_path))
        return SimulatorProvider(program, entry or "main", _cost_model(args.cost_model))
    raise UsageError(f"bad provider {spec!r}; use results:<file> or sim:<program>[:entry]")


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args, out) -> int:
    report = validate_config(parse_config(_read(args.config)))
    if args.json:
        out.write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    else:
        for v in report.violations:
            out.write(f"{v.severity}: {v.kind}: {v.message}\n")
        if report.spare_shared_keys is not None:
            out.write(f"spare shared-domain keys: {report.spare_shared_keys}\n")
        out.write("ok\n" if report.ok else f"{len(report.errors)} error(s)\n")
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_mspec_check(args, out) -> int:
    specs = parse_mspec(_read(args.specs))
    config = parse_config(_read(args.config))
    program = parse_program(_read(args.program)) if args.program else None
    violations = check_requires(specs, config, program)
    if args.json:
        out.write(violations_to_json(violations) + "\n")
    else:
        for v in violations:
            out.write(f"{v.severity}: {v.kind}: {v.component} in {v.compartment}: {v.message}\n")
        out.write(f"{len(violations)} finding(s)\n")
    return EXIT_VIOLATION if any(v.is_error for v in violations) else EXIT_OK


def _exports(specs_path: str | None) -> dict[str, list[str]] | None:
    if not specs_path:
        return None
    exports: dict[str, list[str]] = {}
    for spec in parse_mspec(_read(specs_path)):
        exports[spec.name] = [r.target for r in spec.api if isinstance(r.target, str)]
    return exports


def cmd_build(args, out) -> int:
    program = parse_program(_read(args.program))
    config = parse_config(_read(args.config))
    image = instantiate(program, config, args.stack_size, _exports(args.specs), args.entry)
    if args.output:
        _write(args.output, json.dumps(image_to_json(image), indent=1, sort_keys=True) + "\n")
    out.write(layout_report(image, "json" if args.json else "text"))
    if args.json:
        out.write("\n")
    return EXIT_OK


def cmd_run(args, out) -> int:
    try:
        image = image_from_json(_load_json(args.image))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.image}: not a valid image bundle ({exc})") from None
    trace = run(image, args.entry, _cost_model(args.cost_model))
    if args.trace:
        _write(args.trace, trace.to_jsonl())
    out.write(json.dumps(trace.to_json(), indent=2, sort_keys=True) + "\n" if args.json else trace.summary())
    return EXIT_VIOLATION if trace.fault else EXIT_OK


def cmd_bench(args, out) -> int:
    costs = _cost_model(args.cost_model)
    if args.gates:
        light = measure_gate_latency(Mechanism.MPK_LIGHT, costs)
        out.write(f"{'gate':<16}{'cycles':>8}{'x light':>10}\n")
        for mech in (Mechanism.FUNC_CALL, Mechanism.MPK_LIGHT, Mechanism.MPK_DSS, Mechanism.EPT):
            cycles = measure_gate_latency(mech, costs)
            ratio = f"{cycles / light:.2f}" if light else "-"
            out.write(f"{mech.value:<16}{cycles:>8}{ratio:>10}\n")
    else:
        out.write(f"{'sharing':<16}" + "".join(f"{f'n={n}':>8}" for n in (1, 2, 3)) + "\n")
        for strategy in (Sharing.SHARED_STACK, Sharing.DSS, Sharing.HEAP_CONVERSION):
            row = [measure_alloc_latency(strategy, n, costs) for n in (1, 2, 3)]
            out.write(f"{strategy.value:<16}" + "".join(f"{c:>8}" for c in row) + "\n")
    return EXIT_OK


def cmd_explore(args, out) -> int:
    poset = build_poset(load_space(args.space))
    provider = _provider(args.provider, args)
    result = explore(poset, provider, args.budget, Mode.PRUNED if args.pruned else Mode.EXHAUSTIVE, args.jobs)
    text = report_json(result) + "\n"
    if args.output:
        _write(args.output, text)
    out.write(text)
    if args.dot:
        _write(args.dot, export_dot(poset, result))
    return EXIT_OK


def cmd_export_poset(args, out) -> int:
    poset = build_poset(load_space(args.space))
    result = None
    if args.results:
        result = explore(poset, ResultsFileProvider(_load_json(args.results)), args.budget)
    dot = export_dot(poset, result)
    if args.output:
        _write(args.output, dot)
    else:
        out.write(dot)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a compartment configuration")
    s.add_argument("config")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("mspec-check", help="check co-location requirements of component specs")
    s.add_argument("specs")
    s.add_argument("config")
    s.add_argument("--program", help="FlexC program used to resolve symbol owners")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_mspec_check)

    s = sub.add_parser("build", help="instantiate a FlexC program for a configuration")
    s.add_argument("program")
    s.add_argument("config")
    s.add_argument("--stack-size", type=int, default=32768)
    s.add_argument("--entry", default="main")
    s.add_argument("--specs", help="component specs whose API symbols become legal RPC entries")
    s.add_argument("-o", "--output", help="write the image bundle here")
    s.add_argument("--json", action="store_true", help="layout report as JSON")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("run", help="execute an image bundle")
    s.add_argument("image")
    s.add_argument("--entry")
    s.add_argument("--cost-model")
    s.add_argument("--trace", help="write events as JSON lines")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("bench", help="gate and allocation microbenchmarks")
    which = s.add_mutually_exclusive_group(required=True)
    which.add_argument("--gates", action="store_true")
    which.add_argument("--allocs", action="store_true")
    s.add_argument("--cost-model")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("explore", help="find the safest configurations meeting a budget")
    s.add_argument("space")
    s.add_argument("--budget", type=float, required=True)
    s.add_argument("--provider", required=True, help="results:<file> or sim:<program>[:entry]")
    s.add_argument("--pruned", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--cost-model")
    s.add_argument("--dot")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("export-poset", help="render a configuration space as DOT")
    s.add_argument("space")
    s.add_argument("--results", help="label nodes from a results file")
    s.add_argument("--budget", type=float, default=0.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_export_poset)
    return p


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "budget", 0) < 0:
        print("flexsim: error: budget must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"flexsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FlexError as exc:
        print(f"flexsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
