"""Command line entry point: ``irrlab <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 session failure, 3 a result fell
outside the requested tolerance.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from dataclasses import fields
from pathlib import Path

from . import harness, lmt
from .render import CODECS, LOSSLESS
from .simulator import ASYNC, SYNC
from .testbed import (
    DEFAULT_PORT,
    DELAY_PATHS,
    RESPONSE_PATH,
    RenderServer,
    SessionConfig,
    SessionError,
    run_session,
    write_measurement_log,
)

EXIT_OK, EXIT_USAGE, EXIT_SESSION, EXIT_TOLERANCE = 0, 1, 2, 3

log = logging.getLogger("irrlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config_file(path: str | Path) -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 256x256, got {text!r}")


def _add_session_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--delay-ms", type=float, default=0.0)
    p.add_argument("--mode", choices=(ASYNC, SYNC), default=ASYNC)
    p.add_argument("--delay-path", choices=DELAY_PATHS, default=RESPONSE_PATH)
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--rotation-step", type=float, default=5.0)
    p.add_argument("--codec", choices=CODECS, default=LOSSLESS)
    p.add_argument("--timeout-s", type=float, default=30.0)


def _add_experiment_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--name", default=None)
    p.add_argument("--interaction-rate-hz", "--rate-hz", dest="interaction_rate_hz", type=float)
    p.add_argument("--interaction-count", "--count", dest="interaction_count", type=int)
    p.add_argument("--template-path", "--template", dest="template_path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="results")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--mode", choices=(ASYNC, SYNC), default=ASYNC)
    p.add_argument("--delay-path", choices=DELAY_PATHS, default=RESPONSE_PATH)
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--rotation-step", type=float, default=5.0)
    p.add_argument("--codec", choices=CODECS, default=LOSSLESS)
    p.add_argument("--timeout-s", type=float, default=30.0)
    p.add_argument("--fast", action="store_true",
                   help="CI profile: 100 interactions at 20 Hz unless overridden")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irrlab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value or JSON file supplying option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    parser.verb_parsers = sub.choices

    p = sub.add_parser("serve", help="run the render server")
    _add_session_options(p)
    p.add_argument("--connections", type=int, default=None,
                   help="exit after serving this many connections")

    p = sub.add_parser("client", help="run one measured session against a server")
    _add_session_options(p)
    p.add_argument("--template-path", "--template", dest="template_path", required=False)
    p.add_argument("--rate-hz", type=float, default=10.0)
    p.add_argument("--log", dest="log_path", help="write the measurement CSV here")

    p = sub.add_parser("baseline", help="loopback run with no injected delay")
    _add_experiment_options(p)

    p = sub.add_parser("simulate", help="run with the latency simulator enabled")
    _add_experiment_options(p)
    p.add_argument("--delay-ms", "--injected-delay-ms", dest="injected_delay_ms",
                   type=float, required=False)
    p.add_argument("--il-base", type=float, help="baseline mean IL; measured first if omitted")
    p.add_argument("--tolerance-ms", type=float,
                   help="exit 3 if |shift - delay| exceeds this")

    p = sub.add_parser("compare", help="LMT vs integrated measurement per delay")
    _add_experiment_options(p)
    p.add_argument("--delays", type=float, nargs="*", default=[50.0, 100.0])
    p.add_argument("--events", dest="comparison_events", type=int, default=10)
    p.add_argument("--refresh-hz", dest="lmt_refresh_hz", type=float, default=60.0)
    p.add_argument("--calibration-samples", dest="lmt_calibration_samples", type=int, default=60)
    p.add_argument("--check", action="store_true",
                   help="exit 3 unless every delta is positive and deltas agree within one capture period")

    p = sub.add_parser("lmt", help="run the latency measurement tool on a synthetic scene")
    p.add_argument("--source", choices=("colorflip", "noisy"), default="colorflip")
    p.add_argument("--latency-ms", type=float, default=0.0, help="programmed scene latency")
    p.add_argument("--events", type=int, default=10)
    p.add_argument("--spacing-ms", type=float, default=500.0)
    p.add_argument("--refresh-hz", type=float, default=60.0)
    p.add_argument("--detector-mode", "--detect", dest="detector_mode",
                   choices=lmt.MODES, default=lmt.PSNR_THRESHOLD)
    p.add_argument("--theta", default="auto")
    p.add_argument("--calibration-samples", type=int, default=1000)
    p.add_argument("--guard-db", type=float, default=3.0)
    p.add_argument("--match-window-ms", type=float, default=2000.0)
    p.add_argument("--rest-psnr-db", type=float, default=45.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for captures.csv and report.json")

    p = sub.add_parser("gen-template", help="write a reproducible a/d template")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="tabulate runs written by baseline/simulate")
    p.add_argument("runs", nargs="+", help="run directories containing stats.json")
    p.add_argument("--json", action="store_true")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = read_config_file(args.config)
        except (OSError, ValueError, UsageError) as exc:
            parser.error(f"cannot read config: {exc}")
        verb_parser = parser.verb_parsers[args.verb]
        known = {a.dest: a for a in verb_parser._actions}
        converted = {}
        for key, value in defaults.items():
            if key not in known:
                parser.error(f"unknown config key {key!r} for {args.verb}")
            action = known[key]
            if isinstance(value, str) and action.type is not None:
                value = action.type(value)
            elif isinstance(value, str) and action.nargs in ("*", "+"):
                value = [float(v) for v in value.replace(",", " ").split()]
            converted[key] = value
        verb_parser.set_defaults(**converted)
        args = parser.parse_args(argv)
    return args


def _experiment_config(args, **extra) -> harness.ExperimentConfig:
    names = {f.name for f in fields(harness.ExperimentConfig)}
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    values.update(extra)
    if getattr(args, "fast", False):
        values.setdefault("interaction_count", 100)
        values.setdefault("interaction_rate_hz", 20.0)
    return harness.ExperimentConfig(**values)


def _cmd_serve(args) -> int:
    server = RenderServer(args.host, args.port, args.delay_ms, args.mode, args.delay_path,
                          args.rotation_step, args.resolution, args.codec)
    print(f"serving on {args.host}:{server.port} delay={args.delay_ms} ms ({args.mode}, {args.delay_path} path)",
          flush=True)
    try:
        server.serve(args.connections)
    except KeyboardInterrupt:
        server.close()
    return EXIT_OK


def _cmd_client(args) -> int:
    if not args.template_path:
        raise UsageError("client needs --template")
    cfg = SessionConfig(host=args.host, port=args.port, delay_ms=0.0, rate_hz=args.rate_hz,
                        template_path=args.template_path, resolution=args.resolution,
                        rotation_step=args.rotation_step, codec=args.codec, timeout_s=args.timeout_s)
    result = run_session(cfg)
    if args.log_path:
        write_measurement_log(args.log_path, result.measurements)
    if len(result.measurements) >= 2:
        s = harness.summarize(result.il_ms)
        print(f"n={s.n} mean={s.mean_ms:.2f} ms stddev={s.stddev_ms:.2f} variance={s.variance:.2f}")
    if not result.complete:
        print(f"session incomplete: {len(result.measurements)}/{result.submitted} results",
              file=sys.stderr)
        return EXIT_SESSION
    return EXIT_OK


def _finish_run(result: harness.RunResult) -> int:
    print(harness.format_table([result]))
    if result.output:
        print(f"wrote {result.output}")
    if not result.complete:
        print("session incomplete", file=sys.stderr)
        return EXIT_SESSION
    return EXIT_OK


def _cmd_baseline(args) -> int:
    cfg = _experiment_config(args, name=args.name or "baseline", injected_delay_ms=0.0)
    return _finish_run(harness.run_baseline(cfg))


def _cmd_simulate(args) -> int:
    if args.injected_delay_ms is None:
        raise UsageError("simulate needs --delay-ms")
    name = args.name or f"simulated-{args.injected_delay_ms:g}ms"
    cfg = _experiment_config(args, name=name)
    result = harness.run_simulated(cfg, il_base=args.il_base)
    code = _finish_run(result)
    if code == EXIT_OK and args.tolerance_ms is not None:
        error = abs(result.shift_ms - args.injected_delay_ms)
        if error > args.tolerance_ms:
            print(f"shift {result.shift_ms:.2f} ms misses {args.injected_delay_ms:g} ms "
                  f"by {error:.2f} ms (> {args.tolerance_ms} ms)", file=sys.stderr)
            return EXIT_TOLERANCE
    return code


def _cmd_compare(args) -> int:
    cfg = _experiment_config(args, name=args.name or "comparison")
    report = harness.run_comparison(cfg, args.delays)
    print(report.format())
    if args.check and report.rows:
        deltas = [r.delta_ms for r in report.rows]
        period = max(r.mean_capture_ms for r in report.rows)
        if any(d is None or d <= 0 for d in deltas) or max(deltas) - min(deltas) > period:
            print("LMT/integrated deltas not positive and consistent", file=sys.stderr)
            return EXIT_TOLERANCE
    return EXIT_OK


def _cmd_lmt(args) -> int:
    theta = args.theta if args.theta == "auto" else float(args.theta)
    cfg = lmt.DetectorConfig(args.detector_mode, theta, args.calibration_samples,
                             args.match_window_ms, args.guard_db)
    if args.source == "colorflip":
        source = lmt.ColorFlipSource(args.refresh_hz, args.latency_ms)
    else:
        source = lmt.NoisySceneSource(args.refresh_hz, args.latency_ms,
                                      rest_psnr_db=args.rest_psnr_db, seed=args.seed)
    rng = random.Random(args.seed)
    schedule = [args.spacing_ms * (i + 1) + rng.uniform(0, args.spacing_ms / 4)
                for i in range(args.events)]
    report, captures = lmt.run_lmt(source, schedule, cfg)
    if args.out:
        out = Path(args.out)
        lmt.write_capture_log(out / "captures.csv", captures)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return EXIT_SESSION if report.truncated else EXIT_OK


def _cmd_gen_template(args) -> int:
    path = harness.generate_template(args.out, args.count, args.seed)
    print(f"wrote {args.count} interactions to {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    runs = [harness.load_run(p) for p in args.runs]
    if args.json:
        print(json.dumps([r.to_dict() for r in runs], indent=2))
    else:
        print(harness.format_table(runs))
    return EXIT_OK


COMMANDS = {
    "serve": _cmd_serve,
    "client": _cmd_client,
    "baseline": _cmd_baseline,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
    "lmt": _cmd_lmt,
    "gen-template": _cmd_gen_template,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"irrlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"irrlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SessionError as exc:
        print(f"irrlab: session failed: {exc}", file=sys.stderr)
        return EXIT_SESSION


if __name__ == "__main__":
    sys.exit(main())
