"""Experiment orchestration: baseline, simulated-delay and LMT comparison runs.

Every run writes ``<output_dir>/<name>/{log.csv,stats.json,report.txt}`` plus a
``plot.csv`` series (index, il_ms, frame_bytes) for external plotting.
"""
from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import lmt
from .render import LOSSLESS
from .simulator import ASYNC
from .stats import SummaryStats, summarize
from .testbed import (
    RESPONSE_PATH,
    Measurement,
    RenderClient,
    RenderServer,
    SessionConfig,
    SessionError,
    SessionResult,
    load_template,
    run_local_session,
    write_measurement_log,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "ComparisonRow",
    "ComparisonReport",
    "load_template",
    "generate_template",
    "template_sequence",
    "summarize",
    "run_baseline",
    "run_simulated",
    "run_comparison",
    "format_table",
    "load_run",
]


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    injected_delay_ms: float = 0.0
    interaction_rate_hz: float = 10.0
    interaction_count: int = 1000
    template_path: str | None = None
    seed: int = 0
    output_dir: str | None = "results"
    repetitions: int = 1
    mode: str = ASYNC
    delay_path: str = RESPONSE_PATH
    resolution: tuple[int, int] = (256, 256)
    rotation_step: float = 5.0
    codec: str = LOSSLESS
    timeout_s: float = 30.0
    # LMT comparison settings
    comparison_events: int = 10
    lmt_refresh_hz: float = 60.0
    lmt_calibration_samples: int = 60

    def __post_init__(self):
        if self.interaction_rate_hz <= 0:
            raise ValueError("interaction_rate_hz must be > 0")
        if self.interaction_count <= 0:
            raise ValueError("interaction_count must be > 0")
        if self.repetitions <= 0:
            raise ValueError("repetitions must be > 0")
        self.resolution = tuple(int(v) for v in self.resolution)

    @classmethod
    def fast(cls, **overrides) -> "ExperimentConfig":
        """CI-sized profile: 100 interactions at 20 Hz (about 5 s per run)."""
        params = dict(interaction_count=100, interaction_rate_hz=20.0)
        params.update(overrides)
        return cls(**params)

    def session_config(self, delay_ms: float | None = None, rate_hz: float | None = None) -> SessionConfig:
        return SessionConfig(
            delay_ms=self.injected_delay_ms if delay_ms is None else delay_ms,
            mode=self.mode,
            delay_path=self.delay_path,
            rate_hz=rate_hz or self.interaction_rate_hz,
            template_path=self.template_path,
            resolution=self.resolution,
            rotation_step=self.rotation_step,
            codec=self.codec,
            timeout_s=self.timeout_s,
        )

    def interactions(self) -> list[str]:
        if self.template_path:
            return load_template(self.template_path)
        return template_sequence(self.interaction_count, self.seed)


def template_sequence(count: int, seed: int) -> list[str]:
    if count <= 0:
        raise ValueError("count must be > 0")
    rng = random.Random(seed)
    return [rng.choice("ad") for _ in range(count)]


def generate_template(path: str | Path, count: int, seed: int = 0) -> Path:
    """Write a reproducible pseudorandom a/d template, one interaction per line."""
    seq = template_sequence(count, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{c}\n" for c in seq), encoding="utf-8")
    return path


@dataclass
class RunResult:
    name: str
    injected_delay_ms: float
    stats: SummaryStats
    measurements: list[Measurement]
    complete: bool
    submitted: int
    il_base_ms: float | None = None
    repetition_means: list[float] = field(default_factory=list)
    output: Path | None = None

    @property
    def shift_ms(self) -> float | None:
        if self.il_base_ms is None:
            return None
        return self.stats.mean_ms - self.il_base_ms

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "injected_delay_ms": self.injected_delay_ms,
            "stats": self.stats.to_dict(),
            "complete": self.complete,
            "submitted": self.submitted,
            "il_base_ms": self.il_base_ms,
            "shift_ms": self.shift_ms,
            "repetition_means": self.repetition_means,
            "mean_frame_bytes": self.mean_frame_bytes,
        }

    @property
    def mean_frame_bytes(self) -> float | None:
        sizes = [m.frame_bytes for m in self.measurements if m.frame_bytes]
        return sum(sizes) / len(sizes) if sizes else None


def _run(cfg: ExperimentConfig, delay_ms: float, name: str, il_base: float | None) -> RunResult:
    interactions = cfg.interactions()
    measurements: list[Measurement] = []
    means, complete, submitted = [], True, 0
    for rep in range(cfg.repetitions):
        session = run_local_session(cfg.session_config(delay_ms), interactions)
        if not session.measurements:
            raise SessionError(f"{name}: session produced no measurements")
        offset = len(measurements)
        measurements += [replace(m, index=m.index + offset) for m in session.measurements]
        means.append(sum(session.il_ms) / len(session.il_ms))
        complete &= session.complete
        submitted += session.submitted
        if not session.complete:
            log.warning("%s repetition %d incomplete: %d/%d results", name, rep,
                        len(session.measurements), session.submitted)
    result = RunResult(
        name=name,
        injected_delay_ms=delay_ms,
        stats=summarize(m.il_ms for m in measurements),
        measurements=measurements,
        complete=complete,
        submitted=submitted,
        il_base_ms=il_base,
        repetition_means=means,
    )
    if cfg.output_dir:
        result.output = write_run(result, Path(cfg.output_dir) / name)
    return result


def run_baseline(cfg: ExperimentConfig) -> RunResult:
    """Loopback run with no injected delay; its mean is IL_base."""
    return _run(cfg, 0.0, cfg.name, None)


def run_simulated(cfg: ExperimentConfig, il_base: float | None = None,
                  delay_ms: float | None = None) -> RunResult:
    """Same run with the latency simulator set to ``delay_ms``.

    Without ``il_base`` a baseline run is made first.
    """
    delay = cfg.injected_delay_ms if delay_ms is None else delay_ms
    if il_base is None:
        il_base = run_baseline(replace(cfg, name=f"{cfg.name}-baseline")).stats.mean_ms
    return _run(cfg, delay, cfg.name, il_base)


# -- LMT vs integrated --------------------------------------------------------


@dataclass
class ComparisonRow:
    delay_ms: float
    integrated_mean_ms: float
    lmt_mean_ms: float | None
    delta_ms: float | None
    n_integrated: int
    n_lmt: int
    lmt_misses: int
    lmt_false_positives: int
    mean_capture_ms: float
    theta_db: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format(self) -> str:
        lines = [f"{'delay':>8} {'integrated':>11} {'lmt':>9} {'delta':>8} {'n_int':>6} {'n_lmt':>6} {'miss':>5}"]
        for r in self.rows:
            lmt_mean = "-" if r.lmt_mean_ms is None else f"{r.lmt_mean_ms:.2f}"
            delta = "-" if r.delta_ms is None else f"{r.delta_ms:.2f}"
            lines.append(f"{r.delay_ms:>8.1f} {r.integrated_mean_ms:>11.2f} {lmt_mean:>9} "
                         f"{delta:>8} {r.n_integrated:>6} {r.n_lmt:>6} {r.lmt_misses:>5}")
        return "\n".join(lines)


def compare_once(cfg: ExperimentConfig, delay_ms: float) -> tuple[ComparisonRow, SessionResult, lmt.LMTReport]:
    """One session measured by both the integrated timers and the LMT."""
    interactions = cfg.interactions()[: cfg.comparison_events]
    # keep interactions far enough apart that each result lands on its own frame
    spacing_ms = max(400.0, delay_ms + 300.0)
    session_cfg = cfg.session_config(delay_ms, rate_hz=1000.0 / spacing_ms)
    server = RenderServer.from_config(session_cfg, port=0)
    server_thread = server.start_background(max_connections=1)
    client = RenderClient(session_cfg)
    try:
        client.connect(server.port)
        source = lmt.SurfaceSource(lambda: client.state.display_surface, session_cfg.resolution,
                                   refresh_hz=cfg.lmt_refresh_hz)
        det_cfg = lmt.DetectorConfig(calibration_samples=cfg.lmt_calibration_samples)
        detector, mean_capture, _ = lmt.calibrate(source, det_cfg)
        loop = lmt.CaptureLoop(source).start()
        events: list[lmt.InteractionEvent] = []
        session = client.run(
            interactions,
            on_interaction=lambda i, a, t_us: events.append(lmt.InteractionEvent(t_us, a)),
        )
        time.sleep(3 * mean_capture / 1000)
        captures = loop.stop()
    finally:
        client.close()
        server_thread.join(10)
        server.close()
    report = lmt.analyze(captures, events, detector, mean_capture, det_cfg.match_window_ms,
                         truncated=loop.error is not None)
    integrated = session.il_ms
    integrated_mean = sum(integrated) / len(integrated) if integrated else float("nan")
    row = ComparisonRow(
        delay_ms=delay_ms,
        integrated_mean_ms=integrated_mean,
        lmt_mean_ms=report.mean_il_ms,
        delta_ms=None if report.mean_il_ms is None else report.mean_il_ms - integrated_mean,
        n_integrated=len(integrated),
        n_lmt=len(report.rows),
        lmt_misses=report.misses,
        lmt_false_positives=report.false_positives,
        mean_capture_ms=mean_capture,
        theta_db=report.theta_db,
    )
    if report.misses:
        log.warning("LMT missed %d of %d interactions at %.0f ms", report.misses,
                    len(events), delay_ms)
    return row, session, report


def run_comparison(cfg: ExperimentConfig, delays: Sequence[float]) -> ComparisonReport:
    out = ComparisonReport()
    for d in delays:
        row, _, _ = compare_once(cfg, float(d))
        out.rows.append(row)
    if cfg.output_dir and out.rows:
        target = Path(cfg.output_dir) / cfg.name
        target.mkdir(parents=True, exist_ok=True)
        (target / "comparison.json").write_text(out.to_json(), encoding="utf-8")
        (target / "report.txt").write_text(out.format() + "\n", encoding="utf-8")
    return out


# -- reporting ------------------------------------------------------------------


def format_table(results: Sequence[RunResult]) -> str:
    header = f"{'run':<20} {'delay':>7} {'n':>5} {'mean':>9} {'stddev':>7} {'var':>8} {'min':>8} {'max':>8} {'shift':>8}"
    lines = [header]
    for r in results:
        s = r.stats
        shift = "-" if r.shift_ms is None else f"{r.shift_ms:.2f}"
        lines.append(
            f"{r.name:<20} {r.injected_delay_ms:>7.1f} {s.n:>5} {s.mean_ms:>9.2f} {s.stddev_ms:>7.2f} "
            f"{s.variance:>8.2f} {s.min:>8.2f} {s.max:>8.2f} {shift:>8}"
        )
    return "\n".join(lines)


def write_run(result: RunResult, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    write_measurement_log(directory / "log.csv", result.measurements)
    (directory / "stats.json").write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
    (directory / "report.txt").write_text(format_table([result]) + "\n", encoding="utf-8")
    with (directory / "plot.csv").open("w", encoding="utf-8") as fh:
        fh.write("index,il_ms,frame_bytes\n")
        for m in result.measurements:
            fh.write(f"{m.index},{m.il_ms:.3f},{m.frame_bytes}\n")
    return directory


def load_run(directory: str | Path) -> RunResult:
    """Re-read a run written by :func:`write_run`."""
    from .testbed import read_measurement_log

    directory = Path(directory)
    data = json.loads((directory / "stats.json").read_text(encoding="utf-8"))
    log_path = directory / "log.csv"
    measurements = read_measurement_log(log_path) if log_path.exists() else []
    return RunResult(
        name=data["name"],
        injected_delay_ms=data["injected_delay_ms"],
        stats=SummaryStats.from_dict(data["stats"]),
        measurements=measurements,
        complete=data["complete"],
        submitted=data["submitted"],
        il_base_ms=data.get("il_base_ms"),
        repetition_means=data.get("repetition_means", []),
        output=directory,
    )
