"""Observer-style latency measurement from a watched screen region.

The tool grabs a small region of interest over and over, scores each grab by
its PSNR against the previous grab, and treats a sharp PSNR drop as the frame
an interaction produced. Interaction timestamps and detection timestamps come
from the same monotonic clock, so IL is simply their difference.

:class:`ChangeDetector` follows the scikit-learn estimator conventions:
``fit`` learns the rest-state threshold from captures taken without any
interaction, ``predict`` flags the captures that start a change.
"""
from __future__ import annotations

import abc
import bisect
import csv
import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .stats import summarize
from .timing import now_us, sleep_until

log = logging.getLogger(__name__)

PSNR_IDENTICAL = 100.0
PER_PIXEL = "per_pixel"
PSNR_THRESHOLD = "psnr_threshold"
PSNR_DELTA = "psnr_delta"
MODES = (PER_PIXEL, PSNR_THRESHOLD, PSNR_DELTA)


# -- image comparison ---------------------------------------------------------


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over every pixel and channel, on the 0-255 scale."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(err: float) -> float:
    if err == 0:
        return PSNR_IDENTICAL
    value = 20.0 * math.log10(255.0 / math.sqrt(err))
    return min(PSNR_IDENTICAL, max(0.0, value))


@dataclass
class Capture:
    pixels: np.ndarray
    timestamp_us: int
    psnr_db: float | None = None
    index: int = 0


def _pixels(c) -> np.ndarray:
    return c.pixels if isinstance(c, Capture) else np.asarray(c)


def psnr(c_n, c_prev=None) -> float:
    """PSNR of a capture against its predecessor.

    The first capture of a run (no predecessor) and an exact repeat both
    score 100 dB; everything else is clamped to [0, 100].
    """
    if c_prev is None:
        return PSNR_IDENTICAL
    return psnr_from_mse(mse(_pixels(c_n), _pixels(c_prev)))


def assign_psnr(captures: Sequence[Capture]) -> Sequence[Capture]:
    prev = None
    for i, c in enumerate(captures):
        c.index = i
        c.psnr_db = psnr(c, prev)
        prev = c
    return captures


# -- frame sources ------------------------------------------------------------


Region = tuple[int, int, int, int]


class FrameSource(abc.ABC):
    """A screen-like surface refreshed ``refresh_hz`` times per second.

    ``grab`` blocks until the next refresh after the previous grab (never
    longer than one refresh period) and returns the region of interest as an
    ``(h, w, 3)`` uint8 array.
    """

    def __init__(self, region: Region, refresh_hz: float = 60.0):
        if refresh_hz <= 0:
            raise ValueError("refresh_hz must be > 0")
        self.region = tuple(int(v) for v in region)
        self.refresh_hz = float(refresh_hz)
        self._epoch = time.perf_counter()
        self._last_refresh = -1

    @property
    def period_s(self) -> float:
        return 1.0 / self.refresh_hz

    def _refresh_index(self, t: float) -> int:
        return math.floor((t - self._epoch) * self.refresh_hz + 1e-6)

    def _refresh_time(self, k: int) -> float:
        return self._epoch + k / self.refresh_hz

    def grab(self) -> np.ndarray:
        target = max(self._last_refresh + 1, self._refresh_index(time.perf_counter()))
        sleep_until(self._refresh_time(target))
        # if the caller fell behind, show whatever is on screen now
        k = max(target, self._refresh_index(time.perf_counter()))
        self._last_refresh = k
        x, y, w, h = self.region
        return np.ascontiguousarray(self.frame_at(self._refresh_time(k))[y:y + h, x:x + w])

    @abc.abstractmethod
    def frame_at(self, t: float) -> np.ndarray:
        """Full frame displayed at perf_counter time ``t``."""


class ScriptedSource(FrameSource):
    """Synthetic source whose content changes in response to :meth:`trigger`.

    A trigger at time ``I_t`` becomes visible at the first refresh at or
    after ``I_t + latency_ms``.
    """

    def __init__(self, region: Region, refresh_hz: float = 60.0, latency_ms: float = 0.0):
        super().__init__(region, refresh_hz)
        if latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        self.latency_ms = float(latency_ms)
        self._effective: list[float] = []
        self._lock = threading.Lock()

    def trigger(self, label: str = "") -> int:
        """Inject an interaction now; returns its timestamp in microseconds."""
        t_ns = time.perf_counter_ns()
        with self._lock:
            self._effective.append(t_ns / 1e9 + self.latency_ms / 1000.0)
        return t_ns // 1000

    def changes_before(self, t: float) -> int:
        with self._lock:
            return bisect.bisect_right(self._effective, t)


class ColorFlipSource(ScriptedSource):
    """A green window that turns blue on interaction (and back on the next)."""

    GREEN = (0, 200, 0)
    BLUE = (0, 0, 220)

    def __init__(self, refresh_hz: float = 60.0, latency_ms: float = 0.0,
                 size: tuple[int, int] = (100, 100), region: Region | None = None):
        w, h = size
        super().__init__(region or _centered(size), refresh_hz, latency_ms)
        self._frames = [np.full((h, w, 3), self.GREEN, np.uint8),
                        np.full((h, w, 3), self.BLUE, np.uint8)]

    def frame_at(self, t: float) -> np.ndarray:
        return self._frames[self.changes_before(t) % 2]


class NoisySceneSource(ScriptedSource):
    """Textured background with fresh Gaussian noise on every refresh.

    Noise is sized so consecutive rest frames score about ``rest_psnr_db``;
    each interaction toggles a brightness offset sized so the changed frame
    scores about ``change_psnr_db`` against its predecessor.
    """

    def __init__(self, refresh_hz: float = 60.0, latency_ms: float = 0.0,
                 rest_psnr_db: float = 45.0, change_psnr_db: float = 20.0, seed: int = 0,
                 size: tuple[int, int] = (100, 100), region: Region | None = None):
        w, h = size
        super().__init__(region or _centered(size), refresh_hz, latency_ms)
        rest_mse = 255.0 ** 2 / 10 ** (rest_psnr_db / 10)
        change_mse = 255.0 ** 2 / 10 ** (change_psnr_db / 10)
        # rounding to uint8 adds ~1/12 variance per frame
        self.sigma = math.sqrt(max(rest_mse / 2 - 1 / 12, 0.0))
        self.offset = math.sqrt(max(change_mse - rest_mse, 0.0))
        self.seed = seed
        yy, xx = np.mgrid[0:h, 0:w]
        base = 128 + 20 * np.sin(xx / 7.0) * np.cos(yy / 11.0)
        self._base = np.repeat(base[:, :, None], 3, axis=2)

    def frame_at(self, t: float) -> np.ndarray:
        k = self._refresh_index(t)
        rng = np.random.default_rng([self.seed, max(k, 0)])
        level = self.offset * (self.changes_before(t) % 2)
        frame = self._base + level + rng.normal(0.0, self.sigma, self._base.shape)
        return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


class SurfaceSource(FrameSource):
    """Watches a display surface owned by someone else (e.g. a testbed client).

    ``surface`` is a zero-argument callable returning the latest frame or
    None when nothing has been displayed yet.
    """

    def __init__(self, surface: Callable[[], np.ndarray | None], resolution: tuple[int, int],
                 region: Region | None = None, refresh_hz: float = 60.0):
        super().__init__(region or _centered(resolution), refresh_hz)
        w, h = resolution
        self._surface = surface
        self._blank = np.zeros((h, w, 3), np.uint8)

    def frame_at(self, t: float) -> np.ndarray:
        frame = self._surface()
        return self._blank if frame is None else frame


def _centered(size: tuple[int, int], roi: int = 50) -> Region:
    w, h = size
    rw, rh = min(roi, w), min(roi, h)
    return ((w - rw) // 2, (h - rh) // 2, rw, rh)


# -- capture --------------------------------------------------------------------


class CaptureLoop:
    """Grab frames from ``source`` on a background thread until stopped.

    Every capture is stamped with the global monotonic clock and scored
    against the previous one as it is taken.
    """

    def __init__(self, source: FrameSource):
        self.source = source
        self.captures: list[Capture] = []
        self.error: Exception | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _run(self) -> None:
        prev = None
        try:
            while not self._stop.is_set():
                pixels = self.source.grab()
                c = Capture(pixels, now_us(), index=len(self.captures))
                c.psnr_db = psnr(c, prev)
                self.captures.append(c)
                prev = c
        except Exception as exc:
            log.error("capture source failed: %s", exc)
            self.error = exc

    def start(self) -> "CaptureLoop":
        self._thread = threading.Thread(target=self._run, name="lmt-capture", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[Capture]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(5)
        return self.captures


def capture_n(source: FrameSource, n: int) -> list[Capture]:
    captures, prev = [], None
    for i in range(n):
        pixels = source.grab()
        c = Capture(pixels, now_us(), index=i)
        c.psnr_db = psnr(c, prev)
        captures.append(c)
        prev = c
    return captures


def mean_capture_time_ms(captures: Sequence[Capture]) -> float:
    if len(captures) < 2:
        raise ValueError("need at least 2 captures")
    return (captures[-1].timestamp_us - captures[0].timestamp_us) / (len(captures) - 1) / 1000


def calibrate_capture(source: FrameSource, n: int = 1000) -> float:
    """Grab ``n`` frames back to back and return the mean capture time in ms."""
    if n < 2:
        raise ValueError("calibration needs n >= 2 captures")
    return mean_capture_time_ms(capture_n(source, n))


# -- detection ------------------------------------------------------------------


def calibrate_threshold(rest_captures: Sequence, guard_db: float = 3.0,
                        min_samples: int = 2) -> float:
    """Threshold just below the mean PSNR observed while nothing happens.

    The first capture of a run has no predecessor and is skipped.
    """
    values = _rest_psnr(rest_captures)
    if len(values) < max(min_samples, 1):
        raise ValueError(f"need at least {max(min_samples, 1)} rest captures, got {len(values)}")
    return float(np.mean(values)) - guard_db


def _rest_psnr(captures: Sequence) -> np.ndarray:
    if len(captures) and isinstance(captures[0], Capture):
        values = [c.psnr_db for c in captures if c.index != 0]
        if any(v is None for v in values):
            raise ValueError("captures have unassigned psnr")
        return np.asarray(values, dtype=float)
    return check_array(np.asarray(captures, dtype=float).reshape(-1, 1),
                       ensure_min_samples=0).ravel()


@dataclass
class DetectorConfig:
    mode: str = PSNR_THRESHOLD
    theta: float | str = "auto"
    calibration_samples: int = 1000
    match_window_ms: float = 2000.0
    guard_db: float = 3.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.theta != "auto" and not 0 < float(self.theta) < 100:
            raise ValueError("theta must be in (0, 100) or 'auto'")
        if self.calibration_samples < 2:
            raise ValueError("calibration_samples must be >= 2")


class ChangeDetector(BaseEstimator):
    """Flag captures where the watched region changed.

    Parameters
    ----------
    mode : {"psnr_threshold", "psnr_delta", "per_pixel"}
        ``psnr_threshold`` fires when PSNR falls below ``theta`` (consecutive
        low captures count once). ``psnr_delta`` fires when PSNR drops by more
        than ``theta`` from the previous capture. ``per_pixel`` fires whenever
        any pixel differs from the previous capture; only usable on scenes
        that are bitwise static at rest.
    theta : float or "auto"
        Threshold in dB. With "auto", ``fit`` derives it from rest captures:
        mean rest PSNR minus ``guard_db`` for ``psnr_threshold``, largest rest
        PSNR step plus ``guard_db`` for ``psnr_delta``.
    guard_db : float
    calibration_samples : int
        Minimum number of rest captures ``fit`` accepts.
    """

    def __init__(self, mode=PSNR_THRESHOLD, theta="auto", guard_db=3.0, calibration_samples=2):
        self.mode = mode
        self.theta = theta
        self.guard_db = guard_db
        self.calibration_samples = calibration_samples

    @classmethod
    def from_config(cls, cfg: DetectorConfig) -> "ChangeDetector":
        return cls(cfg.mode, cfg.theta, cfg.guard_db, cfg.calibration_samples)

    def fit(self, X, y=None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        rest = _rest_psnr(X)
        if len(X) < self.calibration_samples or len(rest) == 0:
            raise ValueError(
                f"need at least {self.calibration_samples} rest captures, got {len(X)}"
            )
        self.rest_psnr_mean_ = float(np.mean(rest))
        self.n_rest_ = len(X)
        if self.theta != "auto":
            self.theta_ = float(self.theta)
        elif self.mode == PSNR_DELTA:
            steps = np.abs(np.diff(rest)) if len(rest) > 1 else np.zeros(1)
            self.theta_ = float(np.max(steps)) + self.guard_db
        else:
            self.theta_ = self.rest_psnr_mean_ - self.guard_db
        return self

    def predict(self, X) -> np.ndarray:
        """Return 1 for each capture that starts a detected change, else 0."""
        check_is_fitted(self, "theta_")
        if self.mode == PER_PIXEL:
            if not all(isinstance(c, Capture) for c in X):
                raise ValueError("per_pixel mode needs Capture objects with pixels")
            out = np.zeros(len(X), dtype=int)
            for n in range(1, len(X)):
                out[n] = int(not np.array_equal(X[n].pixels, X[n - 1].pixels))
            return out
        values = _assigned_psnr(X)
        out = np.zeros(len(values), dtype=int)
        if len(values) < 2:
            return out
        prev, cur = values[:-1], values[1:]
        if self.mode == PSNR_THRESHOLD:
            out[1:] = (cur < self.theta_) & (prev >= self.theta_)
        else:
            # recoveries (PSNR rising back) are the tail of the same change
            out[1:] = (np.abs(cur - prev) > self.theta_) & (cur < prev)
            # the first capture's 100 dB is a placeholder, not a measurement
            out[1] = 0
        return out

    def detect(self, captures: Sequence[Capture]) -> list[int]:
        flags = self.predict(captures)
        return [c.timestamp_us for c, f in zip(captures, flags) if f]


def _assigned_psnr(X) -> np.ndarray:
    if len(X) and isinstance(X[0], Capture):
        if any(c.psnr_db is None for c in X):
            raise ValueError("captures have unassigned psnr")
        X = [c.psnr_db for c in X]
    return check_array(np.asarray(X, dtype=float).reshape(-1, 1), ensure_min_samples=0).ravel()


def detect_changes(captures: Sequence[Capture], cfg: DetectorConfig,
                   theta: float | None = None) -> list[int]:
    """Timestamps (us) of the captures where a change was detected.

    ``theta`` overrides ``cfg.theta``; one of them must be numeric unless the
    mode is ``per_pixel``.
    """
    value = theta if theta is not None else cfg.theta
    if value == "auto":
        if cfg.mode != PER_PIXEL:
            raise ValueError("theta is 'auto'; calibrate it first or pass theta")
        value = 50.0
    det = ChangeDetector(cfg.mode, float(value), cfg.guard_db, 2).fit([PSNR_IDENTICAL] * 2)
    return det.detect(captures)


# -- matching -------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionEvent:
    timestamp_us: int
    label: str = ""


@dataclass(frozen=True)
class MatchedEvent:
    event: InteractionEvent
    detection_us: int

    @property
    def il_ms(self) -> float:
        return (self.detection_us - self.event.timestamp_us) / 1000


@dataclass
class MatchResult:
    matched: list[MatchedEvent]
    misses: list[InteractionEvent]
    unclaimed: list[int]

    @property
    def il_ms(self) -> list[float]:
        return [m.il_ms for m in self.matched]


def match_interactions(events: Sequence[InteractionEvent], detections: Sequence[int],
                       window_ms: float = 2000.0) -> MatchResult:
    """Pair each event with the earliest unclaimed detection in its window.

    A detection is eligible for an event when it is no earlier than the event
    and at most ``window_ms`` after it. Detections that precede every
    remaining event are treated as spontaneous scene changes.
    """
    events = sorted(events, key=lambda e: e.timestamp_us)
    detections = sorted(detections)
    window_us = window_ms * 1000
    matched, misses, unclaimed = [], [], []
    j = 0
    for e in events:
        while j < len(detections) and detections[j] < e.timestamp_us:
            unclaimed.append(detections[j])
            j += 1
        if j < len(detections) and detections[j] - e.timestamp_us <= window_us:
            matched.append(MatchedEvent(e, detections[j]))
            j += 1
        else:
            misses.append(e)
    unclaimed.extend(detections[j:])
    return MatchResult(matched, misses, unclaimed)


# -- end to end -----------------------------------------------------------------


@dataclass
class LMTReport:
    theta_db: float
    mean_capture_ms: float
    rows: list[dict] = field(default_factory=list)
    misses: int = 0
    false_positives: int = 0
    n_captures: int = 0
    mean_il_ms: float | None = None
    stddev_ms: float | None = None
    variance: float | None = None
    truncated: bool = False

    @property
    def il_ms(self) -> list[float]:
        return [r["il_ms"] for r in self.rows]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def analyze(captures: Sequence[Capture], events: Sequence[InteractionEvent],
            detector: ChangeDetector, mean_capture_ms: float,
            window_ms: float = 2000.0, truncated: bool = False) -> LMTReport:
    """Detect changes in ``captures`` and match them to ``events``."""
    detections = detector.detect(captures)
    result = match_interactions(events, detections, window_ms)
    report = LMTReport(
        theta_db=detector.theta_,
        mean_capture_ms=mean_capture_ms,
        rows=[{"label": m.event.label, "event_us": m.event.timestamp_us,
               "detection_us": m.detection_us, "il_ms": m.il_ms} for m in result.matched],
        misses=len(result.misses),
        false_positives=len(result.unclaimed),
        n_captures=len(captures),
        truncated=truncated,
    )
    il = result.il_ms
    if il:
        report.mean_il_ms = float(np.mean(il))
    if len(il) >= 2:
        s = summarize(il)
        report.stddev_ms, report.variance = s.stddev_ms, s.variance
    return report


def calibrate(source: FrameSource, cfg: DetectorConfig) -> tuple[ChangeDetector, float, list[Capture]]:
    """Rest-state capture period: returns (fitted detector, mean capture ms, captures)."""
    rest = capture_n(source, cfg.calibration_samples)
    detector = ChangeDetector.from_config(cfg).fit(rest)
    return detector, mean_capture_time_ms(rest), rest


def run_lmt(source: ScriptedSource, schedule_ms: Sequence[float], cfg: DetectorConfig | None = None,
            labels: Sequence[str] | None = None, tail_ms: float = 500.0,
            inject: Callable[[str], int] | None = None) -> tuple[LMTReport, list[Capture]]:
    """Calibrate, capture while injecting scripted interactions, then analyse.

    ``schedule_ms`` gives the interaction times relative to the start of the
    capture run. ``inject(label)`` fires one interaction and returns its
    timestamp in us; it defaults to ``source.trigger``.
    """
    cfg = cfg or DetectorConfig()
    inject = inject or source.trigger
    labels = list(labels) if labels is not None else ["key"] * len(schedule_ms)
    detector, mean_capture, _ = calibrate(source, cfg)
    loop = CaptureLoop(source).start()
    # the first capture of the run is the comparison reference
    while not loop.captures and loop.error is None:
        time.sleep(0.001)
    start = time.perf_counter()
    events = []
    for offset, label in zip(schedule_ms, labels):
        sleep_until(start + offset / 1000.0)
        if loop.error is not None:
            break
        events.append(InteractionEvent(inject(label), label))
    end = start + ((max(schedule_ms) if len(schedule_ms) else 0) + tail_ms) / 1000.0
    while time.perf_counter() < end and loop.error is None:
        time.sleep(0.01)
    captures = loop.stop()
    report = analyze(captures, events, detector, mean_capture, cfg.match_window_ms,
                     truncated=loop.error is not None)
    return report, captures


def write_capture_log(path: str | Path, captures: Sequence[Capture]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "timestamp_us", "psnr_db"])
        for i, c in enumerate(captures):
            w.writerow([i, c.timestamp_us, f"{c.psnr_db:.6f}"])
