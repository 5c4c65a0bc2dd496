"""Interaction latency laboratory for interactive remote rendering systems."""

from .lmt import ChangeDetector, DetectorConfig, match_interactions, mse, psnr, run_lmt
from .model import (
    InteractionTimeline,
    LatencyBreakdown,
    RoughEstimateInputs,
    dl_residual,
    il_from_timeline,
    rough_il_estimate,
    sl_from_timestamps,
    sl_residual,
    synchronous_backlog_delay,
    total_il,
)
from .simulator import LatencySimulator, delay_synchronous
from .stats import SummaryStats, summarize
from .testbed import RenderClient, RenderServer, SessionConfig, run_local_session, run_session

__version__ = "0.1.0"
