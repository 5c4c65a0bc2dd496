"""Interaction latency decomposition.

Pure arithmetic over the seven latency components of an interactive remote
rendering pipeline::

    IL = IDL + CL1 + NLup + SL + NLdown + CL2 + DL

Timestamps are integer microseconds. Durations are fractional milliseconds
resolved to 1 us, so that composing and then inverting a breakdown gives back
the original component bit for bit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

__all__ = [
    "InteractionTimeline",
    "LatencyBreakdown",
    "RoughEstimateInputs",
    "UnmeasuredTimestampError",
    "NegativeResidualError",
    "NoisyEstimateWarning",
    "total_il",
    "il_from_timeline",
    "sl_residual",
    "sl_from_timestamps",
    "dl_residual",
    "synchronous_backlog_delay",
    "rough_il_estimate",
]


class UnmeasuredTimestampError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"timestamp {name} is unmeasured")
        self.field = name


class NegativeResidualError(ValueError):
    """The known components already exceed the total; inputs are inconsistent."""


class NoisyEstimateWarning(UserWarning):
    pass


def _to_us(ms: float) -> int:
    return round(ms * 1000)


def _to_ms(us: int) -> float:
    return us / 1000


@dataclass(frozen=True)
class InteractionTimeline:
    """The eight measurement points of one interaction, in microseconds.

    ``None`` marks a timestamp that was not measured (t0, t1 and t7 cannot be
    observed from pure software).
    """

    t0: int | None = None
    t1: int | None = None
    t2: int | None = None
    t3: int | None = None
    t4: int | None = None
    t5: int | None = None
    t6: int | None = None
    t7: int | None = None

    def __post_init__(self):
        measured = [(f.name, getattr(self, f.name)) for f in fields(self)]
        measured = [(n, v) for n, v in measured if v is not None]
        for (n1, v1), (n2, v2) in zip(measured, measured[1:]):
            if v2 < v1:
                raise ValueError(f"timeline not monotone: {n2}={v2} < {n1}={v1}")

    def require(self, name: str) -> int:
        value = getattr(self, name)
        if value is None:
            raise UnmeasuredTimestampError(name)
        return value

    def shifted(self, offset_us: int) -> "InteractionTimeline":
        return InteractionTimeline(
            **{f.name: (None if (v := getattr(self, f.name)) is None else v + offset_us)
               for f in fields(self)}
        )


@dataclass(frozen=True)
class LatencyBreakdown:
    """Component latencies in milliseconds, each resolved to 1 us."""

    idl: float = 0.0
    cl1: float = 0.0
    nl_up: float = 0.0
    sl: float = 0.0
    nl_down: float = 0.0
    cl2: float = 0.0
    dl: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise ValueError(f"{f.name} must be >= 0, got {value}")
            object.__setattr__(self, f.name, _to_ms(_to_us(value)))

    @classmethod
    def from_round_trip(cls, nl: float, **components: float) -> "LatencyBreakdown":
        """Build a breakdown when only the round-trip network latency is known.

        The round trip is split evenly between the up and down legs.
        """
        half = _to_us(nl) / 2
        return cls(nl_up=_to_ms(int(half)), nl_down=_to_ms(_to_us(nl) - int(half)), **components)

    @property
    def cl(self) -> float:
        return _to_ms(_to_us(self.cl1) + _to_us(self.cl2))

    @property
    def nl(self) -> float:
        return _to_ms(_to_us(self.nl_up) + _to_us(self.nl_down))


@dataclass(frozen=True)
class RoughEstimateInputs:
    rtt_ms: float
    mean_render_ms: float

    def __post_init__(self):
        if self.rtt_ms < 0 or self.mean_render_ms < 0:
            raise ValueError("rtt_ms and mean_render_ms must be >= 0")


def total_il(breakdown: LatencyBreakdown) -> float:
    b = breakdown
    parts = (b.idl, b.cl1, b.nl_up, b.sl, b.nl_down, b.cl2, b.dl)
    return _to_ms(sum(_to_us(p) for p in parts))


def il_from_timeline(tl: InteractionTimeline) -> float:
    return _to_ms(tl.require("t7") - tl.require("t0"))


def _residual(il: float, known: tuple[float, ...], name: str) -> float:
    residual_us = _to_us(il) - sum(_to_us(k) for k in known)
    if residual_us < 0:
        raise NegativeResidualError(
            f"{name} residual is negative ({_to_ms(residual_us)} ms): "
            f"components exceed il={il} ms"
        )
    return _to_ms(residual_us)


def sl_residual(il: float, idl: float = 0.0, cl: float = 0.0, nl: float = 0.0,
                dl: float = 0.0) -> float:
    """Server latency as whatever remains of ``il`` after the other components."""
    return _residual(il, (idl, cl, nl, dl), "SL")


def dl_residual(il: float, idl: float = 0.0, cl: float = 0.0, nl: float = 0.0,
                sl: float = 0.0) -> float:
    """Display latency as whatever remains of ``il`` after the other components."""
    return _residual(il, (idl, cl, nl, sl), "DL")


def sl_from_timestamps(t0: int | None, t2: int | None, t5: int | None, nl: float) -> float:
    """Server latency from client send/receive timestamps when DL is unknown.

    Half the round-trip network latency is charged to each leg. ``t0`` cancels
    out and may be left unmeasured. A negative estimate means the supplied
    ``nl`` exceeds the observed round trip; it is returned with a
    :class:`NoisyEstimateWarning` rather than rejected.
    """
    if t2 is None:
        raise UnmeasuredTimestampError("t2")
    if t5 is None:
        raise UnmeasuredTimestampError("t5")
    if nl < 0:
        raise ValueError("nl must be >= 0")
    sl_us = (t5 - t2) - _to_us(nl)
    if sl_us < 0:
        warnings.warn(
            f"negative SL estimate {_to_ms(sl_us)} ms; nl={nl} exceeds t5-t2",
            NoisyEstimateWarning,
            stacklevel=2,
        )
    return _to_ms(sl_us)


def synchronous_backlog_delay(nl: float, sd: float, i: int) -> float:
    """Expected delay of interaction ``i`` through a synchronous delay stage.

    Each interaction waits behind the previous one, so the delay grows by
    ``nl - sd`` per interaction. When interactions are sent no faster than they
    are delayed (``sd >= nl``) no backlog forms and every delay is ``nl``.
    """
    if i < 0:
        raise ValueError("interaction index must be >= 0")
    if nl < 0 or sd < 0:
        raise ValueError("nl and sd must be >= 0")
    growth_us = max(0, _to_us(nl) - _to_us(sd))
    return _to_ms(_to_us(nl) + i * growth_us)


def rough_il_estimate(inputs: RoughEstimateInputs) -> float:
    return _to_ms(_to_us(inputs.rtt_ms) + _to_us(inputs.mean_render_ms))
