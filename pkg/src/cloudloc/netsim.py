"""Deterministic simulated network channel: loss, latency, bandwidth.

The channel never consults the wall clock; callers pass the simulated time
and schedule the returned delivery themselves.  Loss is Bernoulli per
message from the channel's own seeded generator, transmission time is
bytes/bandwidth with a busy-until queue, and FIFO order among survivors is
enforced by clamping each delivery to the previously scheduled one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ChannelConfig:
    latency_model: str = "constant"  # "constant" or "uniform"
    latency: float = 0.05  # constant latency, or lower bound for uniform
    latency_hi: float = 0.0  # upper bound for uniform
    loss_probability: float = 0.0
    bandwidth_limit: float = 0.0  # bytes/s, 0 = unlimited
    seed: int = 0

    def validate(self) -> None:
        if self.latency_model not in ("constant", "uniform"):
            raise ConfigError(f"unknown latency_model {self.latency_model!r}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ConfigError("loss_probability must be in [0, 1]")
        if self.latency < 0.0 or (self.latency_model == "uniform" and self.latency_hi < self.latency):
            raise ConfigError("latencies must be nonnegative and ordered")
        if self.bandwidth_limit < 0.0:
            raise ConfigError("bandwidth_limit must be nonnegative")


DROPPED = object()  # sentinel: the send was lost, nothing to schedule


@dataclass
class Delivery:
    time: float
    payload: bytes
    kind: str


@dataclass
class TrafficRecord:
    time: float
    kind: str
    nbytes: int
    dropped: bool


class Channel:
    """One direction of the simulated link."""

    def __init__(self, config: ChannelConfig, name: str = "channel"):
        config.validate()
        self.config = config
        self.name = name
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self.busy_until = 0.0
        self.last_delivery = 0.0
        self.log: list[TrafficRecord] = []
        self.sent = 0
        self.dropped = 0

    def _latency(self) -> float:
        if self.config.latency_model == "constant":
            return self.config.latency
        return float(self.rng.uniform(self.config.latency, self.config.latency_hi))

    def send(self, payload: bytes, now: float, kind: str = "msg"):
        """Offer a packet; returns a Delivery to schedule or DROPPED.

        The drop draw happens for every offered packet (even at p=0) so the
        stream of random numbers, and with it the whole schedule, depends
        only on the sequence of sends and the seed.
        """
        nbytes = len(payload)
        drop = bool(self.rng.random() < self.config.loss_probability)
        self.log.append(TrafficRecord(now, kind, nbytes, drop))
        self.sent += 1
        if drop:
            self.dropped += 1
            return DROPPED
        start = max(now, self.busy_until)
        transmit = nbytes / self.config.bandwidth_limit if self.config.bandwidth_limit > 0.0 else 0.0
        self.busy_until = start + transmit
        t = self.busy_until + self._latency()
        t = max(t, self.last_delivery)  # FIFO among survivors
        self.last_delivery = t
        return Delivery(t, payload, kind)

    def throughput(self, window: float, at: float | None = None) -> float:
        """Offered (pre-drop) byte rate over (at - window, at]."""
        if not self.log:
            return 0.0
        end = self.log[-1].time if at is None else at
        total = sum(rec.nbytes for rec in self.log if end - window < rec.time <= end)
        return total / window

    def total_offered_bytes(self) -> int:
        return sum(rec.nbytes for rec in self.log)

    def write_log_csv(self, path, direction: str) -> None:
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            for rec in self.log:
                writer.writerow([repr(rec.time), direction, rec.kind, rec.nbytes, int(rec.dropped)])


def write_traffic_csv(path, channels: dict) -> None:
    """Merged traffic log as CSV: time, direction, kind, bytes, dropped."""
    rows = []
    for direction, ch in channels.items():
        for rec in ch.log:
            rows.append((rec.time, direction, rec.kind, rec.nbytes, int(rec.dropped)))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["time", "direction", "kind", "bytes", "dropped"])
        for t, d, k, n, dr in rows:
            writer.writerow([repr(t), d, k, n, dr])
