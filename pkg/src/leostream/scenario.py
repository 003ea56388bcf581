"""Scenario files: documented key=value schema with strict validation.

An empty file resolves to the full default experiment (every application
and transport default pre-populated). Unknown keys, malformed values, and
out-of-range values are parse errors that carry the line number. The
resolved configuration can be echoed back to a file for reproducibility;
echo -> parse round-trips to the identical config.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .engine import millis, seconds
from .netpath import DEFAULT_MTU, LinkSpec, PathConfig, RateTrace
from .transport import TransportConfig


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    # experiment
    transport: str = "tcp"
    cc: str = "cubic"
    n_users: int = 4
    run_count: int = 30
    base_seed: int = 1
    # application
    content_s: float = 60.0
    segment_s: float = 2.0
    startup_allowance_s: float = 30.0
    target_buffer_s: float = 30.0
    resume_segments: int = 2
    playback_buffer_mb: float = 512.0
    ladder_bps: tuple = (400_000, 750_000, 1_200_000, 1_850_000, 2_850_000, 4_300_000)
    throughput_ewma_alpha: float = 0.5
    delta_scale: float = 0.5
    down_switch_safety: float = 0.5
    up_switch_margin: float = 0.1
    down_switch_margin: float = 0.1
    start_jitter_ms: float = 250.0
    # transport
    initial_cwnd_pkts: int = 10
    initial_ssthresh_bytes: int = 65535
    idle_timeout_s: float = 30.0
    reordering_threshold_pkts: int = 2
    max_tail_loss_probes: int = 5
    min_rto_ms: float = 200.0
    delayed_ack_ms: float = 25.0
    initial_rtt_ms: float = 333.0
    mtu_payload_bytes: int = 1200
    header_bytes: int = 40
    # path
    mtu: int = DEFAULT_MTU
    backhaul_rate_bps: int = 10_000_000
    backhaul_delay_ms: float = 25.0
    backhaul_loss: float = 0.0
    backhaul_trace: str = ""
    access_rate_bps: int = 50_000_000
    access_delay_ms: float = 5.0
    access_loss: float = 0.0
    access_trace: str = ""
    queue_bdp_rtt_ms: float = 333.0
    queue_pkts: int = 0  # explicit override; 0 derives from the BDP rule
    # bookkeeping
    base_dir: Path = field(default=Path("."), compare=False)

    # ------------------------------------------------------------- derived

    @property
    def horizon_ns(self):
        return seconds(self.content_s) + seconds(self.startup_allowance_s)

    def transport_config(self):
        return TransportConfig(
            initial_cwnd_pkts=self.initial_cwnd_pkts,
            initial_ssthresh_bytes=self.initial_ssthresh_bytes,
            idle_timeout_ns=seconds(self.idle_timeout_s),
            reordering_threshold_pkts=self.reordering_threshold_pkts,
            max_tail_loss_probes=self.max_tail_loss_probes,
            min_rto_ns=millis(self.min_rto_ms),
            delayed_ack_timeout_ns=millis(self.delayed_ack_ms),
            initial_rtt_ns=millis(self.initial_rtt_ms),
            mtu_payload_bytes=self.mtu_payload_bytes,
            header_bytes=self.header_bytes,
            max_buffered_bytes=round(self.playback_buffer_mb * 1024 * 1024),
        )

    def _queue_pkts(self, rate_bps):
        if self.queue_pkts:
            return self.queue_pkts
        pkt_bytes = self.mtu_payload_bytes + self.header_bytes
        bdp_bytes = rate_bps * self.queue_bdp_rtt_ms / 1000.0 / 8.0
        return max(int(round(bdp_bytes / pkt_bytes)), 10)

    def _link(self, rate_bps, trace, delay_ms, loss):
        rate = rate_bps
        if trace:
            rate = RateTrace.from_file(self.base_dir / trace)
        return LinkSpec(
            rate_bps=rate,
            prop_delay_ns=millis(delay_ms),
            queue_capacity_pkts=self._queue_pkts(rate_bps),
            loss_prob=loss,
        )

    def path_config(self):
        bh = lambda: self._link(self.backhaul_rate_bps, self.backhaul_trace,
                                self.backhaul_delay_ms, self.backhaul_loss)
        acc = lambda: self._link(self.access_rate_bps, self.access_trace,
                                 self.access_delay_ms, self.access_loss)
        return PathConfig(
            backhaul_down=bh(), backhaul_up=bh(),
            access_down=acc(), access_up=acc(), mtu=self.mtu,
        )


DEFAULT_MATRIX = (
    ("tcp", "bbr"), ("tcp", "newreno"), ("tcp", "cubic"),
    ("quic", "bbr"), ("quic", "newreno"),
)

_POSITIVE = {
    "n_users", "run_count", "content_s", "segment_s", "target_buffer_s",
    "resume_segments", "playback_buffer_mb", "throughput_ewma_alpha",
    "delta_scale", "initial_cwnd_pkts", "initial_ssthresh_bytes",
    "idle_timeout_s", "reordering_threshold_pkts", "max_tail_loss_probes",
    "min_rto_ms", "delayed_ack_ms", "initial_rtt_ms", "mtu_payload_bytes",
    "header_bytes", "mtu", "backhaul_rate_bps", "queue_bdp_rtt_ms",
    "access_rate_bps",
}
_NON_NEGATIVE = {
    "base_seed", "startup_allowance_s", "down_switch_safety",
    "up_switch_margin", "down_switch_margin",
    "start_jitter_ms", "backhaul_delay_ms", "access_delay_ms",
    "backhaul_loss", "access_loss", "queue_pkts",
}


def _parse_value(name, text, kind, lineno):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(float(part)) for part in text.split(","))
        return text
    except ValueError:
        raise ScenarioError(
            f"line {lineno}: cannot parse {name} = {text!r} as {kind.__name__}"
        ) from None


def _check_range(name, value, lineno):
    where = f"line {lineno}: " if lineno else ""
    if name in _POSITIVE and not (isinstance(value, tuple) or value > 0):
        raise ScenarioError(f"{where}{name} must be strictly positive")
    if name in _NON_NEGATIVE and value < 0:
        raise ScenarioError(f"{where}{name} must be non-negative")
    if name in ("backhaul_loss", "access_loss") and value > 1:
        raise ScenarioError(f"{where}{name} is a probability and must be <= 1")
    if name == "transport" and value not in ("tcp", "quic"):
        raise ScenarioError(f"{where}transport must be 'tcp' or 'quic'")
    if name == "cc" and value not in ("newreno", "cubic", "bbr"):
        raise ScenarioError(f"{where}cc must be newreno, cubic, or bbr")


def parse_scenario(path):
    """Parse a scenario file into a fully resolved ScenarioConfig."""
    path = Path(path)
    kinds = {f.name: type(f.default) for f in fields(ScenarioConfig)
             if f.name != "base_dir"}
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ScenarioError(f"line {lineno}: expected 'key = value'")
            name, _, text = line.partition("=")
            name, text = name.strip(), text.strip()
            if name == "base_dir" or name not in kinds:
                raise ScenarioError(f"line {lineno}: unknown key {name!r}")
            if name in overrides:
                raise ScenarioError(f"line {lineno}: duplicate key {name!r}")
            value = _parse_value(name, text, kinds[name], lineno)
            _check_range(name, value, lineno)
            overrides[name] = value
    cfg = ScenarioConfig(base_dir=path.parent, **overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    for f in fields(cfg):
        if f.name in ("base_dir",):
            continue
        _check_range(f.name, getattr(cfg, f.name), 0)
    from .dash import validate_ladder

    validate_ladder(cfg.ladder_bps)
    if seconds(cfg.content_s) % seconds(cfg.segment_s):
        raise ScenarioError("content_s must be a whole number of segments")


def echo_config(cfg, path):
    """Serialize the resolved config; parsing the echo reproduces it."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        if f.name == "base_dir":
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def with_cell(cfg, transport, cc):
    return replace(cfg, transport=transport, cc=cc)
