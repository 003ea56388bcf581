"""Pluggable congestion control: NewReno, CUBIC, and BBR (v1 semantics).

All three drive the same two knobs the transport reads before every send
decision: cwnd_bytes() and pacing_rate_bps(). Loss-based algorithms treat
pacing as burst shaping (2.0x cwnd/srtt in slow start, 1.2x in congestion
avoidance); BBR paces from its bottleneck-bandwidth model.

Recovery bookkeeping is time-based: a loss or ACK refers to a packet's send
time, and a new window reduction happens only for packets sent after the
current recovery episode began. This matches the transport's rule that
retransmissions always carry fresh packet numbers.
"""

import math
from collections import deque
from dataclasses import dataclass

from .engine import NS_PER_SEC

CUBIC_C = 0.4
CUBIC_BETA = 0.7
BBR_STARTUP_GAIN = 2.0 / math.log(2.0)
BBR_DRAIN_GAIN = 1.0 / BBR_STARTUP_GAIN
BBR_PROBE_BW_GAINS = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
BBR_CWND_GAIN = 2.0
BBR_BTLBW_WINDOW_ROUNDS = 10
BBR_MIN_RTT_WINDOW_NS = 10 * NS_PER_SEC
BBR_PROBE_RTT_DURATION_NS = 200_000_000
BBR_MIN_PIPE_CWND_PKTS = 4
BBR_FULL_BW_THRESH = 1.25
BBR_FULL_BW_COUNT = 3

PACING_GAIN_SLOW_START = 2.0
PACING_GAIN_AVOIDANCE = 1.2


@dataclass
class AckSample:
    """Per-ACK feedback handed to the congestion controller."""

    acked_bytes: int
    rtt_ns: int
    sent_time_ns: int
    delivery_rate_bps: float
    pkt_delivered_at_send: int  # conn delivered-bytes counter when pkt left
    delivered_total: int
    app_limited: bool
    inflight_bytes: int


class CongestionControl:
    """Interface shared by every algorithm; one instance per connection."""

    name = "base"

    def __init__(self, mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt):
        self.mss = mss
        self.cwnd = initial_cwnd_pkts * mss
        self.ssthresh = initial_ssthresh_bytes
        self.rtt = rtt  # RttEstimator owned by the connection
        self.recovery_start_time = -1
        self._recovering = False

    def cwnd_bytes(self):
        return self.cwnd

    def pacing_rate_bps(self):
        gain = (
            PACING_GAIN_SLOW_START
            if self.cwnd < self.ssthresh
            else PACING_GAIN_AVOIDANCE
        )
        return gain * self.cwnd * 8 * NS_PER_SEC / self.rtt.srtt_ns

    def in_recovery(self, sent_time_ns):
        return sent_time_ns <= self.recovery_start_time

    def mode(self):
        if self._recovering:
            return "recovery"
        return "slow_start" if self.cwnd < self.ssthresh else "avoidance"

    def on_ack(self, sample, t):
        raise NotImplementedError

    def on_loss(self, t, sent_time_ns):
        raise NotImplementedError

    def on_timeout(self, t):
        raise NotImplementedError


class NewReno(CongestionControl):
    """RFC 5681/6582 dynamics with a single reduction per window."""

    name = "newreno"

    def on_ack(self, sample, t):
        if self.in_recovery(sample.sent_time_ns):
            return
        self._recovering = False
        if self.cwnd < self.ssthresh:
            self.cwnd += sample.acked_bytes
        else:
            self.cwnd += self.mss * sample.acked_bytes / self.cwnd

    def on_loss(self, t, sent_time_ns):
        if self.in_recovery(sent_time_ns):
            return
        self.recovery_start_time = t
        self._recovering = True
        self.ssthresh = max(self.cwnd / 2, 2 * self.mss)
        self.cwnd = self.ssthresh

    def on_timeout(self, t):
        self.recovery_start_time = t
        self._recovering = False
        self.ssthresh = max(self.cwnd / 2, 2 * self.mss)
        self.cwnd = self.mss


def cubic_k(w_max_mss, beta=CUBIC_BETA, c=CUBIC_C):
    """Seconds for the cubic curve to climb back to w_max."""
    return (w_max_mss * (1.0 - beta) / c) ** (1.0 / 3.0)


def cubic_window_mss(elapsed_s, w_max_mss, beta=CUBIC_BETA, c=CUBIC_C):
    """W(t) = C*(t-K)^3 + W_max, in MSS units."""
    k = cubic_k(w_max_mss, beta, c)
    return c * (elapsed_s - k) ** 3 + w_max_mss


class Cubic(CongestionControl):
    """Window growth along the cubic curve around the last loss point."""

    name = "cubic"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.w_max = 0.0  # MSS
        self.k = 0.0
        self.epoch_start = None  # ns of first ACK after a reduction

    def window_bytes(self, t):
        """Cubic target at absolute time t, with the TCP-friendly floor."""
        elapsed = (t - self.epoch_start) / NS_PER_SEC
        w_cubic = CUBIC_C * (elapsed - self.k) ** 3 + self.w_max
        rtt_s = self.rtt.srtt_ns / NS_PER_SEC
        w_est = self.w_max * CUBIC_BETA + (
            3.0 * (1.0 - CUBIC_BETA) / (1.0 + CUBIC_BETA)
        ) * (elapsed / rtt_s)
        return max(w_cubic, w_est) * self.mss

    def on_ack(self, sample, t):
        if self.in_recovery(sample.sent_time_ns):
            return
        self._recovering = False
        if self.cwnd < self.ssthresh:
            self.cwnd += sample.acked_bytes
            return
        if self.epoch_start is None:
            self.epoch_start = t
            if self.w_max < self.cwnd / self.mss:
                self.w_max = self.cwnd / self.mss
            self.k = cubic_k(self.w_max)
        target = self.window_bytes(t + self.rtt.srtt_ns)
        if target > self.cwnd:
            self.cwnd += sample.acked_bytes * (target - self.cwnd) / self.cwnd

    def _reduce(self, t):
        self.recovery_start_time = t
        self._recovering = True
        self.epoch_start = None
        cwnd_mss = self.cwnd / self.mss
        # fast convergence: remember a lower peak when capacity shrank
        if cwnd_mss < self.w_max:
            self.w_max = cwnd_mss * (1.0 + CUBIC_BETA) / 2.0
        else:
            self.w_max = cwnd_mss
        self.ssthresh = max(self.cwnd * CUBIC_BETA, 2 * self.mss)

    def on_loss(self, t, sent_time_ns):
        if self.in_recovery(sent_time_ns):
            return
        self._reduce(t)
        self.cwnd = self.ssthresh

    def on_timeout(self, t):
        self._reduce(t)
        self._recovering = False
        self.cwnd = self.mss


class Bbr(CongestionControl):
    """Model-based control: pace at the estimated bottleneck bandwidth,
    cap inflight from the windowed-min RTT. v1 state machine:
    Startup -> Drain -> ProbeBW cycling, with periodic ProbeRTT."""

    name = "bbr"

    STARTUP, DRAIN, PROBE_BW, PROBE_RTT = "startup", "drain", "probe_bw", "probe_rtt"

    def __init__(self, mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt, rng):
        super().__init__(mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt)
        self.rng = rng
        self.state = self.STARTUP
        self.pacing_gain = BBR_STARTUP_GAIN
        self.cwnd_gain = BBR_STARTUP_GAIN
        init_bw = self.cwnd * 8 * NS_PER_SEC / rtt.srtt_ns
        # windowed max as a monotonic deque: bw strictly decreases front
        # to back, front expires after BBR_BTLBW_WINDOW_ROUNDS rounds
        self._bw_samples = deque([(0, init_bw)])
        self.min_rtt_ns = rtt.srtt_ns
        self.min_rtt_stamp = 0
        self.round_count = 0
        self.next_round_delivered = 0
        self.full_bw = 0.0
        self.full_bw_count = 0
        self.filled_pipe = False
        self.cycle_index = 0
        self.cycle_stamp = 0
        self.probe_rtt_done_stamp = None
        self.prior_cwnd = self.cwnd
        self.prior_state = self.STARTUP

    def mode(self):
        return self.state

    def btl_bw(self):
        return self._bw_samples[0][1]

    def bdp_bytes(self, gain=1.0):
        return gain * self.btl_bw() * self.min_rtt_ns / (8 * NS_PER_SEC)

    def pacing_rate_bps(self):
        return self.pacing_gain * self.btl_bw()

    def _update_btl_bw(self, sample):
        round_start = sample.pkt_delivered_at_send >= self.next_round_delivered
        if round_start:
            self.round_count += 1
            self.next_round_delivered = sample.delivered_total
        samples = self._bw_samples
        rate = sample.delivery_rate_bps
        if rate > 0 and (not sample.app_limited or rate >= samples[0][1]):
            while samples and samples[-1][1] <= rate:
                samples.pop()
            samples.append((self.round_count, rate))
        horizon = self.round_count - BBR_BTLBW_WINDOW_ROUNDS
        while len(samples) > 1 and samples[0][0] <= horizon:
            samples.popleft()
        return round_start

    def _check_full_pipe(self, round_start, app_limited):
        if self.filled_pipe or not round_start or app_limited:
            return
        if self.btl_bw() >= self.full_bw * BBR_FULL_BW_THRESH:
            self.full_bw = self.btl_bw()
            self.full_bw_count = 0
        else:
            self.full_bw_count += 1
            if self.full_bw_count >= BBR_FULL_BW_COUNT:
                self.filled_pipe = True

    def _enter_probe_bw(self, t):
        self.state = self.PROBE_BW
        self.cwnd_gain = BBR_CWND_GAIN
        idx = self.rng.randrange(len(BBR_PROBE_BW_GAINS) - 1)
        if idx >= 1:
            idx += 1  # never start in the drain phase of the cycle
        self.cycle_index = idx
        self.cycle_stamp = t
        self.pacing_gain = BBR_PROBE_BW_GAINS[idx]

    def _advance_cycle(self, t, inflight):
        elapsed = t - self.cycle_stamp
        gain = BBR_PROBE_BW_GAINS[self.cycle_index]
        advance = elapsed > self.min_rtt_ns
        if gain < 1.0 and inflight <= self.bdp_bytes():
            advance = True  # queue drained early
        if advance:
            self.cycle_index = (self.cycle_index + 1) % len(BBR_PROBE_BW_GAINS)
            self.cycle_stamp = t
            self.pacing_gain = BBR_PROBE_BW_GAINS[self.cycle_index]

    def on_ack(self, sample, t):
        round_start = self._update_btl_bw(sample)
        self._check_full_pipe(round_start, sample.app_limited)

        rtt_expired = t - self.min_rtt_stamp > BBR_MIN_RTT_WINDOW_NS
        if sample.rtt_ns <= self.min_rtt_ns or rtt_expired:
            self.min_rtt_ns = sample.rtt_ns
            self.min_rtt_stamp = t

        if self.state == self.STARTUP and self.filled_pipe:
            self.state = self.DRAIN
            self.pacing_gain = BBR_DRAIN_GAIN
        if self.state == self.DRAIN and sample.inflight_bytes <= self.bdp_bytes():
            self._enter_probe_bw(t)
        elif self.state == self.PROBE_BW:
            self._advance_cycle(t, sample.inflight_bytes)

        if self.state != self.PROBE_RTT and rtt_expired:
            self.prior_state = self.state
            self.prior_cwnd = max(self.prior_cwnd, self.cwnd)
            self.state = self.PROBE_RTT
            self.pacing_gain = 1.0
            self.probe_rtt_done_stamp = None
        if self.state == self.PROBE_RTT:
            floor = BBR_MIN_PIPE_CWND_PKTS * self.mss
            if self.probe_rtt_done_stamp is None:
                if sample.inflight_bytes <= floor:
                    self.probe_rtt_done_stamp = t + BBR_PROBE_RTT_DURATION_NS
            elif t >= self.probe_rtt_done_stamp:
                self.min_rtt_stamp = t
                self.min_rtt_ns = sample.rtt_ns
                self.cwnd = max(self.cwnd, self.prior_cwnd)
                if self.filled_pipe:
                    self._enter_probe_bw(t)
                else:
                    self.state = self.STARTUP
                    self.pacing_gain = BBR_STARTUP_GAIN

        self._set_cwnd(sample, t)

    def _set_cwnd(self, sample, t):
        floor = BBR_MIN_PIPE_CWND_PKTS * self.mss
        if self.state == self.PROBE_RTT:
            self.cwnd = min(self.cwnd, floor)
            self.cwnd = max(self.cwnd, floor)
            return
        target = self.bdp_bytes(self.cwnd_gain)
        if self.filled_pipe:
            self.cwnd = min(self.cwnd + sample.acked_bytes, target)
        else:
            self.cwnd += sample.acked_bytes
        self.cwnd = max(self.cwnd, floor)

    def on_loss(self, t, sent_time_ns):
        # loss is not a primary congestion signal in v1
        pass

    def on_timeout(self, t):
        self.prior_cwnd = max(self.prior_cwnd, self.cwnd)
        self.cwnd = self.mss


ALGORITHMS = {"newreno": NewReno, "cubic": Cubic, "bbr": Bbr}


def make_cc(name, mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt, rng):
    try:
        cls = ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown congestion control {name!r}") from None
    if cls is Bbr:
        return Bbr(mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt, rng)
    return cls(mss, initial_cwnd_pkts, initial_ssthresh_bytes, rtt)
