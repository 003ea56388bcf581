"""Reliable transport over the lossy path, in two modes.

TcpLike exposes a single ordered byte stream per direction (stream id 0), so
one lost packet blocks every byte queued behind it. QuicLike multiplexes
independent ordered streams; loss on one stream never delays delivery on
another. Everything else is shared: connection-wide monotone packet numbers
(retransmissions always get fresh ones), cumulative-plus-ranges ACKs, count
based loss declaration, tail loss probes backed by an RTO, delayed ACKs, and
RFC 6298 RTT estimation seeded from the configured initial estimate.

Application payloads are synthetic: a message is queued as a byte count plus
an opaque descriptor, and the receiving side learns the descriptor only when
the transport has delivered the message's final contiguous byte.
"""

import bisect
from collections import deque
from dataclasses import dataclass

from .cc import AckSample, make_cc
from .engine import NS_PER_SEC, make_rng

TCP_LIKE = "tcp"
QUIC_LIKE = "quic"


class ProtocolError(Exception):
    """In-simulator protocol violation; always a bug, so it fails loudly."""


class ConnectionClosed(Exception):
    pass


@dataclass
class TransportConfig:
    initial_cwnd_pkts: int = 10
    initial_ssthresh_bytes: int = 65535
    idle_timeout_ns: int = 30 * NS_PER_SEC
    reordering_threshold_pkts: int = 2
    max_tail_loss_probes: int = 5
    min_rto_ns: int = 200_000_000
    delayed_ack_timeout_ns: int = 25_000_000
    initial_rtt_ns: int = 333_000_000
    mtu_payload_bytes: int = 1200
    header_bytes: int = 40
    ack_packet_bytes: int = 40
    max_buffered_bytes: int = 512 * 1024 * 1024  # flow cap; never binds

    def __post_init__(self):
        for name in (
            "initial_cwnd_pkts", "initial_ssthresh_bytes", "idle_timeout_ns",
            "reordering_threshold_pkts", "max_tail_loss_probes", "min_rto_ns",
            "delayed_ack_timeout_ns", "initial_rtt_ns", "mtu_payload_bytes",
            "header_bytes", "ack_packet_bytes", "max_buffered_bytes",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


class RttEstimator:
    """RFC 6298 smoothing, primed from the initial RTT estimate."""

    def __init__(self, initial_rtt_ns):
        self.srtt_ns = initial_rtt_ns
        self.rttvar_ns = initial_rtt_ns / 2
        self.min_rtt_ns = None
        self.latest_ns = None
        self.has_sample = False

    def on_sample(self, rtt_ns):
        self.latest_ns = rtt_ns
        if self.min_rtt_ns is None or rtt_ns < self.min_rtt_ns:
            self.min_rtt_ns = rtt_ns
        if not self.has_sample:
            self.srtt_ns = rtt_ns
            self.rttvar_ns = rtt_ns / 2
            self.has_sample = True
        else:
            self.rttvar_ns = 0.75 * self.rttvar_ns + 0.25 * abs(self.srtt_ns - rtt_ns)
            self.srtt_ns = 0.875 * self.srtt_ns + 0.125 * rtt_ns

    def rto_ns(self, min_rto_ns):
        return max(self.srtt_ns + 4 * self.rttvar_ns, min_rto_ns)


class DataFrame:
    __slots__ = ("pkt_num", "stream_id", "offset", "length", "conn_id")

    def __init__(self, pkt_num, stream_id, offset, length, conn_id):
        self.pkt_num = pkt_num
        self.stream_id = stream_id
        self.offset = offset
        self.length = length
        self.conn_id = conn_id


class AckFrame:
    __slots__ = ("largest", "ranges", "conn_id")

    def __init__(self, largest, ranges, conn_id):
        self.largest = largest
        self.ranges = ranges  # list of (lo, hi) inclusive, ascending
        self.conn_id = conn_id


class SentPacket:
    __slots__ = (
        "num", "stream_id", "offset", "length", "size", "sent_time",
        "delivered_at_send", "delivered_time_at_send", "app_limited",
    )

    def __init__(self, num, stream_id, offset, length, size, sent_time,
                 delivered_at_send, delivered_time_at_send, app_limited):
        self.num = num
        self.stream_id = stream_id
        self.offset = offset
        self.length = length
        self.size = size
        self.sent_time = sent_time
        self.delivered_at_send = delivered_at_send
        self.delivered_time_at_send = delivered_time_at_send
        self.app_limited = app_limited


class SendStream:
    __slots__ = ("id", "queued", "next_offset")

    def __init__(self, stream_id):
        self.id = stream_id
        self.queued = 0  # total bytes ever queued
        self.next_offset = 0  # first never-sent byte

    @property
    def pending(self):
        return self.queued - self.next_offset


class RecvStream:
    """Out-of-order byte ranges plus the contiguous delivery frontier."""

    __slots__ = ("id", "delivered_offset", "ranges", "boundaries")

    def __init__(self, stream_id):
        self.id = stream_id
        self.delivered_offset = 0
        self.ranges = []  # disjoint sorted [start, end) beyond the frontier
        self.boundaries = deque()  # (end_offset, descriptor), ascending

    def insert(self, offset, length):
        """Add [offset, offset+length); returns newly contiguous byte count."""
        end = offset + length
        if end <= self.delivered_offset:
            return 0
        offset = max(offset, self.delivered_offset)
        ranges = self.ranges
        i = bisect.bisect_left(ranges, (offset, -1))
        if i > 0 and ranges[i - 1][1] >= offset:
            i -= 1
            offset = min(offset, ranges[i][0])
        j = i
        while j < len(ranges) and ranges[j][0] <= end:
            end = max(end, ranges[j][1])
            j += 1
        ranges[i:j] = [(offset, end)]
        before = self.delivered_offset
        if ranges and ranges[0][0] <= self.delivered_offset:
            self.delivered_offset = ranges.pop(0)[1]
        return self.delivered_offset - before

    def completed_messages(self):
        done = []
        while self.boundaries and self.boundaries[0][0] <= self.delivered_offset:
            done.append(self.boundaries.popleft()[1])
        return done


class ConnectionStats:
    __slots__ = (
        "packets_sent", "packets_acked", "packets_lost", "tlp_probes",
        "rto_events", "rtt_samples_ns", "bytes_delivered",
    )

    def __init__(self):
        self.packets_sent = 0
        self.packets_acked = 0
        self.packets_lost = 0
        self.tlp_probes = 0
        self.rto_events = 0
        self.rtt_samples_ns = []
        self.bytes_delivered = 0


MAX_ACK_RANGES = 32
MAX_TRACKED_RANGES = 1024


class Connection:
    """One endpoint of a long-lived transport connection.

    Both ends run the same class; `send_packet` hands wire packets to the
    network, `on_datagram` is the inbox. The peer reference is set when the
    two ends are paired and carries only message-boundary metadata, never
    timing.
    """

    def __init__(self, engine, mode, cc_name, config, local_id, peer_id,
                 send_packet, run_seed, conn_id, trace_cc=False,
                 trace_events=False):
        if mode not in (TCP_LIKE, QUIC_LIKE):
            raise ValueError(f"unknown transport mode {mode!r}")
        self.engine = engine
        self.mode = mode
        self.config = config
        self.local_id = local_id
        self.peer_id = peer_id
        self.send_packet = send_packet
        self.conn_id = conn_id
        self.rtt = RttEstimator(config.initial_rtt_ns)
        # cc counts wire bytes, so its segment unit is the full packet size
        wire_mss = config.mtu_payload_bytes + config.header_bytes
        self.cc = make_cc(
            cc_name, wire_mss, config.initial_cwnd_pkts,
            config.initial_ssthresh_bytes, self.rtt,
            make_rng(run_seed, "cc", conn_id),
        )
        self.peer = None  # set by pair()
        self.closed = False
        self.close_reason = None
        self.on_message = None  # fn(stream_id, descriptor, t)
        self.on_stream_data = None  # fn(stream_id, new_contiguous_bytes, t)
        self.on_closed = None  # fn(reason, t)

        self.send_streams = {}
        self.recv_streams = {}
        self._active_streams = deque()  # round-robin ids with fresh data
        self._rtx_queue = deque()  # (stream_id, offset, length)
        self._rtx_bytes = 0
        self._pending_bytes = 0

        self.next_pkt_num = 0
        self.sent = {}  # pkt_num -> SentPacket, insertion == number order
        self.bytes_in_flight = 0
        self.delivered_bytes = 0
        self.delivered_time = 0

        self._recv_ranges = []  # acked/received packet numbers, [(lo, hi)]
        self._largest_received = -1
        self._ack_pending = 0
        self._ack_timer = None

        self._pacing_next = 0
        self._pacing_quantum = 0  # one-packet slack, so sends pair up
        self._send_timer = None
        self._loss_timer = None
        self._loss_timer_at = 0
        self._loss_deadline = None
        self._loss_anchor = 0
        self.tlp_count = 0
        self.rto_backoff = 1

        self._idle_timer = None
        self._last_activity = engine.now()

        self.stats = ConnectionStats()
        self.cc_trace = [] if trace_cc else None
        # (t_ns, kind, key, size): kind in sent/acked/lost keyed by packet
        # number, or delivered keyed by stream id with the new byte count
        self.event_trace = [] if trace_events else None
        self._arm_idle()

    def pair(self, other):
        self.peer = other
        other.peer = self

    # ---------------------------------------------------------- application

    def send_stream(self, stream_id):
        if self.mode == TCP_LIKE and stream_id != 0:
            raise ProtocolError("TcpLike carries exactly one stream (id 0)")
        s = self.send_streams.get(stream_id)
        if s is None:
            s = self.send_streams[stream_id] = SendStream(stream_id)
        return s

    def recv_stream(self, stream_id):
        s = self.recv_streams.get(stream_id)
        if s is None:
            s = self.recv_streams[stream_id] = RecvStream(stream_id)
        return s

    def send_message(self, stream_id, length, descriptor):
        """Queue `length` bytes on a stream; the peer's application learns
        `descriptor` when the last byte is delivered in order."""
        if self.closed:
            raise ConnectionClosed(self.close_reason or "connection closed")
        if length <= 0:
            raise ValueError("message length must be positive")
        stream = self.send_stream(stream_id)
        if stream.pending + length > self.config.max_buffered_bytes:
            raise ProtocolError("send buffer overflow beyond flow cap")
        had_pending = stream.pending > 0
        stream.queued += length
        self._pending_bytes += length
        peer_stream = self.peer.recv_stream(stream_id)
        peer_stream.boundaries.append((stream.queued, descriptor))
        if not had_pending:
            self._active_streams.append(stream_id)
        self._try_send()

    def latency_sample_ms(self):
        """Latest one-way latency estimate: half the last measured RTT."""
        if self.rtt.latest_ns is None:
            return None
        return self.rtt.latest_ns / 2 / 1_000_000

    def close(self, reason):
        if self.closed:
            return
        self.closed = True
        self.close_reason = reason
        for timer in (self._ack_timer, self._send_timer, self._loss_timer,
                      self._idle_timer):
            if timer is not None:
                timer.cancel()
        if self.on_closed is not None:
            self.on_closed(reason, self.engine.now())

    # ---------------------------------------------------------- sending

    def _next_chunk(self):
        if self._rtx_queue:
            chunk = self._rtx_queue.popleft()
            self._rtx_bytes -= chunk[2]
            return chunk
        while self._active_streams:
            sid = self._active_streams[0]
            stream = self.send_streams[sid]
            if stream.pending <= 0:
                self._active_streams.popleft()
                continue
            length = min(stream.pending, self.config.mtu_payload_bytes)
            chunk = (sid, stream.next_offset, length)
            stream.next_offset += length
            self._pending_bytes -= length
            self._active_streams.rotate(-1)
            if stream.pending <= 0 and self._active_streams[-1] == sid:
                self._active_streams.pop()
            return chunk
        return None

    def _has_sendable(self):
        return self._rtx_bytes > 0 or self._pending_bytes > 0

    def _try_send(self):
        if self.closed:
            return
        t = self.engine.now()
        cfg = self.config
        cwnd = self.cc.cwnd_bytes()  # stable until the next ack/timeout
        paced = self.rtt.has_sample
        while self._rtx_bytes > 0 or self._pending_bytes > 0:
            if self._rtx_queue:
                size_next = self._rtx_queue[0][2] + cfg.header_bytes
            else:
                size_next = cfg.mtu_payload_bytes + cfg.header_bytes
            if self.bytes_in_flight + size_next > cwnd:
                return  # window gated; ACKs reopen it
            if paced and self._pacing_next > t + self._pacing_quantum:
                self._arm_send_timer(self._pacing_next - self._pacing_quantum)
                return
            chunk = self._next_chunk()
            self._emit(chunk, t)

    def _emit(self, chunk, t):
        sid, offset, length = chunk
        size = length + self.config.header_bytes
        num = self.next_pkt_num
        self.next_pkt_num = num + 1
        app_limited = (not self._has_sendable()) and (
            self.bytes_in_flight + size < self.cc.cwnd_bytes()
        )
        if self.bytes_in_flight == 0:
            self.delivered_time = t
        pkt = SentPacket(
            num, sid, offset, length, size, t,
            self.delivered_bytes, self.delivered_time, app_limited,
        )
        self.sent[num] = pkt
        self.bytes_in_flight += size
        self.stats.packets_sent += 1
        if self.event_trace is not None:
            self.event_trace.append((t, "sent", num, size))
        if self.rtt.has_sample:
            rate = self.cc.pacing_rate_bps()
            delta = round(size * 8 * NS_PER_SEC / rate)
            base = self._pacing_next if self._pacing_next > t else t
            self._pacing_next = base + delta
            self._pacing_quantum = delta
        self.send_packet(size, DataFrame(num, sid, offset, length, self.conn_id))
        self._loss_anchor = t
        self._arm_loss_timer()
        self._last_activity = t

    def _arm_send_timer(self, when):
        if self._send_timer is not None:
            self._send_timer.cancel()
        self._send_timer = self.engine.schedule(when, self._on_send_timer)

    def _on_send_timer(self):
        self._send_timer = None
        self._try_send()

    # ---------------------------------------------------------- receiving

    def on_datagram(self, frame):
        if self.closed:
            return
        t = self.engine.now()
        self._last_activity = t
        if isinstance(frame, AckFrame):
            self._on_ack(frame, t)
        else:
            self._on_data(frame, t)

    def _on_data(self, frame, t):
        num = frame.pkt_num
        out_of_order = num != self._largest_received + 1
        if num > self._largest_received:
            self._largest_received = num
        self._insert_recv_num(num)

        stream = self.recv_stream(frame.stream_id)
        advanced = stream.insert(frame.offset, frame.length)
        if advanced:
            if self.on_stream_data is not None:
                self.on_stream_data(frame.stream_id, advanced, t)
            if self.event_trace is not None:
                self.event_trace.append((t, "delivered", frame.stream_id, advanced))
        done = stream.completed_messages()
        if done and self.on_message is not None:
            for descriptor in done:
                self.on_message(frame.stream_id, descriptor, t)

        self._ack_pending += 1
        if out_of_order or self._ack_pending >= 2:
            self._send_ack()
        elif self._ack_timer is None:
            self._ack_timer = self.engine.schedule(
                t + self.config.delayed_ack_timeout_ns, self._on_ack_timer
            )

    def _insert_recv_num(self, num):
        ranges = self._recv_ranges
        if ranges and ranges[-1][1] == num - 1:
            ranges[-1] = (ranges[-1][0], num)
            return
        if ranges and num <= ranges[-1][1]:
            i = bisect.bisect_left(ranges, (num, num))
            if i < len(ranges) and ranges[i][0] <= num <= ranges[i][1]:
                return
            if i > 0 and ranges[i - 1][0] <= num <= ranges[i - 1][1]:
                return
            lo = hi = num
            if i > 0 and ranges[i - 1][1] == num - 1:
                lo = ranges.pop(i - 1)[0]
                i -= 1
            if i < len(ranges) and ranges[i][0] == num + 1:
                hi = ranges.pop(i)[1]
            ranges.insert(i, (lo, hi))
            return
        ranges.append((num, num))
        if len(ranges) > MAX_TRACKED_RANGES:
            del ranges[: len(ranges) - MAX_TRACKED_RANGES]

    def _on_ack_timer(self):
        self._ack_timer = None
        if self._ack_pending:
            self._send_ack()

    def _send_ack(self):
        if self._ack_timer is not None:
            self._ack_timer.cancel()
            self._ack_timer = None
        self._ack_pending = 0
        ranges = self._recv_ranges[-MAX_ACK_RANGES:]  # slice is already a copy
        frame = AckFrame(self._largest_received, ranges, self.conn_id)
        self.send_packet(self.config.ack_packet_bytes, frame)

    # ---------------------------------------------------------- ACK handling

    def _on_ack(self, frame, t):
        if frame.largest >= self.next_pkt_num:
            raise ProtocolError(
                f"ACK for packet {frame.largest} which was never sent"
            )
        newly = self._collect_newly_acked(frame.ranges)
        lost = self._detect_losses(frame.ranges)
        if not newly and not lost:
            return

        trace = self.event_trace
        acked_bytes = 0
        largest_pkt = None
        for pkt in newly:
            self.bytes_in_flight -= pkt.size
            acked_bytes += pkt.size
            if largest_pkt is None or pkt.num > largest_pkt.num:
                largest_pkt = pkt
            if trace is not None:
                trace.append((t, "acked", pkt.num, pkt.size))
        self.stats.packets_acked += len(newly)

        rtt_sampled = False
        if largest_pkt is not None and largest_pkt.num == frame.largest:
            rtt = t - largest_pkt.sent_time
            self.rtt.on_sample(rtt)
            self.stats.rtt_samples_ns.append(rtt)
            rtt_sampled = True

        for pkt in lost:
            self.bytes_in_flight -= pkt.size
            self._rtx_queue.append((pkt.stream_id, pkt.offset, pkt.length))
            self._rtx_bytes += pkt.length
            self.stats.packets_lost += 1
            self.cc.on_loss(t, pkt.sent_time)
            if trace is not None:
                trace.append((t, "lost", pkt.num, pkt.size))

        if newly:
            self.delivered_bytes += acked_bytes
            self.delivered_time = t
            self.tlp_count = 0
            self.rto_backoff = 1
            ref = largest_pkt
            elapsed = t - ref.delivered_time_at_send
            rate = 0.0
            if elapsed > 0:
                rate = (self.delivered_bytes - ref.delivered_at_send) \
                    * 8 * NS_PER_SEC / elapsed
            sample = AckSample(
                acked_bytes=acked_bytes,
                rtt_ns=self.rtt.latest_ns if rtt_sampled else (
                    self.rtt.latest_ns or self.rtt.srtt_ns),
                sent_time_ns=ref.sent_time,
                delivery_rate_bps=rate,
                pkt_delivered_at_send=ref.delivered_at_send,
                delivered_total=self.delivered_bytes,
                app_limited=ref.app_limited,
                inflight_bytes=self.bytes_in_flight,
            )
            self.cc.on_ack(sample, t)
            if self.cc_trace is not None:
                self.cc_trace.append(
                    (t, self.cc.cwnd_bytes(), self.cc.pacing_rate_bps(),
                     self.cc.mode())
                )
        self._loss_anchor = t
        self._arm_loss_timer()
        self._try_send()

    def _collect_newly_acked(self, ranges):
        # merge-join: self.sent iterates in ascending packet-number order
        sent = self.sent
        hit = []
        ri, nr = 0, len(ranges)
        last_hi = ranges[-1][1]
        for num in sent:
            if num > last_hi:
                break
            while ri < nr and ranges[ri][1] < num:
                ri += 1
            if ri == nr:
                break
            if ranges[ri][0] <= num:
                hit.append(num)
        return [sent.pop(num) for num in hit]

    def _detect_losses(self, ranges):
        """A packet is lost once `reordering_threshold` higher-numbered
        packets have been acked (counted against the ACK's range set)."""
        if not self.sent:
            return []
        threshold = self.config.reordering_threshold_pkts
        suffix = [0] * (len(ranges) + 1)
        for i in range(len(ranges) - 1, -1, -1):
            lo, hi = ranges[i]
            suffix[i] = suffix[i + 1] + (hi - lo + 1)
        lost_nums = []
        for num in self.sent:
            i = bisect.bisect_right(ranges, (num, float("inf")))
            if i > 0 and ranges[i - 1][1] > num:
                above = suffix[i - 1] - (num - ranges[i - 1][0] + 1)
            else:
                above = suffix[i]
            if above >= threshold:
                lost_nums.append(num)
            else:
                break  # counts only shrink for higher numbers
        return [self.sent.pop(num) for num in lost_nums]

    # ---------------------------------------------------------- timers

    def _tlp_interval_ns(self):
        srtt = self.rtt.srtt_ns
        return max(2 * srtt, 1.5 * srtt + self.config.delayed_ack_timeout_ns)

    def _arm_loss_timer(self):
        # lazy: the scheduled event re-checks the live deadline, so pushing
        # the deadline out never needs a cancel+reschedule
        if not self.sent or self.closed:
            self._loss_deadline = None
            return
        if self.tlp_count < self.config.max_tail_loss_probes:
            delay = self._tlp_interval_ns()
        else:
            delay = self.rtt.rto_ns(self.config.min_rto_ns) * self.rto_backoff
        deadline = self._loss_anchor + round(delay)
        self._loss_deadline = deadline
        if self._loss_timer is None:
            self._loss_timer = self.engine.schedule(deadline, self._on_loss_timer)
            self._loss_timer_at = deadline
        elif deadline < self._loss_timer_at:
            self._loss_timer.cancel()
            self._loss_timer = self.engine.schedule(deadline, self._on_loss_timer)
            self._loss_timer_at = deadline

    def _on_loss_timer(self):
        self._loss_timer = None
        if self._loss_deadline is None or not self.sent:
            return
        t = self.engine.now()
        if t < self._loss_deadline:
            self._loss_timer = self.engine.schedule(
                self._loss_deadline, self._on_loss_timer
            )
            self._loss_timer_at = self._loss_deadline
            return
        if self.tlp_count < self.config.max_tail_loss_probes:
            self.tlp_count += 1
            self.stats.tlp_probes += 1
            last = self.sent[next(reversed(self.sent))]
            self._emit((last.stream_id, last.offset, last.length), t)
        else:
            # RTO: collapse the window and retransmit the earliest unacked
            self.stats.rto_events += 1
            self.rto_backoff *= 2
            self.cc.on_timeout(t)
            first_num = next(iter(self.sent))
            pkt = self.sent.pop(first_num)
            self.bytes_in_flight -= pkt.size
            self._rtx_queue.appendleft((pkt.stream_id, pkt.offset, pkt.length))
            self._rtx_bytes += pkt.length
            self._loss_anchor = t
            self._arm_loss_timer()
            self._try_send()

    def _arm_idle(self):
        self._idle_timer = self.engine.schedule(
            self._last_activity + self.config.idle_timeout_ns, self._on_idle
        )

    def _on_idle(self):
        self._idle_timer = None
        if self.closed:
            return
        deadline = self._last_activity + self.config.idle_timeout_ns
        now = self.engine.now()
        if now >= deadline:
            self.close("idle timeout")
        else:
            self._idle_timer = self.engine.schedule(deadline, self._on_idle)
