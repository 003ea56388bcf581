"""MPEG-DASH client and video server over one long-lived connection.

The client requests constant-bitrate segments one at a time, selects the
representation with the fuzzy controller applied to a smoothed throughput
estimate, and models playback as a draining media buffer with stall
bookkeeping. The server answers each request with a length-prefixed
response of exactly the segment's byte size.

All media time is integer nanoseconds, like the engine clock, so the
interruption accounting identity holds to the tick.
"""

from collections import deque
from dataclasses import dataclass

from .engine import NS_PER_SEC
from .fdash import FdashController, select_representation
from .transport import QUIC_LIKE, ProtocolError

REQUEST_BYTES = 16  # minimal length-prefixed request header
RESPONSE_HEADER_BYTES = 16

DEFAULT_LADDER_BPS = (400_000, 750_000, 1_200_000, 1_850_000, 2_850_000, 4_300_000)

EWMA_ALPHA = 0.5
SAMPLE_WINDOW_NS = 50_000_000  # throughput sampling granularity


def format_playback_log(log):
    """Render a playback event log as `<t_ns> <event> <detail>` lines."""
    return "".join(
        f"{t} {event} {detail}".rstrip() + "\n" for t, event, detail in log
    )


def validate_ladder(ladder):
    ladder = tuple(int(b) for b in ladder)
    if len(ladder) < 2:
        raise ValueError("bitrate ladder needs at least 2 representations")
    if any(b <= 0 for b in ladder):
        raise ValueError("bitrates must be positive")
    if any(a >= b for a, b in zip(ladder, ladder[1:])):
        raise ValueError("bitrate ladder must be strictly increasing")
    return ladder


def segment_payload_bytes(bitrate_bps, duration_ns):
    """Constant-bitrate model: size is fully determined by rate x duration."""
    return bitrate_bps * duration_ns // (8 * NS_PER_SEC)


@dataclass
class Manifest:
    ladder_bps: tuple = DEFAULT_LADDER_BPS
    segment_duration_ns: int = 2 * NS_PER_SEC
    content_length_ns: int = 60 * NS_PER_SEC

    def __post_init__(self):
        self.ladder_bps = validate_ladder(self.ladder_bps)
        if self.content_length_ns % self.segment_duration_ns:
            raise ValueError("content length must be a whole number of segments")

    @property
    def n_segments(self):
        return self.content_length_ns // self.segment_duration_ns


class VideoServer:
    """Stateless segment catalog behind the transport; one handler per
    client connection."""

    def __init__(self, manifest):
        self.manifest = manifest

    def attach(self, conn):
        conn.on_message = lambda sid, req, t: self._on_request(conn, sid, req)

    def segment_bytes(self, rep_index):
        return segment_payload_bytes(
            self.manifest.ladder_bps[rep_index], self.manifest.segment_duration_ns
        )

    def _on_request(self, conn, stream_id, request):
        kind, seg_index, rep_index = request
        if kind != "req":
            raise ProtocolError(f"unexpected message {request!r} on server")
        if not 0 <= seg_index < self.manifest.n_segments:
            raise ProtocolError(f"segment {seg_index} outside catalog")
        if not 0 <= rep_index < len(self.manifest.ladder_bps):
            raise ProtocolError(f"representation {rep_index} not in ladder")
        payload = self.segment_bytes(rep_index)
        conn.send_message(
            stream_id,
            RESPONSE_HEADER_BYTES + payload,
            ("seg", seg_index, rep_index, payload),
        )


class ThroughputEstimator:
    """Per-segment EWMA of measured download rate; progress is additionally
    coalesced into fixed 50 ms buckets for rate diagnostics."""

    def __init__(self, alpha=EWMA_ALPHA, window_ns=SAMPLE_WINDOW_NS):
        self.alpha = alpha
        self.window_ns = window_ns
        self.estimate_bps = None
        self._bucket_start = None
        self._bucket_bytes = 0
        self.bucket_rates_bps = deque(maxlen=64)

    def on_progress(self, t, nbytes):
        if self._bucket_start is None:
            self._bucket_start = t - t % self.window_ns
        while t - self._bucket_start >= self.window_ns:
            self.bucket_rates_bps.append(
                self._bucket_bytes * 8 * NS_PER_SEC / self.window_ns
            )
            self._bucket_bytes = 0
            self._bucket_start += self.window_ns
        self._bucket_bytes += nbytes

    def on_segment(self, payload_bytes, download_ns):
        rate = payload_bytes * 8 * NS_PER_SEC / max(download_ns, 1)
        if self.estimate_bps is None:
            self.estimate_bps = rate
        else:
            self.estimate_bps = self.alpha * rate + (1 - self.alpha) * self.estimate_bps
        return self.estimate_bps


class PlaybackState:
    """Media buffer in integer ns with stall bookkeeping.

    After playback has started the session is always exactly one of
    playing / stalled / finished, so elapsed time partitions into
    prestart + played + stalled with no remainder.
    """

    def __init__(self, content_ns, startup_threshold_ns, resume_threshold_ns, log):
        self.content_ns = content_ns
        self.startup_threshold_ns = startup_threshold_ns
        self.resume_threshold_ns = resume_threshold_ns
        self.log = log  # list of (t, event, detail)
        self.buffer_ns = 0
        self.position_ns = 0
        self.playing = False
        self.started = False
        self.finished = False
        self.start_time = None
        self.stalls = []  # [start, end]; end None while open
        self.byte_budget = 0
        self._byte_spans = deque()  # (end_position_ns, nbytes)
        self._last_t = 0

    def advance(self, t):
        """Drain played media up to time t (the playback_tick)."""
        dt = t - self._last_t
        self._last_t = t
        if not self.playing or dt <= 0:
            return
        playable = min(dt, self.buffer_ns, self.content_ns - self.position_ns)
        self.position_ns += playable
        self.buffer_ns -= playable
        while self._byte_spans and self._byte_spans[0][0] <= self.position_ns:
            self.byte_budget -= self._byte_spans.popleft()[1]
        if self.position_ns >= self.content_ns:
            self.playing = False
            self.finished = True
            return
        if self.buffer_ns == 0:
            # ran dry; the stall opened at the depletion instant
            self.playing = False
            stall_at = t - (dt - playable)
            self.stalls.append([stall_at, None])
            self.log.append((stall_at, "stall_begin", ""))

    def _maybe_start(self, t):
        remaining = self.content_ns - self.position_ns
        if self.buffer_ns < min(self.startup_threshold_ns, remaining):
            return
        if not self.started:
            self.started = True
            self.start_time = t
            self.playing = True
            self.log.append((t, "start", ""))
        elif not self.playing and not self.finished:
            threshold = min(self.resume_threshold_ns, remaining)
            if self.buffer_ns >= threshold:
                self.playing = True
                if self.stalls and self.stalls[-1][1] is None:
                    self.stalls[-1][1] = t
                    self.log.append((t, "stall_end", ""))

    def add_segment(self, t, duration_ns, nbytes):
        self.advance(t)
        self.buffer_ns += duration_ns
        self.byte_budget += nbytes
        self._byte_spans.append(
            (self.position_ns + self.buffer_ns, nbytes)
        )
        self._maybe_start(t)

    def close(self, t):
        """Finalize at session end; open stalls close at t."""
        self.advance(t)
        if self.stalls and self.stalls[-1][1] is None:
            self.stalls[-1][1] = t
        self.playing = False


@dataclass
class ClientConfig:
    target_buffer_s: float = 30.0
    resume_threshold_segments: int = 2
    playback_buffer_bytes: int = 512 * 1024 * 1024
    ewma_alpha: float = EWMA_ALPHA
    delta_scale: float = 0.5
    down_switch_safety: float = 0.5  # of target buffer
    # hysteresis against boundary chatter: step up only when the budget
    # clears the rung with margin, hold the rung while it nearly fits
    up_switch_margin: float = 0.1
    down_switch_margin: float = 0.1
    start_jitter_ns: int = 250_000_000
    max_switch_up_steps: int = 0  # 0 = unlimited


@dataclass
class SessionResult:
    user_id: int
    elapsed_ns: int
    playback_ns: int
    prestart_ns: int
    stall_ns: int
    stall_count: int
    residual_ns: int
    bytes_delivered: int
    played_bitrate_ns: list  # (bitrate, played media ns) per segment
    rtt_samples_ns: list
    rep_switches: int
    completed: bool
    close_reason: str
    log: list


class DashClient:
    """Drives segment requests over the connection and plays them back."""

    def __init__(self, engine, conn, manifest, config, user_id, rng,
                 on_session_end=None):
        self.engine = engine
        self.conn = conn
        self.manifest = manifest
        self.config = config
        self.user_id = user_id
        self.on_session_end = on_session_end

        self.log = []
        seg = manifest.segment_duration_ns
        resume = config.resume_threshold_segments * seg
        self.playback = PlaybackState(
            manifest.content_length_ns, resume, resume, self.log
        )
        self.estimator = ThroughputEstimator(alpha=config.ewma_alpha)
        self.controller = FdashController(
            target_buffer_s=config.target_buffer_s, delta_scale=config.delta_scale
        )
        self.target_buffer_ns = round(config.target_buffer_s * NS_PER_SEC)

        self.current_rep = 0
        self.next_segment = 0
        self.segment_reps = []  # bitrate per downloaded segment, in order
        self.rep_switches = 0
        self.bytes_delivered = 0
        self.ended = False
        self.result = None

        self._next_stream = 1
        self._request_sent_at = None
        self._outstanding = None
        self._underrun_timer = None
        self._wake_timer = None
        self._end_timer = None
        self._prev_decision = None  # (t, buffer_ns)

        conn.on_message = self._on_response
        conn.on_stream_data = lambda sid, n, t: self.estimator.on_progress(t, n)
        conn.on_closed = self._on_conn_closed

        start_at = engine.now()
        if config.start_jitter_ns > 0:
            start_at += rng.randrange(config.start_jitter_ns + 1)
        engine.schedule(start_at, self._start)

    # ------------------------------------------------------------- requests

    def _start(self):
        if not self.ended:
            self._request(self.next_segment)

    def _request(self, seg_index):
        rep = self._choose_representation()
        if rep != self.current_rep and self.segment_reps:
            self.rep_switches += 1
            self.log.append(
                (self.engine.now(), "rep_switch",
                 f"{self.current_rep}->{rep}")
            )
        self.current_rep = rep
        stream_id = 0 if self.conn.mode != QUIC_LIKE else self._next_stream
        self._next_stream += 1
        self._request_sent_at = self.engine.now()
        self._outstanding = (seg_index, rep, stream_id)
        self.conn.send_message(stream_id, REQUEST_BYTES, ("req", seg_index, rep))

    def _choose_representation(self):
        ladder = self.manifest.ladder_bps
        est = self.estimator.estimate_bps
        if est is None:
            return 0  # bootstrap on the lowest rung
        t = self.engine.now()
        self.playback.advance(t)
        buffer_s = self.playback.buffer_ns / NS_PER_SEC
        delta = 0.0
        if self._prev_decision is not None:
            pt, pb = self._prev_decision
            if t > pt:
                delta = (self.playback.buffer_ns - pb) / (t - pt)
        self._prev_decision = (t, self.playback.buffer_ns)
        factor = self.controller.decide(buffer_s, delta)
        candidate = select_representation(ladder, factor, est)
        budget = factor * est
        seg_ns = self.manifest.segment_duration_ns
        if candidate > self.current_rep:
            # Schmitt trigger: each rung stepped up must clear its bitrate
            # with margin, or boundary noise flip-flops the selection
            up = self.current_rep
            for j in range(self.current_rep + 1, candidate + 1):
                if ladder[j] * (1.0 + self.config.up_switch_margin) <= budget:
                    up = j
            candidate = up
            if self.config.max_switch_up_steps:
                candidate = min(
                    candidate, self.current_rep + self.config.max_switch_up_steps
                )
            # never step up into a download the buffer cannot absorb
            dl_s = segment_payload_bytes(ladder[candidate], seg_ns) * 8 / est
            if self.playback.playing and buffer_s <= dl_s:
                candidate = self.current_rep
        elif candidate < self.current_rep:
            if budget >= ladder[self.current_rep] * (1.0 - self.config.down_switch_margin):
                candidate = self.current_rep  # still nearly fits: hold
            else:
                # hold while the buffer is projected to stay safe anyway
                dl_s = segment_payload_bytes(
                    ladder[self.current_rep], seg_ns) * 8 / est
                projected = buffer_s - dl_s + seg_ns / NS_PER_SEC
                if projected >= (self.config.down_switch_safety
                                 * self.config.target_buffer_s):
                    candidate = self.current_rep
        return candidate

    # ------------------------------------------------------------- responses

    def _on_response(self, stream_id, message, t):
        kind, seg_index, rep_index, payload = message
        if kind != "seg" or self._outstanding is None:
            raise ProtocolError(f"unexpected message {message!r} on client")
        if (seg_index, rep_index, stream_id) != self._outstanding:
            raise ProtocolError("response does not match outstanding request")
        self._outstanding = None
        download_ns = t - self._request_sent_at
        self.estimator.on_segment(payload, download_ns)
        self.bytes_delivered += payload
        self.segment_reps.append(self.manifest.ladder_bps[rep_index])
        self.playback.add_segment(t, self.manifest.segment_duration_ns, payload)
        self.log.append((t, "segment_done", f"{seg_index}@{rep_index}"))
        self.next_segment = seg_index + 1
        self._reschedule_playback_watch()
        self._maybe_request_next()

    def _maybe_request_next(self):
        if self.ended or self._outstanding is not None:
            return
        if self.next_segment >= self.manifest.n_segments:
            return  # catalog exhausted; play out what is buffered
        t = self.engine.now()
        self.playback.advance(t)
        seg_bytes = segment_payload_bytes(
            self.manifest.ladder_bps[self.current_rep],
            self.manifest.segment_duration_ns,
        )
        over_budget = (
            self.playback.byte_budget + seg_bytes > self.config.playback_buffer_bytes
        )
        if self.playback.buffer_ns < self.target_buffer_ns and not over_budget:
            self._request(self.next_segment)
            return
        # defer: wake when the buffer drains back below target
        wake_after = max(self.playback.buffer_ns - self.target_buffer_ns, 0) + 1
        if self._wake_timer is not None:
            self._wake_timer.cancel()
        self._wake_timer = self.engine.schedule_after(wake_after, self._on_wake)

    def _on_wake(self):
        self._wake_timer = None
        self._maybe_request_next()

    # ------------------------------------------------------------- playback

    def _reschedule_playback_watch(self):
        pb = self.playback
        if self._underrun_timer is not None:
            self._underrun_timer.cancel()
            self._underrun_timer = None
        if self._end_timer is not None:
            self._end_timer.cancel()
            self._end_timer = None
        if not pb.playing:
            return
        remaining = pb.content_ns - pb.position_ns
        if pb.buffer_ns >= remaining:
            self._end_timer = self.engine.schedule_after(remaining, self._on_content_end)
        else:
            self._underrun_timer = self.engine.schedule_after(
                pb.buffer_ns, self._on_underrun
            )

    def _on_underrun(self):
        # advance() opens the stall itself the moment the buffer empties
        self._underrun_timer = None
        pb = self.playback
        pb.advance(self.engine.now())
        if pb.playing:
            self._reschedule_playback_watch()

    def _on_content_end(self):
        self._end_timer = None
        self.playback.advance(self.engine.now())
        if self.playback.finished:
            self.finish("completed")
        else:
            self._reschedule_playback_watch()

    # ------------------------------------------------------------- teardown

    def _on_conn_closed(self, reason, t):
        if self.ended:
            return
        needs_network = (
            self._outstanding is not None
            or self.next_segment < self.manifest.n_segments
        )
        if needs_network:
            self.finish(f"connection closed: {reason}")
        # otherwise playback continues from the buffer alone

    def finish(self, reason):
        if self.ended:
            return
        self.ended = True
        t = self.engine.now()
        self.playback.close(t)
        for timer in (self._underrun_timer, self._wake_timer, self._end_timer):
            if timer is not None:
                timer.cancel()
        pb = self.playback
        prestart = (pb.start_time if pb.start_time is not None else t)
        stall_ns = sum(end - start for start, end in pb.stalls)
        residual = t - prestart - pb.position_ns - stall_ns
        # latency trace comes from the data sender's socket (the server
        # side), which samples RTT on every ACK of media data; the client
        # side only samples its sparse request packets
        rtt_trace = self.conn.peer.stats.rtt_samples_ns
        if not rtt_trace:
            rtt_trace = self.conn.stats.rtt_samples_ns
        played = []
        pos = 0
        seg = self.manifest.segment_duration_ns
        for bitrate in self.segment_reps:
            if pos >= pb.position_ns:
                break
            played.append((bitrate, min(seg, pb.position_ns - pos)))
            pos += seg
        self.result = SessionResult(
            user_id=self.user_id,
            elapsed_ns=t,
            playback_ns=pb.position_ns,
            prestart_ns=prestart,
            stall_ns=stall_ns,
            stall_count=len(pb.stalls),
            residual_ns=residual,
            bytes_delivered=self.bytes_delivered,
            played_bitrate_ns=played,
            rtt_samples_ns=list(rtt_trace),
            rep_switches=self.rep_switches,
            completed=pb.finished,
            close_reason=reason,
            log=self.log,
        )
        if not self.conn.closed:
            self.conn.close("session complete")
        if self.on_session_end is not None:
            self.on_session_end(self)
