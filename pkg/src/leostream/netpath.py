"""Two-hop network path: server <-> satellite backhaul <-> IAB relay <-> UE.

Each direction of each hop is a store-and-forward FIFO link with a drop-tail
queue counted in packets (the slot in service included), a fixed one-way
propagation delay, and independent per-packet random loss. Capacity may be a
constant bit rate or a piecewise-constant trace.

Only one engine event is spent per packet per hop: the queue is represented
by the multiset of scheduled service-end times, pruned lazily, so FIFO order
and work conservation hold by construction.
"""

import bisect
from collections import deque
from dataclasses import dataclass, field

from .engine import NS_PER_SEC

DEFAULT_MTU = 1500


class RateTrace:
    """Piecewise-constant link rate, anchored at t=0 and open-ended."""

    def __init__(self, points):
        # points: list of (time_ns, rate_bps), sorted, first at t<=0
        if not points:
            raise ValueError("empty rate trace")
        pts = sorted((int(t), int(r)) for t, r in points)
        if pts[0][0] > 0:
            pts.insert(0, (0, pts[0][1]))
        for _, r in pts:
            if r <= 0:
                raise ValueError("trace rate must be > 0 at all points")
        self.times = [t for t, _ in pts]
        self.rates = [r for _, r in pts]

    def rate_at(self, t_ns):
        i = bisect.bisect_right(self.times, t_ns) - 1
        return self.rates[max(i, 0)]

    def finish(self, start_ns, bits):
        """Time at which `bits` finish transmitting if started at start_ns."""
        t = start_ns
        remaining = bits
        i = bisect.bisect_right(self.times, t) - 1
        i = max(i, 0)
        while True:
            rate = self.rates[i]
            seg_end = self.times[i + 1] if i + 1 < len(self.times) else None
            if seg_end is None:
                return t + (remaining * NS_PER_SEC + rate - 1) // rate
            can_send = (seg_end - t) * rate // NS_PER_SEC
            if can_send >= remaining:
                return t + (remaining * NS_PER_SEC + rate - 1) // rate
            remaining -= can_send
            t = seg_end
            i += 1

    @classmethod
    def from_file(cls, path):
        """Load `<time_s> <rate_bps>` lines; '#' starts a comment."""
        points = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected '<time_s> <rate_bps>'")
                t_s, rate = float(parts[0]), float(parts[1])
                if t_s < 0 or rate <= 0:
                    raise ValueError(f"{path}:{lineno}: time must be >= 0 and rate > 0")
                points.append((round(t_s * NS_PER_SEC), int(rate)))
        times = [t for t, _ in points]
        if times != sorted(times):
            raise ValueError(f"{path}: trace times must be sorted")
        return cls(points)


@dataclass
class LinkSpec:
    rate_bps: object = 10_000_000  # int bps or RateTrace
    prop_delay_ns: int = 25_000_000
    queue_capacity_pkts: int = 100
    loss_prob: float = 0.0
    # test hook: per-link packet ordinals force-dropped (scripted loss)
    drop_indices: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if isinstance(self.rate_bps, (int, float)):
            self.rate_bps = int(self.rate_bps)
            if self.rate_bps <= 0:
                raise ValueError("link rate must be > 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")
        if self.queue_capacity_pkts < 1:
            raise ValueError("queue_capacity_pkts must be >= 1")


@dataclass
class PathConfig:
    """One IAB relay hop: two links in series each direction."""

    backhaul_down: LinkSpec
    backhaul_up: LinkSpec
    access_down: LinkSpec
    access_up: LinkSpec
    mtu: int = DEFAULT_MTU


class Packet:
    __slots__ = ("size", "src", "dst", "payload", "enqueue_time")

    def __init__(self, size, src, dst, payload):
        if size <= 0:
            raise ValueError("packet size must be > 0")
        self.size = size
        self.src = src
        self.dst = dst
        self.payload = payload
        self.enqueue_time = None


class Link:
    """Rate-limited, delay-ful, lossy FIFO link with a drop-tail queue."""

    def __init__(self, engine, spec, rng, deliver, mtu=DEFAULT_MTU, name=""):
        self.engine = engine
        self.spec = spec
        self.rng = rng
        self.deliver = deliver  # fn(pkt) invoked at arrival time
        self.mtu = mtu
        self.name = name
        self.busy_until = 0
        self._service_ends = deque()  # pending service-end times (occupancy)
        self._sent_count = 0
        self.delivered = 0
        self.dropped_queue = 0
        self.dropped_loss = 0
        # hot-path caches
        self._trace = spec.rate_bps if isinstance(spec.rate_bps, RateTrace) else None
        self._rate = spec.rate_bps if self._trace is None else 0
        self._prop = spec.prop_delay_ns
        self._capacity = spec.queue_capacity_pkts
        self._loss = spec.loss_prob
        self._drops = spec.drop_indices or None

    def occupancy(self, t):
        ends = self._service_ends
        while ends and ends[0] <= t:
            ends.popleft()
        return len(ends)

    def transmit(self, pkt):
        """Enqueue pkt now; schedules its arrival unless it is dropped."""
        if pkt.size > self.mtu:
            raise ValueError(f"packet of {pkt.size} B exceeds MTU {self.mtu}")
        t = self.engine.now()
        idx = self._sent_count
        self._sent_count = idx + 1
        ends = self._service_ends
        while ends and ends[0] <= t:
            ends.popleft()
        if len(ends) >= self._capacity:
            self.dropped_queue += 1
            return False
        if (self._drops is not None and idx in self._drops) or (
            self._loss > 0.0 and self.rng.random() < self._loss
        ):
            self.dropped_loss += 1
            return False
        pkt.enqueue_time = t
        start = t if t > self.busy_until else self.busy_until
        bits = pkt.size * 8
        if self._trace is not None:
            end = self._trace.finish(start, bits)
        else:
            rate = self._rate
            end = start + (bits * NS_PER_SEC + rate - 1) // rate
        self.busy_until = end
        ends.append(end)
        self.engine.schedule(end + self._prop, self._arrive, pkt)
        return True

    def _arrive(self, pkt):
        self.delivered += 1
        self.deliver(pkt)


SERVER = "server"


def ue(user_id):
    return ("ue", user_id)


class Network:
    """Wires the server, the IAB relay, and N UEs over a shared backhaul.

    The backhaul pair is shared by every user; each UE gets its own access
    pair. Endpoints are registered with `attach` and receive packets via
    their `fn(pkt)` inbox at arrival time.
    """

    def __init__(self, engine, path_config, run_seed, n_users):
        self.engine = engine
        self.mtu = path_config.mtu
        self._inboxes = {}

        def rng(label):
            from .engine import make_rng

            return make_rng(run_seed, "link", label)

        self.backhaul_down = Link(
            engine, path_config.backhaul_down, rng("bh_down"),
            self._relay_down, self.mtu, "backhaul_down",
        )
        self.backhaul_up = Link(
            engine, path_config.backhaul_up, rng("bh_up"),
            self._to_endpoint, self.mtu, "backhaul_up",
        )
        self.access_down = {}
        self.access_up = {}
        for i in range(n_users):
            self.access_down[i] = Link(
                engine, path_config.access_down, rng(("acc_down", i)),
                self._to_endpoint, self.mtu, f"access_down_{i}",
            )
            self.access_up[i] = Link(
                engine, path_config.access_up, rng(("acc_up", i)),
                self._relay_up, self.mtu, f"access_up_{i}",
            )

    def attach(self, node_id, inbox):
        self._inboxes[node_id] = inbox

    def send(self, pkt):
        """Inject a packet at its source edge."""
        if pkt.src == SERVER:
            return self.backhaul_down.transmit(pkt)
        return self.access_up[pkt.src[1]].transmit(pkt)

    # IAB node: gateway between the satellite backhaul and the access links.
    def _relay_down(self, pkt):
        self.access_down[pkt.dst[1]].transmit(pkt)

    def _relay_up(self, pkt):
        self.backhaul_up.transmit(pkt)

    def _to_endpoint(self, pkt):
        self._inboxes[pkt.dst](pkt)

    def links(self):
        yield self.backhaul_down
        yield self.backhaul_up
        yield from self.access_down.values()
        yield from self.access_up.values()
