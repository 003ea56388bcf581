"""Deterministic virtual-time discrete-event core.

The clock is an integer count of nanoseconds since simulation start, which
keeps runs bit-identical across platforms. Events scheduled for the same
instant fire in insertion order; cancellation is lazy (the heap entry is
voided, not removed).
"""

import hashlib
import heapq
import random

NS_PER_SEC = 1_000_000_000
NS_PER_MS = 1_000_000


def seconds(x):
    """Convert seconds (int or float) to integer nanoseconds."""
    return round(x * NS_PER_SEC)


def millis(x):
    return round(x * NS_PER_MS)


def to_seconds(t_ns):
    return t_ns / NS_PER_SEC


class SchedulingError(Exception):
    """Raised when an event is scheduled in the past or the engine is misused."""


class EventHandle:
    """Cancellation token for a scheduled event."""

    __slots__ = ("entry",)

    def __init__(self, entry):
        self.entry = entry

    def cancel(self):
        self.entry[2] = None

    @property
    def cancelled(self):
        return self.entry[2] is None


class Engine:
    """Single-threaded event loop over an integer-nanosecond virtual clock."""

    def __init__(self):
        self._now = 0
        self._queue = []
        self._seq = 0
        self._running = False

    def now(self):
        return self._now

    def schedule(self, fire_at, action, *args):
        """Queue `action(*args)` to run at `fire_at` ns.

        Scheduling in the past is a programming error and raises.
        Returns an EventHandle for cancellation.
        """
        if fire_at < self._now:
            raise SchedulingError(
                f"event scheduled at {fire_at} ns, before now={self._now} ns"
            )
        entry = [fire_at, self._seq, action, args]
        self._seq += 1
        heapq.heappush(self._queue, entry)
        return EventHandle(entry)

    def schedule_after(self, delay, action, *args):
        return self.schedule(self._now + delay, action, *args)

    def run_until(self, t_end):
        """Execute every event with fire_at <= t_end in (time, insertion) order.

        The loop terminates as soon as the queue is drained; the clock then
        advances to t_end, which is returned.
        """
        if self._running:
            raise SchedulingError("engine is already running")
        if t_end < self._now:
            raise SchedulingError(f"t_end={t_end} is before now={self._now}")
        self._running = True
        queue = self._queue
        pop = heapq.heappop
        try:
            while queue and queue[0][0] <= t_end:
                fire_at, _, action, args = pop(queue)
                if action is None:
                    continue
                self._now = fire_at
                action(*args)
            self._now = t_end
        finally:
            self._running = False
        return self._now


def substream_seed(base_seed, *labels):
    """Derive a 64-bit seed for an entity substream from (base_seed, labels).

    SHA-256 based so the mapping is stable across platforms and Python
    builds (unlike hash()). Adding an entity never perturbs the streams of
    the others.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big")


def make_rng(base_seed, *labels):
    """Mersenne Twister stream seeded from the entity substream derivation."""
    return random.Random(substream_seed(base_seed, *labels))
