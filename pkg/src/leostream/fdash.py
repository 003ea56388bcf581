"""Fuzzy-logic bitrate controller for the DASH client.

Inputs are the buffered playback seconds and their rate of change; each is
mapped onto three linguistic terms (short/close/long anchored at the target
buffer level, falling/steady/rising anchored at +-delta_scale). The 3x3 rule
table picks one of five output factors, and the weighted average over the
output singletons yields a scaling factor applied to the throughput
estimate.

Both term families form a partition of unity and rule activations use the
product norm, so the defuzzified factor is exactly the bilinear
interpolation of the rule table: continuous everywhere, equal to 1.0 at
(target, 0), and monotone non-decreasing in both inputs because the table
rows and columns are.
"""

from dataclasses import dataclass, field

FACTOR_DECREASE = 0.5
FACTOR_SMALL_DECREASE = 0.75
FACTOR_HOLD = 1.0
FACTOR_SMALL_INCREASE = 1.25
FACTOR_INCREASE = 1.5

# rows: buffer (short, close, long); cols: delta (falling, steady, rising)
RULE_TABLE = (
    (FACTOR_DECREASE, FACTOR_SMALL_DECREASE, FACTOR_HOLD),
    (FACTOR_SMALL_DECREASE, FACTOR_HOLD, FACTOR_SMALL_INCREASE),
    (FACTOR_HOLD, FACTOR_SMALL_INCREASE, FACTOR_INCREASE),
)


@dataclass
class FdashController:
    target_buffer_s: float = 30.0
    delta_scale: float = 0.5  # s of buffer per s of wall time
    low_anchor: float = field(init=False)
    high_anchor: float = field(init=False)

    def __post_init__(self):
        if self.target_buffer_s <= 0 or self.delta_scale <= 0:
            raise ValueError("target buffer and delta scale must be positive")
        self.low_anchor = self.target_buffer_s * 2.0 / 3.0
        self.high_anchor = self.target_buffer_s * 4.0 / 3.0

    def buffer_memberships(self, buffer_s):
        lo, mid, hi = self.low_anchor, self.target_buffer_s, self.high_anchor
        if buffer_s <= lo:
            return 1.0, 0.0, 0.0
        if buffer_s < mid:
            close = (buffer_s - lo) / (mid - lo)
            return 1.0 - close, close, 0.0
        if buffer_s < hi:
            long_ = (buffer_s - mid) / (hi - mid)
            return 0.0, 1.0 - long_, long_
        return 0.0, 0.0, 1.0

    def delta_memberships(self, delta):
        s = self.delta_scale
        if delta <= -s:
            return 1.0, 0.0, 0.0
        if delta < 0.0:
            steady = (delta + s) / s
            return 1.0 - steady, steady, 0.0
        if delta < s:
            rising = delta / s
            return 0.0, 1.0 - rising, rising
        return 0.0, 0.0, 1.0

    def decide(self, buffer_s, delta):
        """Scaling factor for the throughput-based bitrate estimate."""
        if buffer_s < 0:
            raise ValueError("buffer level cannot be negative")
        mu_b = self.buffer_memberships(buffer_s)
        mu_d = self.delta_memberships(delta)
        f = 0.0
        for i in range(3):
            if mu_b[i] == 0.0:
                continue
            row = RULE_TABLE[i]
            f += mu_b[i] * (
                mu_d[0] * row[0] + mu_d[1] * row[1] + mu_d[2] * row[2]
            )
        return f


def select_representation(ladder, factor, estimated_rate_bps):
    """Highest representation with bitrate <= factor * estimate, clamped to
    the ladder ends. `ladder` is a strictly increasing list of bitrates."""
    budget = factor * estimated_rate_bps
    chosen = 0
    for i, bitrate in enumerate(ladder):
        if bitrate <= budget:
            chosen = i
        else:
            break
    return chosen
