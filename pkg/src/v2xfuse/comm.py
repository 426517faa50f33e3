"""Inter-agent message serialization, byte-exact bandwidth accounting,
and budget-constrained channel simulation.

Wire format, little-endian throughout:

    u32  magic 0x56325846 ("V2XF")
    u16  version (1)
    u32  sender id
    u64  timestamp in milliseconds
    u8   payload kind (0 track, 1 map, 2 occ, 3 motion)

then for query kinds (track, map, motion):

    u32 count, u32 dim,
    count*dim f32 queries, count*2 f32 reference points, count f32 scores

and for the occupancy kind:

    u32 H, u32 W, f32 cell_size, f32 origin_x, f32 origin_y, H*W f32 probs

Compute stays in f64; quantization to f32 happens at encode only.
Bandwidth (bytes per second) counts transmitted feature payload and
reference points times the channel frequency; headers, scores, and
grid geometry (calibration-like) are excluded.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .occupancy import OccupancyGrid

MAGIC = 0x56325846
VERSION = 1
KINDS = ("track", "map", "occ", "motion")
QUERY_KINDS = ("track", "map", "motion")

_HEADER = struct.Struct("<IHIQB")
_QUERY_SHAPE = struct.Struct("<II")
_GRID_SHAPE = struct.Struct("<IIfff")


class V2XMessage:
    """One transmitted payload: a query set or an occupancy grid."""

    def __init__(self, kind, sender, timestamp_ms, queries=None, refs=None,
                 scores=None, grid=None):
        if kind not in KINDS:
            raise ValueError(f"unknown message kind {kind!r}")
        if not (0 <= int(sender) < 2 ** 32):
            raise ValueError("sender id out of u32 range")
        if not (0 <= int(timestamp_ms) < 2 ** 64):
            raise ValueError("timestamp out of u64 range")
        self.kind = kind
        self.sender = int(sender)
        self.timestamp_ms = int(timestamp_ms)

        if kind == "occ":
            if grid is None or queries is not None or refs is not None \
                    or scores is not None:
                raise ValueError("occ messages carry exactly one grid")
            if not isinstance(grid, OccupancyGrid):
                raise ValueError("grid must be an OccupancyGrid")
            self.grid = grid
            self.queries = None
            self.refs = None
            self.scores = None
            return

        if grid is not None:
            raise ValueError("only occ messages carry grids")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        r = np.ascontiguousarray(refs, dtype=np.float64)
        s = np.ascontiguousarray(scores, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] < 1:
            raise ValueError("queries must be (count, dim) with dim >= 1")
        n = q.shape[0]
        if r.shape != (n, 2):
            raise ValueError("refs must be (count, 2)")
        if s.shape != (n,):
            raise ValueError("scores must be (count,)")
        if n and (not np.all(np.isfinite(s)) or s.min() < 0.0
                  or s.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
            raise ValueError("payload values must be finite")
        self.grid = None
        self.queries = q
        self.refs = r
        self.scores = s

    @property
    def count(self):
        return self.grid.probs.size if self.kind == "occ" \
            else self.queries.shape[0]

    def payload_bytes(self):
        """Bytes that count toward bandwidth (features + refs only)."""
        if self.kind == "occ":
            return 4 * self.grid.probs.size
        n, d = self.queries.shape
        return 4 * n * d + 4 * n * 2


def _f32(a):
    return np.asarray(a, dtype="<f4").tobytes()


def encode(msg):
    """Serialize to the wire layout; f64 payloads quantize to f32."""
    kind_code = KINDS.index(msg.kind)
    head = _HEADER.pack(MAGIC, VERSION, msg.sender, msg.timestamp_ms,
                        kind_code)
    if msg.kind == "occ":
        g = msg.grid
        h, w = g.probs.shape
        shape = _GRID_SHAPE.pack(h, w, g.cell_size, g.origin[0], g.origin[1])
        return head + shape + _f32(g.probs)
    n, d = msg.queries.shape
    shape = _QUERY_SHAPE.pack(n, d)
    return head + shape + _f32(msg.queries) + _f32(msg.refs) \
        + _f32(msg.scores)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes, what):
        if self.pos + nbytes > len(self.buf):
            raise ValueError(f"truncated message while reading {what}")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def floats(self, n, what):
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def decode(buf):
    """Parse one message. Raises ValueError on any malformed input."""
    r = _Reader(bytes(buf))
    magic, version, sender, ts, kind_code = _HEADER.unpack(
        r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise ValueError("bad magic; not a V2X message")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    if kind_code >= len(KINDS):
        raise ValueError(f"unknown kind code {kind_code}")
    kind = KINDS[kind_code]

    if kind == "occ":
        h, w, cell, ox, oy = _GRID_SHAPE.unpack(
            r.take(_GRID_SHAPE.size, "grid shape"))
        probs = r.floats(h * w, "grid probabilities")
        if r.pos != len(r.buf):
            raise ValueError("trailing bytes after payload")
        grid = OccupancyGrid(probs.reshape(h, w), float(cell),
                             np.array([ox, oy], dtype=np.float64))
        return V2XMessage("occ", sender, ts, grid=grid)

    n, d = _QUERY_SHAPE.unpack(r.take(_QUERY_SHAPE.size, "query shape"))
    if d < 1:
        raise ValueError("query dim must be >= 1")
    queries = r.floats(n * d, "queries").reshape(n, d)
    refs = r.floats(n * 2, "refs").reshape(n, 2)
    scores = r.floats(n, "scores")
    if r.pos != len(r.buf):
        raise ValueError("trailing bytes after payload")
    return V2XMessage(kind, sender, ts, queries=queries, refs=refs,
                      scores=scores)


@dataclass
class ChannelBudget:
    """Channel cap in bytes per second at a given message frequency."""

    cap: float
    freq: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.freq) or self.freq <= 0.0:
            raise ValueError("frequency must be positive")
        if np.isnan(self.cap) or self.cap < 0.0:
            raise ValueError("cap must be nonnegative")


def bps(messages, freq=2.0):
    """Bytes per second: payload bytes (headers excluded) times freq."""
    if freq <= 0.0:
        raise ValueError("frequency must be positive")
    total = 0
    for m in messages:
        total += m.payload_bytes()
    return float(total) * float(freq)


def constrain(messages, budget):
    """Trim messages so the realized rate fits the budget.

    Query sets keep their highest-score queries (ties to the lower
    index), re-emitted in original index order; occupancy grids are
    atomic and considered after all query messages. Messages trimmed to
    zero queries are dropped. Surviving messages keep the input order.
    """
    if not isinstance(budget, ChannelBudget):
        raise ValueError("budget must be a ChannelBudget")
    freq = budget.freq
    cap = budget.cap
    used = 0  # payload bytes accepted so far

    def fits(extra):
        return float(used + extra) * freq <= cap

    kept = {}
    # Pass 1: query messages in list order, score-greedy within each.
    for i, m in enumerate(messages):
        if m.kind == "occ":
            continue
        n, d = m.queries.shape
        per_query = 4 * d + 8
        order = sorted(range(n), key=lambda j: (-m.scores[j], j))
        take = []
        for j in order:
            if fits(per_query):
                take.append(j)
                used += per_query
        if take:
            take.sort()
            kept[i] = V2XMessage(m.kind, m.sender, m.timestamp_ms,
                                 queries=m.queries[take],
                                 refs=m.refs[take],
                                 scores=m.scores[take])
    # Pass 2: grids, whole or dropped.
    for i, m in enumerate(messages):
        if m.kind != "occ":
            continue
        size = m.payload_bytes()
        if fits(size):
            kept[i] = m
            used += size
    return [kept[i] for i in range(len(messages)) if i in kept]
