"""Tree-traversal optimized virtual memory addressing (bump-offset arena).

A depth-first walk over a data dependency tree drives a single bump cursor:
entering a node copies its payload to the current offset, leaving retracts the
offset without erasing anything, so sibling subtrees overwrite each other's
region while every ancestor payload stays valid at the front of the buffer.
Allocation and deallocation are pointer arithmetic; the occupied region is
always the contiguous prefix [0, offset).

One arena serves one traversal lane and its cursor is single-threaded;
independent arenas may run concurrently.
"""

from dataclasses import dataclass, field


class ArenaError(Exception):
    pass


class CapacityError(ArenaError):
    pass


class LifoError(ArenaError):
    """Unload order diverged from load order; the traversal is buggy."""


@dataclass(frozen=True)
class Payload:
    """Dataset descriptor: byte size plus a loader that fills a buffer region.

    ``loader(view, database)`` must write exactly ``size`` bytes into ``view``.
    A ``None`` loader reserves the region without copying (scratch space).
    """

    size: int
    loader: object = None

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("payload size must be non-negative")


@dataclass
class DependencyNode:
    """Node of a data dependency tree.

    ``tasks`` run after the payload is loaded and may read the arena prefix up
    to and including this node's region; children are visited in stored order.
    """

    id: object
    payload: Payload
    tasks: list = field(default_factory=list)
    children: list = field(default_factory=list)


@dataclass(frozen=True)
class Region:
    start: int
    size: int

    @property
    def end(self):
        return self.start + self.size


class Arena:
    """Caller-sized contiguous buffer with a single bump cursor."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.buffer = bytearray(capacity)
        self.offset = 0
        self._lifo = []

    def load(self, payload, database=None):
        """Copy a payload to the cursor and advance it; returns the region."""
        if self.offset + payload.size > self.capacity:
            raise CapacityError(
                f"load of {payload.size} bytes at offset {self.offset} "
                f"exceeds capacity {self.capacity}")
        region = Region(self.offset, payload.size)
        if payload.loader is not None and payload.size:
            view = memoryview(self.buffer)[region.start:region.end]
            payload.loader(view, database)
        self.offset += payload.size
        self._lifo.append(payload)
        return region

    def unload(self, payload):
        """Retract the cursor past the most recent load; data is not erased."""
        if not self._lifo or self._lifo[-1] is not payload:
            raise LifoError("unload does not match the most recent load")
        self._lifo.pop()
        self.offset -= payload.size

    def view(self, region):
        return memoryview(self.buffer)[region.start:region.end]

    def prefix(self):
        """The occupied region: always exactly [0, offset)."""
        return memoryview(self.buffer)[:self.offset]


@dataclass
class TraversalStats:
    loads: int = 0
    bytes_copied: int = 0
    peak_offset: int = 0


def visit(node, database, arena, stats=None, _regions=None):
    """Depth-first visit: load payload, run tasks, recurse, unload.

    Tasks are called as ``task(arena, regions)`` where ``regions`` maps the
    ids on the root-to-node path to their arena regions.  A failing task or
    load unwinds the offset for the whole subtree before propagating.
    """
    stats = stats if stats is not None else TraversalStats()
    regions = _regions if _regions is not None else {}
    region = arena.load(node.payload, database)
    regions[node.id] = region
    stats.loads += 1
    stats.bytes_copied += node.payload.size
    stats.peak_offset = max(stats.peak_offset, arena.offset)
    try:
        for task in node.tasks:
            task(arena, regions)
        for child in node.children:
            visit(child, database, arena, stats, regions)
    finally:
        del regions[node.id]
        arena.unload(node.payload)
    return stats


def ttcache_run(database, root, capacity):
    """Allocate an arena of ``capacity`` bytes and traverse the whole tree."""
    arena = Arena(capacity)
    stats = visit(root, database, arena)
    assert arena.offset == 0
    return stats


def plan_check(root):
    """Bytes required by a traversal: the maximum root-to-leaf path sum.

    ``ttcache_run`` with at least this capacity cannot raise CapacityError.
    """
    best = 0
    stack = [(root, 0)]
    while stack:
        node, base = stack.pop()
        top = base + node.payload.size
        best = max(best, top)
        for child in node.children:
            stack.append((child, top))
    return best


def bytes_payload(data):
    """Payload that copies a bytes-like object verbatim."""
    raw = bytes(data)

    def loader(view, _database):
        view[:] = raw

    return Payload(len(raw), loader)
