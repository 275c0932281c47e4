"""Dated genealogies and the event timelines derived from them.

A genealogy enters the model only through the times and types of its events:
sampling times (tips), coalescence times (internal nodes) and, after
:func:`insert_grid`, the changepoints of the reproduction number.  All times
are in days, measured backwards from the most recent tip.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SAMPLING = 0
COALESCENT = 1
GRID = 2

EVENT_NAMES = {SAMPLING: "sampling", COALESCENT: "coalescent", GRID: "grid"}
_EVENT_CODES = {v: k for k, v in EVENT_NAMES.items()}

TIME_TOL = 1e-9


class NewickError(ValueError):
    """Malformed Newick text; ``position`` is the 0-based character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at character {position})")
        self.position = position


class TreeValidationError(ValueError):
    pass


class TimelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampledTree:
    """A rooted binary tree with branch lengths in days.

    Nodes are indexed ``0..n-1``; ``parent[root] == -1``.  Tip sampling dates
    are implied by root-to-tip path lengths.
    """

    parent: np.ndarray
    branch_length: np.ndarray
    labels: tuple
    root: int
    children: tuple = field(repr=False, compare=False, default=())

    def __post_init__(self):
        if not self.children:
            kids = [[] for _ in range(len(self.parent))]
            for node, par in enumerate(self.parent):
                if par >= 0:
                    kids[par].append(node)
            object.__setattr__(self, "children", tuple(tuple(c) for c in kids))
        self._validate()

    def _validate(self):
        n = len(self.parent)
        roots = [i for i in range(n) if self.parent[i] < 0]
        if roots != [self.root]:
            raise TreeValidationError(f"expected exactly one root, found {len(roots)}")
        bl = np.asarray(self.branch_length, dtype=float)
        if not np.all(np.isfinite(bl)):
            raise TreeValidationError("branch lengths must be finite")
        if np.any(bl < 0):
            bad = int(np.flatnonzero(bl < 0)[0])
            raise TreeValidationError(
                f"negative branch length {bl[bad]} on node {self.labels[bad] or bad}"
            )
        for node, kids in enumerate(self.children):
            if kids and len(kids) != 2:
                raise TreeValidationError(
                    f"internal node {node} has {len(kids)} children; only binary trees are supported"
                )
        if len(self.tips) < 2:
            raise TreeValidationError("a genealogy needs at least two tips")

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def tips(self) -> list[int]:
        return [i for i, c in enumerate(self.children) if not c]

    @property
    def internal_nodes(self) -> list[int]:
        return [i for i, c in enumerate(self.children) if c]

    def depths(self) -> np.ndarray:
        """Root-to-node path lengths."""
        depth = np.zeros(self.n_nodes)
        stack = [self.root]
        while stack:
            node = stack.pop()
            for child in self.children[node]:
                depth[child] = depth[node] + self.branch_length[child]
                stack.append(child)
        return depth

    def node_times(self) -> np.ndarray:
        """Backwards time of every node (0 at the most recent tip)."""
        depth = self.depths()
        return depth[self.tips].max() - depth

    def tip_offsets(self) -> dict:
        """Map tip label (or index when unlabeled) to its sampling offset."""
        times = self.node_times()
        return {(self.labels[t] or t): float(times[t]) for t in self.tips}

    @property
    def root_depth(self) -> float:
        return float(self.depths()[self.tips].max())

    def to_newick(self) -> str:
        def fmt(node):
            kids = self.children[node]
            label = self.labels[node] or ""
            if kids:
                inner = ",".join(fmt(c) for c in kids)
                text = f"({inner}){label}"
            else:
                text = label
            if node != self.root:
                text += f":{float(self.branch_length[node])!r}"
            return text

        return fmt(self.root) + ";"


def tree_from_times(parent: Sequence[int], times: Sequence[float], labels: Sequence) -> SampledTree:
    """Build a tree from parent pointers and backwards node times."""
    parent = np.asarray(parent, dtype=int)
    times = np.asarray(times, dtype=float)
    root = int(np.flatnonzero(parent < 0)[0])
    bl = np.zeros(len(parent))
    has_parent = parent >= 0
    bl[has_parent] = times[parent[has_parent]] - times[has_parent]
    return SampledTree(parent=parent, branch_length=bl, labels=tuple(labels), root=root)


class _NewickParser:
    _SPECIAL = set("(),:;[")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.parent: list[int] = []
        self.length: list[float | None] = []
        self.labels: list[str | None] = []

    def error(self, message):
        raise NewickError(message, self.pos)

    def skip(self):
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch.isspace():
                self.pos += 1
            elif ch == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    self.error("unterminated comment")
                self.pos = end + 1
            else:
                break

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def new_node(self, par):
        self.parent.append(par)
        self.length.append(None)
        self.labels.append(None)
        return len(self.parent) - 1

    def read_label(self):
        self.skip()
        text = self.text
        if self.pos < len(text) and text[self.pos] == "'":
            end = self.pos + 1
            chunks = []
            while True:
                nxt = text.find("'", end)
                if nxt < 0:
                    self.error("unterminated quoted label")
                chunks.append(text[end:nxt])
                if nxt + 1 < len(text) and text[nxt + 1] == "'":
                    chunks.append("'")
                    end = nxt + 2
                    continue
                self.pos = nxt + 1
                return "".join(chunks)
        start = self.pos
        while self.pos < len(text) and text[self.pos] not in self._SPECIAL and not text[self.pos].isspace():
            self.pos += 1
        return text[start:self.pos] or None

    def read_length(self, node):
        if self.peek() != ":":
            return
        self.pos += 1
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in self._SPECIAL and not self.text[self.pos].isspace():
            self.pos += 1
        token = self.text[start:self.pos]
        try:
            value = float(token)
        except ValueError:
            self.pos = start
            self.error(f"invalid branch length {token!r}")
        self.length[node] = value

    def parse(self) -> int:
        self.skip()
        if self.peek() != "(":
            self.error("expected '('")
        self.pos += 1
        root = self.new_node(-1)
        stack = [root]
        expect_child = True
        while stack:
            ch = self.peek()
            if ch == "":
                self.error("unexpected end of input")
            if expect_child:
                child = self.new_node(stack[-1])
                if ch == "(":
                    self.pos += 1
                    stack.append(child)
                    continue
                if ch in ",);":
                    self.error("empty node")
                self.labels[child] = self.read_label()
                self.read_length(child)
                expect_child = False
            elif ch == ",":
                self.pos += 1
                expect_child = True
            elif ch == ")":
                self.pos += 1
                closed = stack.pop()
                self.labels[closed] = self.read_label()
                self.read_length(closed)
            else:
                self.error(f"unexpected character {ch!r}")
        ch = self.peek()
        if ch != ";":
            if ch == "":
                self.error("unexpected end of input, missing ';'")
            self.error("expected ';'")
        self.pos += 1
        if self.peek() != "":
            self.error("trailing characters after ';'")
        return root


def parse_newick(text: str) -> SampledTree:
    """Parse a single Newick tree whose branch lengths are in days.

    >>> tree = parse_newick("((A:1,B:1):1,C:1.5);")
    >>> tree.tip_offsets()["C"]
    0.5
    """
    parser = _NewickParser(text)
    root = parser.parse()
    lengths = parser.length
    for node, value in enumerate(lengths):
        if node != root and value is None:
            raise TreeValidationError(
                f"node {parser.labels[node] or node} has no branch length; tip dates need path lengths"
            )
    bl = np.array([0.0 if (v is None or i == root) else v for i, v in enumerate(lengths)])
    return SampledTree(
        parent=np.array(parser.parent, dtype=int),
        branch_length=bl,
        labels=tuple(parser.labels),
        root=root,
    )


def read_newick(path) -> SampledTree:
    with open(path) as fh:
        return parse_newick(fh.read().strip())


@dataclass(frozen=True)
class EventTimeline:
    """Backwards-time events of a genealogy.

    ``k[i]`` is the number of lineages present just after event ``i``
    (i.e. over the interval ``(times[i], times[i+1]]``).
    """

    times: np.ndarray
    types: np.ndarray
    samples_added: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        for name in ("times", "types", "samples_added", "k"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.times)
        if not (len(self.types) == len(self.samples_added) == len(self.k) == n):
            raise TimelineError("timeline arrays have mismatched lengths")
        if n and np.any(np.diff(self.times) <= 0):
            raise TimelineError("event times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_events(cls, times, types, samples_added) -> "EventTimeline":
        types = np.asarray(types, dtype=int)
        added = np.asarray(samples_added, dtype=int)
        delta = np.where(types == COALESCENT, -1, added)
        k = np.cumsum(delta)
        if np.any(k[types == COALESCENT] + 1 < 2):
            raise TimelineError("coalescent event with fewer than two lineages")
        if len(k) and np.any(k < 1):
            raise TimelineError("lineage count dropped below one")
        return cls(np.asarray(times, dtype=float), types, added, k.astype(int))

    @property
    def n_coalescent(self) -> int:
        return int(np.sum(self.types == COALESCENT))

    @property
    def n_tips(self) -> int:
        return int(self.samples_added.sum())

    @property
    def tmrca(self) -> float:
        return float(self.times[-1])

    def coalescent_times(self) -> np.ndarray:
        return self.times[self.types == COALESCENT]

    def without_grid(self) -> "EventTimeline":
        keep = self.types != GRID
        return EventTimeline(self.times[keep], self.types[keep], self.samples_added[keep], self.k[keep])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "type", "samples_added", "k"])
        for t, x, a, k in zip(self.times, self.types, self.samples_added, self.k):
            writer.writerow([repr(float(t)), EVENT_NAMES[int(x)], int(a), int(k)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EventTimeline":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            np.array([float(r["time"]) for r in rows]),
            np.array([_EVENT_CODES[r["type"]] for r in rows], dtype=int),
            np.array([int(r["samples_added"]) for r in rows], dtype=int),
            np.array([int(r["k"]) for r in rows], dtype=int),
        )


def extract_events(tree: SampledTree, tol: float = TIME_TOL) -> EventTimeline:
    """Reduce a dated tree to its ordered sampling and coalescent events.

    Co-dated tips (within ``tol`` days) become a single sampling event.
    Coalescences sharing a time with another event are rejected.
    """
    times = tree.node_times()
    tip_times = np.sort(times[tree.tips])
    # cluster tips on a time lattice anchored at the first tip of each group
    sample_t, sample_n = [], []
    for t in tip_times:
        if sample_t and t - sample_t[-1] <= tol:
            sample_n[-1] += 1
        else:
            sample_t.append(float(t) if sample_t else 0.0)
            sample_n.append(1)
    coal_t = np.sort(times[tree.internal_nodes])
    if len(coal_t) > 1:
        gaps = np.diff(coal_t)
        if np.any(gaps <= tol):
            at = float(coal_t[1:][gaps <= tol][0])
            raise TreeValidationError(
                f"simultaneous coalescent events at t={at}; polytomies are not supported"
            )
    events = [(t, SAMPLING, n) for t, n in zip(sample_t, sample_n)]
    events += [(float(t), COALESCENT, 0) for t in coal_t]
    events.sort(key=lambda e: (e[0], e[1]))
    for (t0, x0, _), (t1, x1, _) in zip(events, events[1:]):
        if t1 - t0 <= tol:
            raise TreeValidationError(
                f"coalescent event coincides with a sampling event at t={t1}"
            )
    timeline = EventTimeline.from_events(*zip(*events))
    if timeline.k[-1] != 1:
        raise TimelineError(f"tree does not end with a single lineage (k={timeline.k[-1]})")
    return timeline


def insert_grid(timeline: EventTimeline, changepoint_interval: float, tol: float = TIME_TOL) -> EventTimeline:
    """Add zero-sample grid events at multiples of ``changepoint_interval``.

    Grid points at or beyond the last event, or within ``tol`` of an existing
    event, are dropped, so the operation is idempotent.
    """
    if not changepoint_interval > 0:
        raise ValueError("changepoint_interval must be positive")
    times = np.asarray(timeline.times)
    t_end = times[-1]
    n_grid = int(math.floor(t_end / changepoint_interval))
    grid = changepoint_interval * np.arange(1, n_grid + 1)
    grid = grid[grid < t_end - tol]
    if len(grid):
        nearest = np.min(np.abs(grid[:, None] - times[None, :]), axis=1)
        grid = grid[nearest > tol]
    if not len(grid):
        return timeline
    all_t = np.concatenate([times, grid])
    all_x = np.concatenate([timeline.types, np.full(len(grid), GRID)])
    all_a = np.concatenate([timeline.samples_added, np.zeros(len(grid), dtype=int)])
    order = np.argsort(all_t, kind="stable")
    return EventTimeline.from_events(all_t[order], all_x[order], all_a[order])


def interval_lengths(timeline: EventTimeline) -> np.ndarray:
    return np.diff(np.asarray(timeline.times))


def events_from_records(records: Iterable[tuple]) -> EventTimeline:
    """Build a timeline from ``(time, type_name, samples_added)`` tuples."""
    times, types, added = [], [], []
    for t, name, a in records:
        times.append(float(t))
        types.append(_EVENT_CODES[name] if isinstance(name, str) else int(name))
        added.append(int(a))
    return EventTimeline.from_events(times, types, added)
