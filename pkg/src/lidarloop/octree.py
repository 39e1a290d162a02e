"""Pointer octree over 3D points supporting axis-aligned box queries.

Items are identified by their insertion order.  Nodes cover half-open cubes
``[center - half, center + half)``; leaves split once they hold more than
``leaf_capacity`` items, except at ``max_depth`` where they grow unbounded.
The root doubles toward any point that falls outside it.
"""

from __future__ import annotations

import numpy as np


class _Node:
    __slots__ = ("center", "half", "lo", "hi", "children", "items")

    def __init__(self, center: tuple[float, float, float], half: float):
        self.center = center
        self.half = half
        c = np.array(center)
        self.lo = c - half
        self.hi = c + half
        self.children: list[_Node | None] | None = None
        self.items: list[int] | None = []

    def octant(self, p) -> int:
        c = self.center
        return (p[0] >= c[0]) | ((p[1] >= c[1]) << 1) | ((p[2] >= c[2]) << 2)

    def contains(self, p) -> bool:
        c, h = self.center, self.half
        return all(c[k] - h <= p[k] < c[k] + h for k in range(3))

    def child_center(self, k: int) -> tuple[float, float, float]:
        q = 0.5 * self.half
        c = self.center
        return (
            c[0] + (q if k & 1 else -q),
            c[1] + (q if k & 2 else -q),
            c[2] + (q if k & 4 else -q),
        )


class Octree:
    def __init__(self, leaf_capacity: int = 8, max_depth: int = 21, initial_half: float = 16.0):
        self.leaf_capacity = leaf_capacity
        self.max_depth = max_depth
        self._initial_half = float(initial_half)
        self._root: _Node | None = None
        self._pts = np.empty((64, 3))
        self._tuples: list[tuple[float, float, float]] = []
        self._n = 0

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._pts[: self._n]

    def insert(self, point) -> int:
        p = np.asarray(point, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("octree points must be finite")
        if self._n == len(self._pts):
            grown = np.empty((2 * len(self._pts), 3))
            grown[: self._n] = self._pts[: self._n]
            self._pts = grown
        item = self._n
        self._pts[item] = p
        pt = (float(p[0]), float(p[1]), float(p[2]))
        self._tuples.append(pt)
        self._n += 1

        if self._root is None:
            h = self._initial_half
            self._root = _Node(tuple(float(np.floor(v / h) * h) for v in pt), h)
        while not self._root.contains(pt):
            self._grow_toward(pt)
        self._insert(self._root, item, 0)
        return item

    def _grow_toward(self, p: np.ndarray) -> None:
        old = self._root
        h = old.half
        root = _Node(tuple(c + (h if v >= c else -h) for v, c in zip(p, old.center)), 2.0 * h)
        root.items = None
        root.children = [None] * 8
        if old.children is not None or old.items:
            root.children[root.octant(old.center)] = old
        self._root = root

    def _insert(self, node: _Node, item: int, depth: int) -> None:
        p = self._tuples[item]
        while node.children is not None:
            k = node.octant(p)
            child = node.children[k]
            if child is None:
                child = _Node(node.child_center(k), 0.5 * node.half)
                node.children[k] = child
            node = child
            depth += 1
        node.items.append(item)
        if len(node.items) > self.leaf_capacity and depth < self.max_depth:
            items = node.items
            node.items = None
            node.children = [None] * 8
            for it in items:
                self._insert(node, it, depth)

    def query_box(self, lo, hi) -> np.ndarray:
        """Ids of points inside the closed box ``[lo, hi]``, ascending."""
        return self.query_boxes(np.asarray(lo, float)[None], np.asarray(hi, float)[None])[0]

    def query_boxes(self, los: np.ndarray, his: np.ndarray) -> list[np.ndarray]:
        """Batched :meth:`query_box`; one ascending id array per box."""
        los = np.asarray(los, dtype=float).reshape(-1, 3)
        nbox = len(los)
        hb, hi_ = self.query_boxes_flat(los, his)
        bounds = np.searchsorted(hb, np.arange(nbox + 1))
        return [hi_[bounds[k] : bounds[k + 1]] for k in range(nbox)]

    def query_boxes_flat(self, los: np.ndarray, his: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All ``(box, id)`` hits of a batch of closed boxes, sorted by box then id."""
        los = np.asarray(los, dtype=float).reshape(-1, 3)
        his = np.asarray(his, dtype=float).reshape(-1, 3)
        nbox = len(los)
        hits_box: list[np.ndarray] = []
        hits_item: list[np.ndarray] = []
        if self._root is not None and nbox:
            stack = [(self._root, np.arange(nbox))]
            pts = self._pts
            while stack:
                node, ids = stack.pop()
                keep = np.all(los[ids] < node.hi, axis=1) & np.all(his[ids] >= node.lo, axis=1)
                ids = ids[keep]
                if ids.size == 0:
                    continue
                if node.children is None:
                    if not node.items:
                        continue
                    items = np.asarray(node.items)
                    p = pts[items]
                    inside = np.all(
                        (p[None, :, :] >= los[ids, None, :]) & (p[None, :, :] <= his[ids, None, :]),
                        axis=2,
                    )
                    b, i = np.nonzero(inside)
                    if b.size:
                        hits_box.append(ids[b])
                        hits_item.append(items[i])
                    continue
                for child in node.children:
                    if child is not None:
                        stack.append((child, ids))
        if not hits_box:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        hb = np.concatenate(hits_box).astype(np.int64)
        hi_ = np.concatenate(hits_item).astype(np.int64)
        order = np.lexsort((hi_, hb))
        return hb[order], hi_[order]

    def depth(self) -> int:
        """Depth of the deepest leaf (root = 0)."""
        best = 0
        stack = [(self._root, 0)] if self._root is not None else []
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if node.children is not None:
                stack.extend((c, d + 1) for c in node.children if c is not None)
        return best
