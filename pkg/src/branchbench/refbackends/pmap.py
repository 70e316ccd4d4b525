"""Persistent B+tree maps with structural sharing over a reference-counted arena.

A node's ``rc`` counts the references to it: parent nodes plus branch
root slots. A write walks root to leaf and modifies a node in place only
when it is referenced once along an exclusively owned path; otherwise the
node is copied (path copying). When ``rc`` drops to zero the node and
every descendant that loses its last reference become garbage: no longer
live, still allocated until :meth:`Arena.gc` frees them.
"""

from __future__ import annotations

import itertools
import threading
from bisect import bisect_left, bisect_right
from typing import Any, Iterator, Sequence

from ..schema import key_bytes, row_bytes

FANOUT = 32
NODE_HEADER_BYTES = 16
POINTER_BYTES = 8


class Node:
    __slots__ = ("nid", "leaf", "keys", "vals", "rc", "nbytes")

    def __init__(self, nid: int, leaf: bool, keys: list, vals: list):
        self.nid = nid
        self.leaf = leaf
        self.keys = keys
        self.vals = vals  # rows for leaves, child nodes for internal nodes
        self.rc = 0
        self.nbytes = 0

    def __repr__(self) -> str:
        kind = "leaf" if self.leaf else "inner"
        return f"<{kind} #{self.nid} n={len(self.vals)} rc={self.rc}>"


def entry_bytes(key: tuple, row: dict) -> int:
    return key_bytes(key) + row_bytes(row)


def node_bytes(node: Node) -> int:
    if node.leaf:
        return NODE_HEADER_BYTES + sum(entry_bytes(k, v) for k, v in zip(node.keys, node.vals))
    return NODE_HEADER_BYTES + sum(key_bytes(k) for k in node.keys) + POINTER_BYTES * len(node.vals)


class Arena:
    """Owns every node; all structural changes happen under ``lock``."""

    def __init__(self, counter=None):
        self.nodes: dict[int, Node] = {}
        self.lock = threading.RLock()
        self._ids = itertools.count()
        self.counter = counter
        self.garbage: list[Node] = []
        self.garbage_bytes = 0
        self.allocations = 0

    # -- accounting ------------------------------------------------------------

    def _account(self, delta: int) -> None:
        if self.counter is not None:
            self.counter.add(delta)

    def _set_bytes(self, node: Node, nbytes: int) -> None:
        self._account(nbytes - node.nbytes)
        node.nbytes = nbytes

    def alloc(self, leaf: bool, keys: list, vals: list) -> Node:
        node = Node(next(self._ids), leaf, keys, vals)
        self.nodes[node.nid] = node
        self.allocations += 1
        if not leaf:
            for child in vals:
                child.rc += 1
        self._set_bytes(node, node_bytes(node))
        return node

    def incref(self, node: Node) -> None:
        node.rc += 1

    def decref(self, node: Node) -> None:
        stack = [node]
        while stack:
            n = stack.pop()
            n.rc -= 1
            if n.rc > 0:
                continue
            if n.rc < 0:
                raise AssertionError(f"negative refcount on {n!r}")
            self._account(-n.nbytes)
            self.garbage.append(n)
            self.garbage_bytes += n.nbytes
            if not n.leaf:
                stack.extend(n.vals)

    def gc(self) -> int:
        """Free every garbage node; returns the bytes freed."""
        with self.lock:
            freed = 0
            for n in self.garbage:
                del self.nodes[n.nid]
                freed += n.nbytes
                n.vals = []
                n.keys = []
            self.garbage = []
            self.garbage_bytes = 0
            if self.counter is not None:
                self.counter.reclaimed(freed)
            return freed

    @property
    def allocated_bytes(self) -> int:
        return sum(n.nbytes for n in self.nodes.values())

    # -- construction --------------------------------------------------------

    def empty(self) -> Node:
        return self.alloc(True, [], [])

    def bulk_load(self, items: Sequence[tuple[tuple, dict]]) -> Node:
        """Tree over ``items`` already sorted by key (rc of the result is 0)."""
        with self.lock:
            if not items:
                return self.empty()
            level = []
            for i in range(0, len(items), FANOUT):
                chunk = items[i:i + FANOUT]
                level.append(self.alloc(True, [k for k, _ in chunk], [v for _, v in chunk]))
            while len(level) > 1:
                parents = []
                for i in range(0, len(level), FANOUT):
                    kids = level[i:i + FANOUT]
                    parents.append(self.alloc(False, [_min_key(c) for c in kids[1:]], kids))
                level = parents
            return level[0]

    # -- reads (no lock: callers only read trees they keep alive) -----------

    @staticmethod
    def get(root: Node, key: tuple) -> Any:
        node = root
        while not node.leaf:
            node = node.vals[bisect_right(node.keys, key)]
        i = bisect_left(node.keys, key)
        if i < len(node.keys) and node.keys[i] == key:
            return node.vals[i]
        return None

    @staticmethod
    def items(root: Node) -> Iterator[tuple[tuple, dict]]:
        stack = [root]
        while stack:
            node = stack.pop()
            if node.leaf:
                yield from zip(node.keys, node.vals)
            else:
                stack.extend(reversed(node.vals))

    @classmethod
    def range(cls, root: Node, lo: tuple, hi: tuple) -> Iterator[tuple[tuple, dict]]:
        if root.leaf:
            i = bisect_left(root.keys, lo)
            j = bisect_right(root.keys, hi)
            yield from zip(root.keys[i:j], root.vals[i:j])
            return
        a = bisect_right(root.keys, lo)
        b = bisect_right(root.keys, hi)
        for child in root.vals[a:b + 1]:
            yield from cls.range(child, lo, hi)

    # -- writes ---------------------------------------------------------------

    def _writable(self, node: Node) -> Node:
        if node.rc == 1:
            return node
        return self.alloc(node.leaf, list(node.keys), list(node.vals))

    def _relink(self, parent: Node, i: int, old: Node, new: Node) -> None:
        parent.vals[i] = new
        new.rc += 1
        self.decref(old)

    def _put(self, node: Node, key: tuple, row: dict):
        node = self._writable(node)
        if node.leaf:
            i = bisect_left(node.keys, key)
            delta = entry_bytes(key, row)
            if i < len(node.keys) and node.keys[i] == key:
                delta -= entry_bytes(key, node.vals[i])
                node.vals[i] = row
            else:
                node.keys.insert(i, key)
                node.vals.insert(i, row)
            self._set_bytes(node, node.nbytes + delta)
        else:
            i = bisect_right(node.keys, key)
            child = node.vals[i]
            new_child, split = self._put(child, key, row)
            if new_child is not child:
                self._relink(node, i, child, new_child)
            if split is not None:
                sep, right = split
                node.keys.insert(i, sep)
                node.vals.insert(i + 1, right)
                right.rc += 1
            self._set_bytes(node, node_bytes(node))
        if len(node.vals) > FANOUT:
            return node, self._split(node)
        return node, None

    def _split(self, node: Node) -> tuple[tuple, Node]:
        mid = len(node.vals) // 2
        if node.leaf:
            right = Node(next(self._ids), True, node.keys[mid:], node.vals[mid:])
            sep = right.keys[0]
            del node.keys[mid:], node.vals[mid:]
        else:
            sep = node.keys[mid - 1]
            # Children move from node to right; their reference counts are unchanged.
            right = Node(next(self._ids), False, node.keys[mid:], node.vals[mid:])
            del node.keys[mid - 1:], node.vals[mid:]
        self.nodes[right.nid] = right
        self.allocations += 1
        self._set_bytes(right, node_bytes(right))
        self._set_bytes(node, node_bytes(node))
        return sep, right

    def _remove(self, node: Node, key: tuple) -> Node:
        node = self._writable(node)
        if node.leaf:
            i = bisect_left(node.keys, key)
            delta = entry_bytes(key, node.vals[i])
            del node.keys[i], node.vals[i]
            self._set_bytes(node, node.nbytes - delta)
            return node
        i = bisect_right(node.keys, key)
        child = node.vals[i]
        new_child = self._remove(child, key)
        if new_child is not child:
            self._relink(node, i, child, new_child)
        if not new_child.vals:
            del node.vals[i]
            if node.keys:
                del node.keys[i - 1 if i > 0 else 0]
            self.decref(new_child)
        self._set_bytes(node, node_bytes(node))
        return node

    def put(self, root: Node, key: tuple, row: dict) -> Node:
        """Insert or replace; returns the root to store in the caller's slot."""
        with self.lock:
            new_root, split = self._put(root, key, row)
            if split is not None:
                sep, right = split
                new_root = self.alloc(False, [sep], [new_root, right])
            return self._swap_root(root, new_root)

    def remove(self, root: Node, key: tuple) -> Node:
        """Delete ``key`` (which must be present); returns the new slot root."""
        with self.lock:
            new_root = self._swap_root(root, self._remove(root, key))
            if not new_root.leaf and len(new_root.vals) == 1:
                new_root = self._swap_root(new_root, new_root.vals[0])
            elif not new_root.leaf and not new_root.vals:
                new_root = self._swap_root(new_root, self.empty())
            return new_root

    def _swap_root(self, old: Node, new: Node) -> Node:
        if new is not old:
            new.rc += 1
            self.decref(old)
        return new

    # -- inspection -------------------------------------------------------------

    def reachable(self, roots: Sequence[Node]) -> set[int]:
        seen: set[int] = set()
        stack = list(roots)
        while stack:
            n = stack.pop()
            if n.nid in seen:
                continue
            seen.add(n.nid)
            if not n.leaf:
                stack.extend(n.vals)
        return seen

    @staticmethod
    def exclusive_bytes(root: Node) -> int:
        """Bytes of nodes reachable from ``root`` only through singly referenced nodes."""
        if root.rc != 1:
            return 0
        total = 0
        stack = [root]
        while stack:
            n = stack.pop()
            total += n.nbytes
            if not n.leaf:
                stack.extend(c for c in n.vals if c.rc == 1)
        return total


def _min_key(node: Node) -> tuple:
    while not node.leaf:
        node = node.vals[0]
    return node.keys[0]
