"""The shared exploration tree: lineage, slot reservations, statuses, frontier.

Every transition happens under one lock, so reserve/attach/commit/prune/fail
are linearizable. ``child_count`` counts committed children only; a
reservation that ends in a prune or a failure is released and counted as
consumed, which frees the slot for a later step.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Any

from ..errors import SchedulingError
from .presets import WorkflowConfig

ACTIVE, COMMITTED, PRUNED, FAILED = "active", "committed", "pruned", "failed"


class NoEligibleParent(SchedulingError):
    """No node currently has a free slot below the depth limit."""


class TreeExhausted(NoEligibleParent):
    """No free slot now, and no outstanding reservation can free one later."""


class InvariantViolation(AssertionError):
    pass


@dataclass
class BranchNode:
    node_id: int
    parent: int | None
    depth: int
    branch_id: str | None = None
    status: str = ACTIVE
    child_count: int = 0
    reserved_slots: int = 0
    worker: int | None = None
    step: int | None = None

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Reservation:
    parent: int
    depth: int
    token: int


@dataclass
class SlotLedger:
    issued: int = 0
    committed: int = 0
    consumed_by_prune: int = 0
    consumed_by_failure: int = 0

    def to_json(self) -> dict[str, int]:
        return dict(self.__dict__)


class BranchTree:
    def __init__(self, config: WorkflowConfig, root_branch: str):
        self.config = config
        self.lock = threading.RLock()
        self.nodes: dict[int, BranchNode] = {0: BranchNode(0, None, 0, root_branch, COMMITTED)}
        self.frontier: set[int] = {0}
        self.slots = SlotLedger()
        self._outstanding: dict[int, Reservation] = {}
        self._next_id = 1
        self._next_token = 0

    # -- queries --------------------------------------------------------------

    @property
    def root(self) -> BranchNode:
        return self.nodes[0]

    def free_slots(self, node: BranchNode) -> int | None:
        """Free child slots; ``None`` when the fanout is unbounded."""
        limit = self.config.fanout(node.depth)
        if limit is None:
            return None
        return limit - node.child_count - node.reserved_slots

    def eligible(self) -> list[tuple[BranchNode, int]]:
        """(node, weight) for every node that can take another child.

        The weight is the number of free slots, so drawing by weight is uniform
        over (node, slot) pairs; unbounded nodes count once.
        """
        out = []
        for node in self.nodes.values():
            if node.status != COMMITTED or node.depth >= self.config.max_depth:
                continue
            free = self.free_slots(node)
            if free is None:
                out.append((node, 1))
            elif free > 0:
                out.append((node, free))
        return out

    def outstanding(self) -> int:
        with self.lock:
            return len(self._outstanding)

    # -- transitions ----------------------------------------------------------

    def reserve(self, rng: random.Random) -> Reservation:
        with self.lock:
            cands = self.eligible()
            if not cands:
                if not self._outstanding:
                    raise TreeExhausted("no node can take another child and no step is in flight")
                raise NoEligibleParent("every eligible slot is reserved; waiting for steps to finish")
            # Sorted by node id so the draw depends only on the rng and the tree.
            cands.sort(key=lambda c: c[0].node_id)
            pick = rng.randrange(sum(w for _, w in cands))
            for node, w in cands:
                if pick < w:
                    break
                pick -= w
            node.reserved_slots += 1
            self.slots.issued += 1
            res = Reservation(node.node_id, node.depth + 1, self._next_token)
            self._next_token += 1
            self._outstanding[res.token] = res
            return res

    def attach(self, res: Reservation, branch_id: str, worker: int | None = None,
               step: int | None = None) -> BranchNode:
        """Record the created branch as an active child of the reserved parent."""
        with self.lock:
            if res.token not in self._outstanding:
                raise SchedulingError("reservation already settled")
            node = BranchNode(self._next_id, res.parent, res.depth, branch_id, ACTIVE, worker=worker, step=step)
            self._next_id += 1
            self.nodes[node.node_id] = node
            return node

    def _settle(self, res: Reservation) -> BranchNode:
        if self._outstanding.pop(res.token, None) is None:
            raise SchedulingError("reservation already settled")
        parent = self.nodes[res.parent]
        parent.reserved_slots -= 1
        return parent

    def commit(self, res: Reservation, node: BranchNode) -> None:
        with self.lock:
            parent = self._settle(res)
            parent.child_count += 1
            node.status = COMMITTED
            self.slots.committed += 1
            self.frontier.discard(parent.node_id)
            self.frontier.add(node.node_id)

    def prune(self, res: Reservation, node: BranchNode | None) -> None:
        with self.lock:
            self._settle(res)
            if node is not None:
                node.status = PRUNED
            self.slots.consumed_by_prune += 1

    def fail(self, res: Reservation, node: BranchNode | None = None) -> None:
        with self.lock:
            self._settle(res)
            if node is not None:
                node.status = FAILED
            self.slots.consumed_by_failure += 1

    # -- inspection -----------------------------------------------------------

    def frontier_nodes(self) -> list[BranchNode]:
        with self.lock:
            return sorted((self.nodes[i] for i in self.frontier), key=lambda n: n.node_id)

    def brute_force_frontier(self) -> set[int]:
        with self.lock:
            has_committed_child = {n.parent for n in self.nodes.values() if n.status == COMMITTED}
            return {n.node_id for n in self.nodes.values()
                    if n.status == COMMITTED and n.node_id not in has_committed_child}

    def check_invariants(self) -> None:
        """Raise :class:`InvariantViolation` if any topology rule is broken."""
        with self.lock:
            cfg = self.config
            committed_children: dict[int, int] = {}
            for n in self.nodes.values():
                if n.parent is not None and n.status == COMMITTED:
                    committed_children[n.parent] = committed_children.get(n.parent, 0) + 1
            for n in self.nodes.values():
                if n.node_id != 0 and not 1 <= n.depth <= cfg.max_depth:
                    raise InvariantViolation(f"node {n.node_id} at depth {n.depth} (D={cfg.max_depth})")
                if n.parent is not None and n.depth != self.nodes[n.parent].depth + 1:
                    raise InvariantViolation(f"node {n.node_id} depth disagrees with its parent")
                if n.child_count != committed_children.get(n.node_id, 0):
                    raise InvariantViolation(f"node {n.node_id} child_count drifted")
                limit = cfg.fanout(n.depth)
                if limit is not None and n.child_count + n.reserved_slots > limit:
                    raise InvariantViolation(f"node {n.node_id} exceeds fanout {limit}")
                if n.reserved_slots < 0:
                    raise InvariantViolation(f"node {n.node_id} has negative reservations")
                if n.status in (PRUNED, FAILED) and n.child_count:
                    raise InvariantViolation(f"{n.status} node {n.node_id} has children")
                if n.status == COMMITTED:
                    anc = n.parent
                    while anc is not None:
                        if self.nodes[anc].status != COMMITTED:
                            raise InvariantViolation(f"committed node {n.node_id} under {self.nodes[anc].status}")
                        anc = self.nodes[anc].parent
            s = self.slots
            held = sum(n.reserved_slots for n in self.nodes.values())
            if held != len(self._outstanding):
                raise InvariantViolation("reserved_slots disagree with outstanding reservations")
            if s.issued != s.committed + s.consumed_by_prune + s.consumed_by_failure + len(self._outstanding):
                raise InvariantViolation(f"slot conservation broken: {s}")
            if s.committed != sum(committed_children.values()):
                raise InvariantViolation("committed slot count disagrees with the tree")
            brute = self.brute_force_frontier()
            if brute != self.frontier:
                raise InvariantViolation(f"frontier {sorted(self.frontier)} != brute force {sorted(brute)}")

    def snapshot(self) -> dict[str, Any]:
        with self.lock:
            return {
                "nodes": [n.to_json() for n in sorted(self.nodes.values(), key=lambda n: n.node_id)],
                "frontier": [self.nodes[i].branch_id for i in sorted(self.frontier)],
                "slots": self.slots.to_json(),
                "outstanding": len(self._outstanding),
            }
