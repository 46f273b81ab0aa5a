"""Simulated multi-rank message-passing runtime.

Every rank of a world runs as a thread of the current process.  Ranks share
no mutable state: payloads are copied on send, and all interaction goes
through a :class:`Communicator`.  Channels are FIFO per
``(communicator, source, destination, tag)`` and every collective reduces in
rank order, so a program built on these primitives is bitwise reproducible.

Two clocks are available.  ``"wall"`` uses :func:`time.perf_counter`;
``"model"`` is a per-rank virtual clock advanced only by message traffic
(a latency/bandwidth model), which makes timing output deterministic.
"""
from __future__ import annotations

import collections
import os
import pickle
import threading
import time
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Communicator",
    "RankFailure",
    "DeadlockError",
    "spawn_world",
    "split_strided",
    "send",
    "recv",
    "allreduce_sum",
    "gatherv",
    "scatterv",
    "broadcast",
    "barrier",
]

#: seconds charged per message by the model clock
MODEL_LATENCY = 1.0e-6
#: seconds charged per payload byte by the model clock
MODEL_SECONDS_PER_BYTE = 1.0e-9

_POLL = 0.25


class RankFailure(RuntimeError):
    """A rank raised; the world was aborted."""

    def __init__(self, rank: int, error: BaseException):
        self.rank = rank
        self.error = error
        super().__init__(f"rank {rank} failed: {type(error).__name__}: {error}")


class DeadlockError(RuntimeError):
    pass


class _Aborted(Exception):
    """Raised inside surviving ranks once another rank failed."""


def _copy_payload(obj):
    if obj is None or isinstance(obj, (bytes, str, int, float, bool, complex, np.generic)):
        return obj
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, bytearray):
        return bytes(obj)
    if isinstance(obj, tuple):
        return tuple(_copy_payload(o) for o in obj)
    if isinstance(obj, list):
        return [_copy_payload(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _copy_payload(v) for k, v in obj.items()}
    return pickle.loads(pickle.dumps(obj))


def _nbytes(obj) -> int:
    if obj is None:
        return 0
    if isinstance(obj, np.ndarray):
        return int(obj.nbytes)
    if isinstance(obj, (bytes, bytearray, str)):
        return len(obj)
    if isinstance(obj, (int, float, bool, np.generic)):
        return 8
    if isinstance(obj, (tuple, list)):
        return sum(_nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(_nbytes(k) + _nbytes(v) for k, v in obj.items())
    return len(pickle.dumps(obj))


def _category(tag) -> str:
    if isinstance(tag, tuple):
        return str(tag[0])
    return "p2p"


class _World:
    def __init__(self, size: int, clock: str):
        if clock not in ("wall", "model"):
            raise ValueError(f"unknown clock {clock!r}; expected 'wall' or 'model'")
        self.size = size
        self.clock = clock
        self.lock = threading.Lock()
        self.conds = [threading.Condition(self.lock) for _ in range(size)]
        self.boxes = [collections.defaultdict(collections.deque) for _ in range(size)]
        self.waiting: list = [None] * size
        self.done = [False] * size
        self.failure: tuple[int, BaseException] | None = None
        self.stats = [collections.Counter() for _ in range(size)]
        self.vtime = [0.0] * size
        self.timeout = float(os.environ.get("PCTELESCOPE_RECV_TIMEOUT", "900"))

    def abort(self, rank: int, exc: BaseException):
        with self.lock:
            if self.failure is None:
                self.failure = (rank, exc)
            for c in self.conds:
                c.notify_all()

    def post(self, src: int, dst: int, key, payload, category: str):
        nbytes = _nbytes(payload)
        with self.lock:
            t = self.vtime[src] + MODEL_LATENCY
            self.vtime[src] = t
            arrival = t + nbytes * MODEL_SECONDS_PER_BYTE
            self.boxes[dst][key].append((payload, arrival))
            st = self.stats[src]
            st["sent:" + category] += 1
            st["bytes_sent"] += nbytes
            self.conds[dst].notify()

    def _deadlocked(self) -> bool:
        for r in range(self.size):
            if self.done[r]:
                continue
            key = self.waiting[r]
            if key is None or self.boxes[r].get(key):
                return False
        return True

    def take(self, dst: int, key, category: str):
        deadline = time.monotonic() + self.timeout
        with self.lock:
            box = self.boxes[dst]
            while True:
                if self.failure is not None:
                    raise _Aborted()
                q = box.get(key)
                if q:
                    payload, arrival = q.popleft()
                    if not q:
                        del box[key]
                    self.waiting[dst] = None
                    if arrival > self.vtime[dst]:
                        self.vtime[dst] = arrival
                    self.stats[dst]["recv:" + category] += 1
                    return payload
                self.waiting[dst] = key
                if self._deadlocked():
                    err = DeadlockError(
                        f"all live ranks are blocked in recv (rank {dst} waiting on {key!r})"
                    )
                    self.waiting[dst] = None
                    if self.failure is None:
                        self.failure = (dst, err)
                    for c in self.conds:
                        c.notify_all()
                    raise err
                if time.monotonic() > deadline:
                    self.waiting[dst] = None
                    raise DeadlockError(f"rank {dst} timed out waiting on {key!r}")
                self.conds[dst].wait(_POLL)

    def finish(self, rank: int):
        with self.lock:
            self.done[rank] = True
            self.waiting[rank] = None
            for c in self.conds:
                c.notify_all()


_COLL = ("coll",)


class Communicator:
    """Per-rank handle on a group of simulated ranks.

    ``member_map`` lists, for a communicator derived with
    :meth:`split_strided`, the parent ranks that are members (in order).
    """

    def __init__(self, world: _World, group: Sequence[int], rank: int, cid: str,
                 parent: "Communicator | None" = None, member_map: Sequence[int] | None = None):
        self._world = world
        self.group = tuple(group)
        self.size = len(self.group)
        self.rank = rank
        self.cid = cid
        self.parent = parent
        self.member_map = tuple(member_map) if member_map is not None else None
        self._nsplit = 0
        self._self_comm: Communicator | None = None

    def __repr__(self):
        return f"Communicator(cid={self.cid!r}, rank={self.rank}, size={self.size})"

    @property
    def world_rank(self) -> int:
        return self.group[self.rank]

    # ------------------------------------------------------------------ p2p
    def _check_rank(self, r: int, what: str):
        if not isinstance(r, (int, np.integer)) or r < 0 or r >= self.size:
            raise ValueError(f"{what} rank {r} out of range for communicator of size {self.size}")

    def send(self, dest: int, tag, payload) -> None:
        self._check_rank(dest, "destination")
        self._world.post(self.world_rank, self.group[dest], (self.cid, self.rank, tag),
                         _copy_payload(payload), _category(tag))

    def recv(self, source: int, tag):
        self._check_rank(source, "source")
        return self._world.take(self.world_rank, (self.cid, source, tag), _category(tag))

    # ----------------------------------------------------------- collectives
    def gather(self, obj, root: int = 0, tag=_COLL):
        """List of every rank's ``obj`` (rank order) at ``root``; None elsewhere."""
        self._check_rank(root, "root")
        if self.size == 1:
            return [_copy_payload(obj)]
        if self.rank == root:
            out = []
            for r in range(self.size):
                out.append(_copy_payload(obj) if r == root else self.recv(r, tag))
            return out
        self.send(root, tag, obj)
        return None

    def bcast(self, obj, root: int = 0, tag=_COLL):
        self._check_rank(root, "root")
        if self.size == 1:
            return _copy_payload(obj)
        if self.rank == root:
            for r in range(self.size):
                if r != root:
                    self.send(r, tag, obj)
            return _copy_payload(obj)
        return self.recv(root, tag)

    def allgather(self, obj, tag=_COLL) -> list:
        return self.bcast(self.gather(obj, 0, tag), 0, tag)

    def allreduce_sum(self, local) -> np.ndarray:
        """Elementwise sum; accumulated left to right in rank order."""
        vec = np.atleast_1d(np.asarray(local, dtype=np.float64))
        parts = self.gather(vec, 0)
        if self.rank == 0:
            lengths = {len(p) for p in parts}
            if len(lengths) != 1:
                result = ("error", f"allreduce_sum: mismatched lengths {[len(p) for p in parts]}")
            else:
                acc = parts[0].copy()
                for p in parts[1:]:
                    acc += p
                result = ("ok", acc)
        else:
            result = None
        status, value = self.bcast(result, 0)
        if status == "error":
            raise ValueError(value)
        return value

    def allreduce(self, value: float, op: str = "sum") -> float:
        parts = self.gather(float(value), 0)
        if self.rank == 0:
            if op == "sum":
                acc = 0.0
                for p in parts:
                    acc += p
            elif op == "max":
                acc = max(parts)
            elif op == "min":
                acc = min(parts)
            else:
                raise ValueError(f"unknown reduction {op!r}")
        else:
            acc = None
        return self.bcast(acc, 0)

    def gatherv(self, local, root: int = 0):
        """Concatenate every rank's sequence at ``root`` in rank order."""
        parts = self.gather(local, root)
        if parts is None:
            return None
        if all(isinstance(p, (bytes, bytearray)) for p in parts):
            return b"".join(bytes(p) for p in parts)
        if all(isinstance(p, np.ndarray) for p in parts):
            return np.concatenate(parts) if parts else np.empty(0)
        out = []
        for p in parts:
            out.extend(p)
        return out

    def scatterv(self, parts, root: int = 0):
        """Deliver ``parts[k]`` from ``root`` to rank ``k``.

        ``parts`` is only read on the root; other ranks may pass anything.
        """
        self._check_rank(root, "root")
        if self.rank == root:
            if parts is None or len(parts) != self.size:
                n = None if parts is None else len(parts)
                raise ValueError(f"scatterv needs {self.size} parts at the root, got {n}")
            for r in range(self.size):
                if r != root:
                    self.send(r, _COLL, parts[r])
            return _copy_payload(parts[root])
        return self.recv(root, _COLL)

    def alltoall(self, parts: Sequence, tag=("a2a",)) -> list:
        """Personalised all-to-all: rank k receives ``parts[k]`` of every rank."""
        if len(parts) != self.size:
            raise ValueError(f"alltoall needs {self.size} parts, got {len(parts)}")
        for r in range(self.size):
            if r != self.rank:
                self.send(r, tag, parts[r])
        out = []
        for r in range(self.size):
            out.append(_copy_payload(parts[r]) if r == self.rank else self.recv(r, tag))
        return out

    def barrier(self) -> None:
        self.gather(None, 0)
        self.bcast(None, 0)

    # --------------------------------------------------------- derivation
    def split_strided(self, r: int) -> "Communicator | None":
        """Sub-communicator of the ranks with ``rank % r == 0``.

        Collective over ``self``; non-members receive ``None``.
        """
        if not isinstance(r, (int, np.integer)) or r < 1:
            raise ValueError(f"reduction factor must be a positive integer, got {r!r}")
        members = list(range(0, self.size, int(r)))
        cid = f"{self.cid}.s{self._nsplit}"
        self._nsplit += 1
        if self.rank % r:
            return None
        return Communicator(self._world, [self.group[m] for m in members], self.rank // r,
                            cid, parent=self, member_map=members)

    def self_comm(self) -> "Communicator":
        """Size-one communicator holding only this rank."""
        if self._self_comm is None:
            self._self_comm = Communicator(self._world, [self.world_rank], 0,
                                           f"{self.cid}.self{self.rank}", parent=self,
                                           member_map=[self.rank])
        return self._self_comm

    def is_derived_from(self, other: "Communicator") -> bool:
        c = self
        while c is not None:
            if c.cid == other.cid:
                return True
            c = c.parent
        return False

    # ------------------------------------------------------ instrumentation
    def wtime(self) -> float:
        if self._world.clock == "model":
            with self._world.lock:
                return self._world.vtime[self.world_rank]
        return time.perf_counter()

    @property
    def clock(self) -> str:
        return self._world.clock

    def message_counts(self) -> collections.Counter:
        """Snapshot of this rank's send/receive counters (all communicators)."""
        with self._world.lock:
            return collections.Counter(self._world.stats[self.world_rank])


def spawn_world(n: int, rank_main: Callable[..., Any], *args, clock: str = "wall", **kwargs) -> list:
    """Run ``rank_main(comm, *args, **kwargs)`` on ``n`` simulated ranks.

    Returns the per-rank results in rank order.  If any rank raises, the
    world is aborted and :class:`RankFailure` names the first failing rank.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"world size must be a positive integer, got {n!r}")
    world = _World(int(n), clock)
    results: list = [None] * n

    def body(rank):
        comm = Communicator(world, range(n), rank, "world")
        try:
            results[rank] = rank_main(comm, *args, **kwargs)
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported through RankFailure
            world.abort(rank, exc)
        finally:
            world.finish(rank)

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if world.failure is not None:
        rank, exc = world.failure
        raise RankFailure(rank, exc) from exc
    return results


# Functional spellings of the communicator methods.

def split_strided(parent: Communicator, r: int) -> Communicator | None:
    return parent.split_strided(r)


def send(comm: Communicator, dest: int, tag, payload) -> None:
    comm.send(dest, tag, payload)


def recv(comm: Communicator, source: int, tag):
    return comm.recv(source, tag)


def allreduce_sum(comm: Communicator, local) -> np.ndarray:
    return comm.allreduce_sum(local)


def gatherv(comm: Communicator, root: int, local):
    return comm.gatherv(local, root)


def scatterv(comm: Communicator, root: int, parts):
    return comm.scatterv(parts, root)


def broadcast(comm: Communicator, root: int, payload):
    return comm.bcast(payload, root)


def barrier(comm: Communicator) -> None:
    comm.barrier()


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)

