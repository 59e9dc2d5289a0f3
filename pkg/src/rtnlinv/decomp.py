"""
Parallel decomposition of the reconstruction.

Channel decomposition: a reconstruction thread owns a WorkerGroup of A compute
workers; each worker handles a contiguous block of channels and the per-channel
image terms are combined by a fixed-order all-reduce, so results do not depend
on A.

Temporal decomposition: frames of a temporal chain are reconstructed by T
threads. Frames up to the prefix length run strictly in order; later frames
start from the most recent completed frame in a lookback window and gate their
final Newton step on the completion of their direct predecessor.
"""

import itertools
import logging
import math
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Generic,
    Hashable,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    TypeVar,
)

import numpy as np

from .errors import ConfigurationError, ContractViolation, DecompositionFault

logger = logging.getLogger(__name__)

GROUP_SIZE_MAX = 4

T = TypeVar("T")


def partition_channels(J: int, A: int) -> List[range]:
    """
    Split channels 0..J-1 into A contiguous blocks, larger blocks first.

    (10, 3) -> sizes 4, 3, 3.
    """
    if not 1 <= A <= min(J, GROUP_SIZE_MAX):
        raise ConfigurationError(f"need 1 <= A <= min(J={J}, {GROUP_SIZE_MAX}), got A={A}")
    base, extra = divmod(J, A)
    blocks = []
    start = 0
    for a in range(A):
        size = base + (1 if a < extra else 0)
        blocks.append(range(start, start + size))
        start += size
    return blocks


def all_reduce_sum(partials: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """
    Sum per-channel terms contributed by the workers of a group.

    Each partial is a stack [n_a, ...] of the worker's per-channel terms (or a
    single term). The terms are added one at a time in worker order, which is
    global channel order for contiguous blocks, so the bits of the result do
    not depend on how channels were partitioned.
    """
    if not partials:
        raise DecompositionFault("all-reduce with no partials")
    for a, part in enumerate(partials):
        if part is None:
            raise DecompositionFault(f"worker {a} contributed no partial")
    terms = [t for part in partials for t in (part if part.ndim == 3 else part[None])]
    total = terms[0].copy()
    for t in terms[1:]:
        total += t
    return total


class WorkerGroup:
    """
    A compute workers serving one reconstruction thread.

    Args:
        workers: Number of workers A (<= GROUP_SIZE_MAX)
        timeout: Seconds to wait for a worker before declaring a fault
    """

    def __init__(self, workers: int = 1, timeout: Optional[float] = 600.0):
        if not 1 <= workers <= GROUP_SIZE_MAX:
            raise ConfigurationError(f"workers per thread must be in [1, {GROUP_SIZE_MAX}]")
        self.workers = workers
        self.timeout = timeout
        self._pool: Optional[ThreadPoolExecutor] = None
        if workers > 1:
            self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rtnlinv-worker")

    def assignment(self, J: int) -> List[range]:
        return partition_channels(J, self.workers)

    def map_blocks(self, fn: Callable[[range], T], J: int) -> List[T]:
        """Run ``fn`` on every channel block; results in worker order."""
        blocks = self.assignment(J)
        if self._pool is None:
            return [fn(block) for block in blocks]
        futures = [self._pool.submit(fn, block) for block in blocks]
        results = []
        for a, fut in enumerate(futures):
            try:
                results.append(fut.result(timeout=self.timeout))
            except FutureTimeout as exc:
                raise DecompositionFault(f"worker {a} timed out after {self.timeout}s") from exc
        return results

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "WorkerGroup":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


@dataclass(frozen=True)
class TemporalSchedule:
    """Prefix length l, lookback window o and Newton steps M."""

    prefix: int
    lookback: int
    newton_steps: int

    def __post_init__(self) -> None:
        if self.prefix < 1 or self.lookback < 1 or self.newton_steps < 1:
            raise ConfigurationError("prefix, lookback and Newton steps must be >= 1")

    @classmethod
    def for_turns(cls, turns: int, newton_steps: int) -> "TemporalSchedule":
        """l equal to the number of turns, o roughly half of it."""
        return cls(prefix=turns, lookback=max(1, math.ceil(turns / 2)), newton_steps=newton_steps)


class CompletionLedger:
    """
    Progress of one temporal chain.

    Completion is monotone: a completed frame keeps its final estimate until
    it falls out of the retention window.
    """

    def __init__(self, retain: Optional[int] = None):
        self._cond = threading.Condition()
        self._estimates: Dict[int, Any] = {}
        self._completed: Set[int] = set()
        self._steps: Dict[int, int] = {}
        self._failure: Optional[BaseException] = None
        self._newest = -1
        self.retain = retain
        self.audit: List[str] = []
        self.final_regularizers: Dict[int, int] = {}

    def mark_step(self, n: int, m: int) -> None:
        with self._cond:
            if m < self._steps.get(n, -1):
                raise ContractViolation(f"frame {n}: step {m} after {self._steps[n]}")
            self._steps[n] = m

    def latest_step(self, n: int) -> int:
        with self._cond:
            return self._steps.get(n, -1)

    def complete(self, n: int, estimate: Any) -> None:
        with self._cond:
            if n in self._completed:
                raise ContractViolation(f"frame {n} completed twice")
            self._completed.add(n)
            self._estimates[n] = estimate
            self._newest = max(self._newest, n)
            if self.retain is not None:
                floor = self._newest - self.retain
                for old in [k for k in self._estimates if k < floor]:
                    del self._estimates[old]
            self._cond.notify_all()

    def is_complete(self, n: int) -> bool:
        with self._cond:
            return n in self._completed

    def latest_complete(self, lo: int, hi: int) -> Optional[int]:
        """Most recent completed frame in [lo, hi] whose estimate is retained."""
        with self._cond:
            for k in range(hi, lo - 1, -1):
                if k in self._estimates:
                    return k
            return None

    def estimate(self, n: int) -> Any:
        with self._cond:
            try:
                return self._estimates[n]
            except KeyError:
                raise DecompositionFault(f"estimate of frame {n} is not available") from None

    def wait_for(self, n: int, timeout: Optional[float] = None) -> Any:
        """Block until frame ``n`` is complete; returns its estimate."""
        with self._cond:
            done = self._cond.wait_for(
                lambda: n in self._completed or self._failure is not None, timeout=timeout
            )
            if self._failure is not None:
                raise DecompositionFault(f"waiting for frame {n}: chain aborted") from self._failure
            if not done:
                raise DecompositionFault(f"frame {n} not complete after {timeout}s")
            return self._estimates.get(n)

    def abort(self, cause: BaseException) -> None:
        with self._cond:
            self._failure = cause
            self._cond.notify_all()

    def record(self, line: str) -> None:
        with self._cond:
            self.audit.append(line)


def h(
    n: int,
    m: int,
    sched: TemporalSchedule,
    ledger: CompletionLedger,
    timeout: Optional[float] = None,
) -> int:
    """
    Frame whose estimate initialises or regularises Newton step ``m`` of frame ``n``.

    Returns n-1 in the strict prefix and for the final step, blocking until it
    completes. Otherwise returns the most recent completed frame in
    [n-o, n-1]; when none is complete, blocks on the oldest frame of the window.
    """
    if n < 1:
        raise ContractViolation(f"h is defined for n >= 1, got {n}")
    if n <= sched.prefix or m == sched.newton_steps - 1:
        ledger.wait_for(n - 1, timeout)
        return n - 1
    oldest = max(n - sched.lookback, 0)
    k = ledger.latest_complete(oldest, n - 1)
    if k is not None:
        return k
    ledger.wait_for(oldest, timeout)
    return oldest


@dataclass(frozen=True)
class FramePlan:
    """Static placement of one frame: its thread and what it waits on."""

    index: int
    thread: int
    sequential: bool
    gated_on: Optional[int]


def frame_thread(n: int, threads: int, sched: TemporalSchedule) -> int:
    return 0 if n <= sched.prefix else (n - sched.prefix - 1) % threads


def schedule_frames(threads: int, sched: TemporalSchedule, frames: int) -> List[FramePlan]:
    """
    Execution plan of a chain of ``frames`` frames on ``threads`` threads.

    Frames up to the prefix run in order on thread 0; later frames go round-robin.
    Every frame but the first gates its final Newton step on frame n-1, so all
    waits point at smaller indices.
    """
    if threads < 1:
        raise ConfigurationError(f"need at least one reconstruction thread, got {threads}")
    return [
        FramePlan(n, frame_thread(n, threads, sched), n <= sched.prefix, n - 1 if n else None)
        for n in range(frames)
    ]


@dataclass
class FrameContext:
    """What a reconstruction callable gets for one frame."""

    chain: Hashable
    index: int
    thread: int
    workers: WorkerGroup
    schedule: TemporalSchedule
    ledger: CompletionLedger
    timeout: Optional[float] = None
    used: Dict[int, int] = field(default_factory=dict)

    def source(self, m: int) -> Optional[int]:
        """Frame index used at Newton step m (None for the first frame)."""
        if self.index == 0:
            return None
        k = h(self.index, m, self.schedule, self.ledger, self.timeout)
        self.used[m] = k
        return k

    def estimate_for_step(self, m: int) -> Any:
        """Estimate of frame h(n, m), or None for the first frame of the chain."""
        self.ledger.mark_step(self.index, m)
        k = self.source(m)
        return None if k is None else self.ledger.estimate(k)


@dataclass
class _Item:
    seq: int
    chain: Hashable
    index: int
    payload: Any


_STOP = object()


class TemporalScheduler(Generic[T]):
    """
    Out-of-order reconstruction across T threads with in-order delivery.

    ``reconstruct(payload, ctx)`` must return ``(result, estimate)``; the estimate
    is published on the chain's ledger, the result is delivered by
    ``next_result`` in submission order.

    Args:
        reconstruct: Per-frame reconstruction callable
        schedule: Prefix, lookback and Newton steps
        threads: Reconstruction threads T
        workers: Compute workers per thread A
        timeout: Seconds any wait may block before a DecompositionFault
    """

    def __init__(
        self,
        reconstruct: Callable[[Any, FrameContext], Tuple[T, Any]],
        schedule: TemporalSchedule,
        threads: int = 1,
        workers: int = 1,
        timeout: Optional[float] = None,
    ):
        if threads < 1:
            raise ConfigurationError("need at least one reconstruction thread")
        self.reconstruct = reconstruct
        self.schedule = schedule
        self.threads = threads
        self.workers = workers
        self.timeout = timeout
        self.ledgers: Dict[Hashable, CompletionLedger] = {}
        self._queues: List["queue.Queue[Any]"] = [queue.Queue() for _ in range(threads)]
        self._groups = [WorkerGroup(workers) for _ in range(threads)]
        self._threads: List[threading.Thread] = []
        self._seq = itertools.count()
        self._done: Dict[int, Tuple[_Item, Optional[T], Optional[BaseException]]] = {}
        self._done_cond = threading.Condition()
        self._next = 0
        self._running = False

    def ledger(self, chain: Hashable) -> CompletionLedger:
        if chain not in self.ledgers:
            # completions are in index order, so the lookback window is all h can reach
            self.ledgers[chain] = CompletionLedger(retain=self.schedule.lookback + 1)
        return self.ledgers[chain]

    def thread_for(self, index: int) -> int:
        """Prefix frames run on thread 0, later frames round-robin."""
        return frame_thread(index, self.threads, self.schedule)

    def start(self) -> None:
        if self._running:
            return
        self._running = True
        for t in range(self.threads):
            thread = threading.Thread(
                target=self._run, args=(t,), name=f"rtnlinv-rec-{t}", daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def submit(self, chain: Hashable, index: int, payload: Any) -> int:
        """Queue frame ``index`` of ``chain``; returns its delivery sequence number."""
        if not self._running:
            self.start()
        item = _Item(next(self._seq), chain, index, payload)
        self.ledger(chain)
        self._queues[self.thread_for(index)].put(item)
        return item.seq

    def next_result(self, timeout: Optional[float] = None) -> Tuple[Hashable, int, T]:
        """Block for the next result in submission order; re-raises its failure."""
        with self._done_cond:
            ok = self._done_cond.wait_for(lambda: self._next in self._done, timeout=timeout)
            if not ok:
                raise DecompositionFault(f"no result for item {self._next} after {timeout}s")
            item, result, error = self._done.pop(self._next)
            self._next += 1
        if error is not None:
            raise error
        return item.chain, item.index, result  # type: ignore[return-value]

    def _run(self, t: int) -> None:
        group = self._groups[t]
        while True:
            item = self._queues[t].get()
            if item is _STOP:
                return
            ledger = self.ledgers[item.chain]
            ctx = FrameContext(item.chain, item.index, t, group, self.schedule, ledger, self.timeout)
            try:
                result, estimate = self.reconstruct(item.payload, ctx)
                ledger.complete(item.index, estimate)
                self._audit(ctx)
                outcome: Tuple[_Item, Optional[T], Optional[BaseException]] = (item, result, None)
            except BaseException as exc:  # delivered to the consumer in order
                logger.debug(f"frame {item.index} of {item.chain} failed: {exc!r}")
                for other in self.ledgers.values():
                    other.abort(exc)
                outcome = (item, None, exc)
            with self._done_cond:
                self._done[item.seq] = outcome
                self._done_cond.notify_all()

    def _audit(self, ctx: FrameContext) -> None:
        init = ctx.used.get(0)
        final = ctx.used.get(self.schedule.newton_steps - 1)
        if final is not None:
            ctx.ledger.final_regularizers[ctx.index] = final
        line = (
            f"frame {ctx.index}: init←{'-' if init is None else init}, "
            f"reg_final←{'-' if final is None else final}, "
            f"thread {ctx.thread}, workers {self.workers}"
        )
        ctx.ledger.record(line)
        logger.info(line)

    def close(self) -> None:
        if not self._running:
            return
        for q in self._queues:
            q.put(_STOP)
        for thread in self._threads:
            thread.join()
        for group in self._groups:
            group.close()
        self._threads = []
        self._running = False

    def __enter__(self) -> "TemporalScheduler[T]":
        self.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()
