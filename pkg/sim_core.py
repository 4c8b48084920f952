"""
Simulation Core
Deterministic discrete-event engine and per-component seeded random streams
"""

import heapq
import logging
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import SchedulingError

logger = logging.getLogger(__name__)

SimTime = int  # microseconds since scenario start


@dataclass(frozen=True)
class Event:
    """A message delivered to `target` at `fire_at`; `seq` is assigned on scheduling"""
    fire_at: SimTime
    target: str
    payload: Any = None
    seq: int = -1

    @property
    def order_key(self) -> Tuple[int, int]:
        return (self.fire_at, self.seq)


def payload_kind(payload: Any) -> str:
    """Short stable name of a payload, used in the event trace"""
    if payload is None:
        return 'none'
    kind = getattr(payload, 'kind', None)
    if isinstance(kind, Enum):
        return str(kind.value)
    if isinstance(kind, str):
        return kind
    return type(payload).__name__


class RngStream:
    """
    Counter-based random stream for one component

    The stream is keyed by (seed, stream_id) only, so adding or removing a
    component never shifts the draws of another one.
    """

    def __init__(self, seed: int, stream_id: str):
        self.seed = int(seed)
        self.stream_id = stream_id
        sequence = np.random.SeedSequence(
            self.seed, spawn_key=(zlib.crc32(stream_id.encode('utf-8')),)
        )
        self._generator = np.random.Generator(np.random.Philox(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def standard_normal(self, size: int) -> np.ndarray:
        return self._generator.standard_normal(size)

    def random(self) -> float:
        return float(self._generator.random())

    def __repr__(self) -> str:
        return f'RngStream(seed={self.seed}, stream_id={self.stream_id!r})'


@dataclass
class EngineStats:
    processed: int = 0
    scheduled: int = 0
    unhandled: int = 0


class EventEngine:
    """
    Single-threaded event loop

    Events are dequeued in (fire_at, seq) order, where seq is the insertion
    counter. Handlers are registered per target and receive the event.
    """

    def __init__(self, seed: int = 0, trace: bool = False, audit: bool = False):
        self.seed = seed
        self.now: SimTime = 0
        self._queue: List[Tuple[int, int, Event]] = []
        self._seq = 0
        self._handlers: Dict[str, Callable[[Event], None]] = {}
        self._streams: Dict[str, RngStream] = {}
        self.stats = EngineStats()
        self.trace_enabled = trace
        self.trace_lines: List[str] = []
        self.audit = audit
        self.dequeue_log: List[Tuple[int, int]] = []

    def register(self, target: str, handler: Callable[[Event], None]) -> None:
        self._handlers[target] = handler

    def rng(self, stream_id: str) -> RngStream:
        """Return the component's stream, creating it on first use"""
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = RngStream(self.seed, stream_id)
            self._streams[stream_id] = stream
        return stream

    def schedule(self, event: Event) -> Event:
        """Enqueue an event; returns it with its insertion counter assigned"""
        if event.fire_at < self.now:
            raise SchedulingError(
                f'event for {event.target!r} at t={event.fire_at} scheduled in the past (clock={self.now})'
            )
        event = replace(event, seq=self._seq)
        self._seq += 1
        heapq.heappush(self._queue, (event.fire_at, event.seq, event))
        self.stats.scheduled += 1
        return event

    def schedule_at(self, fire_at: SimTime, target: str, payload: Any = None) -> Event:
        return self.schedule(Event(fire_at=int(fire_at), target=target, payload=payload))

    def schedule_in(self, delay: SimTime, target: str, payload: Any = None) -> Event:
        return self.schedule_at(self.now + int(delay), target, payload)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[SimTime]:
        return self._queue[0][0] if self._queue else None

    def run_until(self, t_end: SimTime) -> int:
        """Process every event with fire_at <= t_end, then set the clock to t_end"""
        if t_end < self.now:
            raise SchedulingError(f'run_until({t_end}) is before the clock ({self.now})')

        processed = 0
        last_key = self.dequeue_log[-1] if self.dequeue_log else (-1, -1)
        while self._queue and self._queue[0][0] <= t_end:
            fire_at, seq, event = heapq.heappop(self._queue)
            if self.audit:
                if (fire_at, seq) <= last_key:
                    raise SchedulingError(f'event {(fire_at, seq)} dequeued after {last_key}')
                last_key = (fire_at, seq)
                self.dequeue_log.append(last_key)
            self.now = fire_at
            if self.trace_enabled:
                self.trace_lines.append(f'{fire_at}\t{seq}\t{event.target}\t{payload_kind(event.payload)}')
            self._dispatch(event)
            processed += 1

        self.now = t_end
        self.stats.processed += processed
        return processed

    def _dispatch(self, event: Event) -> None:
        handler = self._handlers.get(event.target)
        if handler is None:
            self.stats.unhandled += 1
            logger.debug('no handler for %s at t=%d', event.target, event.fire_at)
            return
        handler(event)

    def write_trace(self, path) -> None:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for line in self.trace_lines:
                f.write(line)
                f.write('\n')
