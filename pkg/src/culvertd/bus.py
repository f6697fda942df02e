"""In-process publish/subscribe message bus.

Stands in for a networked robotics middleware while preserving the topic
topology: `frames`, `detections`, `deficiency-log`, `summaries`,
`telemetry`. Delivery is at-least-once and in publish order per topic; each
topic keeps a bounded retained buffer that late subscribers can replay.
"""

from __future__ import annotations

import queue
import threading
from collections import deque
from typing import Any, Iterator


class UnknownTopic(KeyError):
    pass


TOPICS = ("frames", "detections", "deficiency-log", "summaries", "telemetry")


class Subscription:
    """One subscriber's ordered message queue."""

    def __init__(self, topic: str, maxsize: int = 0):
        self.topic = topic
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)

    def _deliver(self, message: Any) -> None:
        self._q.put(message)

    def get(self, timeout: float | None = None) -> Any:
        return self._q.get(timeout=timeout)

    def get_nowait(self) -> Any:
        return self._q.get_nowait()

    def drain(self) -> list[Any]:
        """Pop everything currently queued, without blocking."""
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out

    def __iter__(self) -> Iterator[Any]:
        while True:
            try:
                yield self._q.get_nowait()
            except queue.Empty:
                return


class MessageBus:
    """Thread-safe topic bus with retained-message replay."""

    def __init__(self, topics: tuple[str, ...] = TOPICS, retain: int = 10_000):
        self._topics = tuple(topics)
        self._retained: dict[str, deque] = {t: deque(maxlen=retain) for t in self._topics}
        self._subs: dict[str, list[Subscription]] = {t: [] for t in self._topics}
        self._lock = threading.Lock()

    @property
    def topics(self) -> tuple[str, ...]:
        return self._topics

    def _check(self, topic: str) -> None:
        if topic not in self._retained:
            raise UnknownTopic(f"unknown topic: {topic!r} (expected one of {self._topics})")

    def publish(self, topic: str, message: Any) -> None:
        self._check(topic)
        with self._lock:
            self._retained[topic].append(message)
            subs = list(self._subs[topic])
        for sub in subs:
            sub._deliver(message)

    def subscribe(self, topic: str, replay: bool = False) -> Subscription:
        """Register a subscriber; with replay=True, the retained buffer is
        delivered first, ahead of any live message."""
        self._check(topic)
        sub = Subscription(topic)
        with self._lock:
            if replay:
                for message in self._retained[topic]:
                    sub._deliver(message)
            self._subs[topic].append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            try:
                self._subs[sub.topic].remove(sub)
            except ValueError:
                pass

    def retained(self, topic: str) -> list[Any]:
        self._check(topic)
        with self._lock:
            return list(self._retained[topic])
