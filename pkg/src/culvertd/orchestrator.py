"""The real-time pipeline: detection ingest, consolidation, event-triggered
summarization and telemetry run as concurrent stages connected by bounded
queues over the in-process message bus.

Summarization concurrency is fixed at one worker, so throughput saturates
at 1 / per-summary latency. Budget checking and adaptive degradation are
pure functions driven by trailing telemetry windows.
"""

from __future__ import annotations

import queue
import resource
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .bus import MessageBus
from .core import (
    DefectClass,
    DeficiencyRecord,
    Detection,
    Frame,
    InspectionReport,
    SegmentDescriptor,
    StructuredSummary,
)
from .detection import DedupPolicy, DeficiencyLog, DetectorProfile, detect
from .quant import ModelConfig
from .summarize import context_for_record, template_summarize


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"pipeline stage {stage!r} failed: {cause!r}")


@dataclass(frozen=True)
class BudgetSpec:
    """Hard deployment limits plus the softer operational latency target."""

    t_max_s: float = 5.0
    m_max_gb: float = 8.0
    p_max: float = 100e6
    latency_target_s: float = 3.0
    thermal_limit_c: float = 75.0  # config field only; never measured at desk scale

    def __post_init__(self) -> None:
        if min(self.t_max_s, self.m_max_gb, self.p_max, self.latency_target_s) <= 0:
            raise ValueError("all budget limits must be positive")
        if self.latency_target_s > self.t_max_s:
            raise ValueError("latency target cannot exceed the hard latency limit")

    def to_dict(self) -> dict:
        return {
            "t_max_s": self.t_max_s,
            "m_max_gb": self.m_max_gb,
            "p_max": self.p_max,
            "latency_target_s": self.latency_target_s,
            "thermal_limit_c": self.thermal_limit_c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetSpec":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class TelemetrySample:
    """One telemetry measurement; per-summary fields are None on periodic
    samples that carry only queue/throughput state."""

    timestamp: float
    detect_ms: Optional[float] = None
    summarize_ms: Optional[float] = None
    end_to_end_ms: Optional[float] = None
    memory_gb: float = 0.0
    queue_depths: dict[str, int] = field(default_factory=dict)
    summaries_per_sec: float = 0.0
    fps: float = 0.0
    dropped_frames: int = 0
    event: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "detect_ms": self.detect_ms,
            "summarize_ms": self.summarize_ms,
            "end_to_end_ms": self.end_to_end_ms,
            "memory_gb": self.memory_gb,
            "queue_depths": self.queue_depths,
            "summaries_per_sec": self.summaries_per_sec,
            "fps": self.fps,
            "dropped_frames": self.dropped_frames,
            "event": self.event,
        }


DEFAULT_CRITICAL_CLASSES = frozenset(
    {DefectClass.HOLES, DefectClass.FRACTURE, DefectClass.DEFORMATION}
)


@dataclass(frozen=True)
class TriggerPolicy:
    """When summarization fires: on segment completion, and immediately for
    significant detections (high confidence or a critical class)."""

    segment_length_m: float = 6.0
    significance_confidence: float = 0.9
    critical_classes: frozenset[DefectClass] = DEFAULT_CRITICAL_CLASSES

    def __post_init__(self) -> None:
        if self.segment_length_m <= 0:
            raise ValueError("segment length must be > 0")
        if not 0.0 <= self.significance_confidence <= 1.0:
            raise ValueError("significance confidence must be in [0, 1]")

    def is_significant(self, d: Detection) -> bool:
        return (
            d.confidence >= self.significance_confidence
            or d.defect_class in self.critical_classes
        )


DEGRADATION_LEVELS = ("normal", "reduced_fps", "defer_noncritical")


@dataclass(frozen=True)
class DegradationState:
    level: str = "normal"
    since: float = 0.0

    def __post_init__(self) -> None:
        if self.level not in DEGRADATION_LEVELS:
            raise ValueError(f"unknown degradation level: {self.level!r}")

    @property
    def rank(self) -> int:
        return DEGRADATION_LEVELS.index(self.level)


#: Hysteresis: de-escalate only after a full window below this fraction of
#: the latency target.
DEESCALATION_FACTOR = 0.8


@dataclass(frozen=True)
class BudgetStatus:
    latency_ok: bool
    memory_ok: bool
    params_ok: bool

    @property
    def all_ok(self) -> bool:
        return self.latency_ok and self.memory_ok and self.params_ok


def budget_check(
    sample: TelemetrySample, cfg: ModelConfig, budgets: BudgetSpec
) -> BudgetStatus:
    """Strict-inequality screen of measured latency/memory and configured
    parameter count against the deployment limits."""
    latency_s = (sample.end_to_end_ms or 0.0) / 1000.0
    return BudgetStatus(
        latency_ok=latency_s < budgets.t_max_s,
        memory_ok=sample.memory_gb < budgets.m_max_gb,
        params_ok=cfg.param_count < budgets.p_max,
    )


def adapt(
    state: DegradationState,
    recent: list[TelemetrySample],
    budgets: BudgetSpec,
    now: Optional[float] = None,
) -> DegradationState:
    """One degradation step from a trailing telemetry window.

    Escalates one level when the window's median end-to-end latency exceeds
    the latency target; de-escalates one level when the median stays under
    0.8x the target (hysteresis). Windows without latency samples leave the
    state unchanged. Never skips levels.
    """
    if not recent:
        raise ValueError("adapt needs a non-empty telemetry window")
    latencies = [s.end_to_end_ms for s in recent if s.end_to_end_ms is not None]
    if not latencies:
        return state
    median_s = statistics.median(latencies) / 1000.0
    now = recent[-1].timestamp if now is None else now
    if median_s > budgets.latency_target_s and state.rank < len(DEGRADATION_LEVELS) - 1:
        return DegradationState(level=DEGRADATION_LEVELS[state.rank + 1], since=now)
    if median_s < DEESCALATION_FACTOR * budgets.latency_target_s and state.rank > 0:
        return DegradationState(level=DEGRADATION_LEVELS[state.rank - 1], since=now)
    return state


def process_memory_gb() -> float:
    """Process peak RSS in GB; a desk-scale proxy for accelerator memory."""
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / (1024.0 * 1024.0)


class TemplateSummarizer:
    """Template-engine summarizer with an optional fixed delay emulating
    model inference cost."""

    def __init__(self, delay_s: float = 0.0):
        self.delay_s = delay_s

    def __call__(self, record: DeficiencyRecord) -> StructuredSummary:
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        return template_summarize(record, context_for_record(record))


@dataclass
class PipelineResult:
    report: InspectionReport
    telemetry: list[TelemetrySample]


@dataclass
class _SummaryTask:
    record_id: int
    snapshot: DeficiencyRecord
    detect_ms: float
    trigger_time: float
    reason: str  # significant | segment | flush


_STOP = object()


class Pipeline:
    """Wires the four concurrent stages together for one run."""

    def __init__(
        self,
        *,
        detector_profile: DetectorProfile,
        summarizer: Callable[[DeficiencyRecord], StructuredSummary],
        dedup_policy: Optional[DedupPolicy] = None,
        trigger_policy: Optional[TriggerPolicy] = None,
        budgets: Optional[BudgetSpec] = None,
        bus: Optional[MessageBus] = None,
        run_id: str = "run",
        segment: Optional[SegmentDescriptor] = None,
        realtime: bool = False,
        telemetry_interval_s: float = 1.0,
        degradation_window_s: float = 10.0,
        detect_queue_size: int = 64,
    ):
        self.profile = detector_profile
        self.summarizer = summarizer
        self.trigger = trigger_policy or TriggerPolicy()
        self.budgets = budgets or BudgetSpec()
        self.bus = bus or MessageBus()
        self.run_id = run_id
        self.segment = segment or SegmentDescriptor(pipe_length_m=0.0)
        self.realtime = realtime
        self.telemetry_interval_s = telemetry_interval_s
        self.degradation_window_s = degradation_window_s

        self.log = DeficiencyLog(dedup_policy)
        self.state = DegradationState(since=time.monotonic())
        self.telemetry: list[TelemetrySample] = []

        self._detect_q: queue.Queue = queue.Queue(maxsize=detect_queue_size)
        self._summ_q: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._summaries: dict[int, StructuredSummary] = {}
        self._queued_ids: set[int] = set()
        self._deferred_ids: set[int] = set()
        self._dropped = 0
        self._frames_done: list[float] = []  # completion timestamps for fps
        self._summaries_done: list[float] = []
        self._summ_busy_s = 0.0
        self._last_detect_ms = 0.0
        self._next_boundary = self.trigger.segment_length_m
        self._segment_events = 0
        self._failure: Optional[StageFailure] = None
        self._stop_telemetry = threading.Event()

    # --- telemetry helpers ---------------------------------------------------

    def _emit(self, sample: TelemetrySample) -> None:
        with self._lock:
            self.telemetry.append(sample)
        self.bus.publish("telemetry", sample.to_dict())

    def _trailing_rate(self, stamps: list[float], window_s: float = 5.0) -> float:
        now = time.monotonic()
        with self._lock:
            n = sum(1 for t in stamps if now - t <= window_s)
        return n / window_s

    def _periodic_sample(self, event: Optional[str] = None) -> TelemetrySample:
        return TelemetrySample(
            timestamp=time.monotonic(),
            memory_gb=process_memory_gb(),
            queue_depths={
                "detect": self._detect_q.qsize(),
                "summarize": self._summ_q.qsize(),
            },
            summaries_per_sec=self._trailing_rate(self._summaries_done),
            fps=self._trailing_rate(self._frames_done),
            dropped_frames=self._dropped,
            event=event,
        )

    # --- stages --------------------------------------------------------------

    def _ingest(self, source: Iterable[tuple[Frame, list[Detection]]]) -> None:
        try:
            skip = False
            for frame, truth in source:
                if self.state.rank >= 1:  # reduced_fps: halve ingest
                    skip = not skip
                    if skip:
                        with self._lock:
                            self._dropped += 1
                        continue
                self.bus.publish("frames", frame.to_dict())
                if self.realtime:
                    try:
                        self._detect_q.put_nowait((frame, truth))
                    except queue.Full:
                        # Drop oldest, keep the newest frame.
                        try:
                            self._detect_q.get_nowait()
                        except queue.Empty:
                            pass
                        with self._lock:
                            self._dropped += 1
                        self._detect_q.put((frame, truth))
                else:
                    self._detect_q.put((frame, truth))
        except Exception as exc:  # noqa: BLE001
            self._failure = StageFailure("ingest", exc)
        finally:
            self._detect_q.put(_STOP)

    def _detect_and_consolidate(self) -> None:
        # Detection and single-writer consolidation share a thread: the log
        # has exactly one writer and detections arrive already ordered.
        try:
            while True:
                item = self._detect_q.get()
                if item is _STOP:
                    break
                frame, truth = item
                t0 = time.monotonic()
                detections = detect(frame, truth, self.profile)
                detect_ms = (time.monotonic() - t0) * 1000.0
                with self._lock:
                    self._frames_done.append(time.monotonic())
                    self._last_detect_ms = detect_ms
                for d in detections:
                    self.bus.publish("detections", d.to_dict())
                    rec = self.log.add(d)
                    if self.trigger.is_significant(d):
                        self._enqueue_summary(rec.record_id, detect_ms, "significant")
                # Segment-completion triggers.
                while frame.pose.chainage >= self._next_boundary:
                    self._on_segment_complete(self._next_boundary, detect_ms)
                    self._next_boundary += self.trigger.segment_length_m
        except Exception as exc:  # noqa: BLE001
            self._failure = StageFailure("detect", exc)
        finally:
            self._flush_remaining()
            self._summ_q.put(_STOP)

    def _record_snapshot(self, record_id: int) -> Optional[DeficiencyRecord]:
        for rec in self.log.records():
            if rec.record_id == record_id:
                return rec
        return None

    def _enqueue_summary(self, record_id: int, detect_ms: float, reason: str) -> None:
        with self._lock:
            if record_id in self._queued_ids:
                return
            if reason == "segment" and self.state.level == "defer_noncritical":
                snapshot = self._record_snapshot(record_id)
                significant = snapshot is not None and self.trigger.is_significant(
                    snapshot.representative
                )
                if not significant:
                    self._deferred_ids.add(record_id)
                    return
            self._queued_ids.add(record_id)
            self._deferred_ids.discard(record_id)
        snapshot = self._record_snapshot(record_id)
        if snapshot is None:
            return
        self._summ_q.put(
            _SummaryTask(
                record_id=record_id,
                snapshot=snapshot,
                detect_ms=detect_ms,
                trigger_time=time.monotonic(),
                reason=reason,
            )
        )

    def _on_segment_complete(self, boundary: float, detect_ms: float) -> None:
        self._segment_events += 1
        self._emit(self._periodic_sample(event=f"segment_completed:{boundary:g}"))
        for rec in self.log.records():
            if rec.first_pose.chainage <= boundary and rec.record_id not in self._queued_ids:
                self._enqueue_summary(rec.record_id, detect_ms, "segment")

    def _flush_remaining(self) -> None:
        # Stream end: everything unsummarized (including deferred) fires now.
        with self._lock:
            detect_ms = self._last_detect_ms
            self._deferred_ids.clear()
        for rec in self.log.records():
            self._enqueue_summary(rec.record_id, detect_ms, "flush")

    def _summarize_loop(self) -> None:
        try:
            while True:
                task = self._summ_q.get()
                if task is _STOP:
                    break
                t0 = time.monotonic()
                summary = self.summarizer(task.snapshot)
                t1 = time.monotonic()
                summarize_ms = (t1 - t0) * 1000.0
                end_to_end_ms = task.detect_ms + (t1 - task.trigger_time) * 1000.0
                with self._lock:
                    self._summaries[task.record_id] = summary
                    self._summaries_done.append(t1)
                    self._summ_busy_s += t1 - t0
                self.bus.publish(
                    "summaries",
                    {"record_id": task.record_id, "summary": summary.to_dict()},
                )
                self._emit(
                    TelemetrySample(
                        timestamp=t1,
                        detect_ms=task.detect_ms,
                        summarize_ms=summarize_ms,
                        end_to_end_ms=end_to_end_ms,
                        memory_gb=process_memory_gb(),
                        queue_depths={
                            "detect": self._detect_q.qsize(),
                            "summarize": self._summ_q.qsize(),
                        },
                        summaries_per_sec=self._trailing_rate(self._summaries_done),
                        fps=self._trailing_rate(self._frames_done),
                        dropped_frames=self._dropped,
                        event=f"summary:{task.reason}",
                    )
                )
        except Exception as exc:  # noqa: BLE001
            self._failure = StageFailure("summarize", exc)

    def _telemetry_loop(self) -> None:
        last_adapt = time.monotonic()
        while not self._stop_telemetry.wait(self.telemetry_interval_s):
            self._emit(self._periodic_sample())
            now = time.monotonic()
            if now - last_adapt >= self.degradation_window_s:
                self._run_adapt(now)
                last_adapt = now

    def _run_adapt(self, now: float) -> None:
        with self._lock:
            window = [s for s in self.telemetry if now - s.timestamp <= self.degradation_window_s]
        if not window:
            return
        new_state = adapt(self.state, window, self.budgets, now=now)
        if new_state.level != self.state.level:
            old = self.state.level
            self.state = new_state
            self._emit(
                self._periodic_sample(event=f"degradation:{old}->{new_state.level}")
            )

    # --- driver --------------------------------------------------------------

    def run(self, source: Iterable[tuple[Frame, list[Detection]]]) -> PipelineResult:
        start = time.monotonic()
        workers = [
            threading.Thread(target=self._detect_and_consolidate, name="detect"),
            threading.Thread(target=self._summarize_loop, name="summarize"),
        ]
        telem = threading.Thread(target=self._telemetry_loop, name="telemetry", daemon=True)
        for t in workers:
            t.start()
        telem.start()
        try:
            self._ingest(source)
            for t in workers:
                t.join()
        finally:
            self._stop_telemetry.set()
            telem.join(timeout=2.0)
        if self._failure is not None:
            raise self._failure
        return PipelineResult(report=self._compile_report(start), telemetry=list(self.telemetry))

    def _compile_report(self, start: float) -> InspectionReport:
        records = self.log.records()
        entries = tuple((rec, self._summaries.get(rec.record_id)) for rec in records)
        latencies = [s.end_to_end_ms for s in self.telemetry if s.end_to_end_ms is not None]
        digest: dict[str, Any] = {
            "run_id": self.run_id,
            "wall_time_s": time.monotonic() - start,
            "frames_processed": len(self._frames_done),
            "detections_ingested": self.log.total_detections,
            "records": len(records),
            "summaries": len(self._summaries),
            "segment_events": self._segment_events,
            "dropped_frames": self._dropped,
            "median_end_to_end_ms": statistics.median(latencies) if latencies else None,
            "summarizer_busy_s": self._summ_busy_s,
            "saturated_summaries_per_sec": (
                len(self._summaries) / self._summ_busy_s if self._summ_busy_s > 0 else None
            ),
        }
        self.bus.publish("deficiency-log", [rec.to_dict() for rec in records])
        return InspectionReport(
            run_id=self.run_id,
            segment=self.segment,
            entries=entries,
            telemetry_digest=digest,
        )


def run_pipeline(
    source: Iterable[tuple[Frame, list[Detection]]],
    *,
    detector_profile: DetectorProfile,
    summarizer: Callable[[DeficiencyRecord], StructuredSummary],
    dedup_policy: Optional[DedupPolicy] = None,
    trigger_policy: Optional[TriggerPolicy] = None,
    budgets: Optional[BudgetSpec] = None,
    bus: Optional[MessageBus] = None,
    run_id: str = "run",
    segment: Optional[SegmentDescriptor] = None,
    realtime: bool = False,
) -> PipelineResult:
    """Run the two-stage pipeline over a frame stream and compile the
    inspection report plus the telemetry log."""
    pipeline = Pipeline(
        detector_profile=detector_profile,
        summarizer=summarizer,
        dedup_policy=dedup_policy,
        trigger_policy=trigger_policy,
        budgets=budgets,
        bus=bus,
        run_id=run_id,
        segment=segment,
        realtime=realtime,
    )
    return pipeline.run(source)
