"""Operator-facing HTTP + streaming gateway: live topic streaming,
deficiency queries and report export.

The gateway is a pure view over the message bus and the run state: the only
mutation it performs is appending to its query log. Two clients observing
the same run see identical per-topic event sequences.
"""

from __future__ import annotations

import asyncio
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .bus import MessageBus, Subscription
from .core import (
    DeficiencyRecord,
    InspectionReport,
    SegmentDescriptor,
    StructuredSummary,
)

API_VERSION = 1

#: Topics multiplexed over the event stream.
STREAM_TOPICS = ("detections", "summaries", "telemetry")

_SEVERITY_ORDER = {"low": 0, "medium": 1, "high": 2}


class BusUnavailable(RuntimeError):
    pass


@dataclass
class SessionState:
    """Gateway-side view of one run."""

    run_id: str = "run"
    status: str = "idle"  # idle | running | finished
    records: dict[int, DeficiencyRecord] = field(default_factory=dict)
    summaries: dict[int, StructuredSummary] = field(default_factory=dict)
    segment: SegmentDescriptor = field(default_factory=lambda: SegmentDescriptor(pipe_length_m=0.0))
    telemetry_digest: dict[str, Any] = field(default_factory=dict)
    query_log: list[dict] = field(default_factory=list)


class GatewaySession:
    """Holds the bus handle and the materialized run view."""

    def __init__(self, bus: Optional[MessageBus], run_id: str = "run"):
        if bus is None:
            raise BusUnavailable("gateway requires a message bus")
        self.bus = bus
        self.state = SessionState(run_id=run_id)
        self._lock = threading.Lock()

    def attach_report(self, report: InspectionReport) -> None:
        """Load a finished run."""
        with self._lock:
            self.state.run_id = report.run_id
            self.state.status = "finished"
            self.state.segment = report.segment
            self.state.telemetry_digest = dict(report.telemetry_digest)
            self.state.records = {rec.record_id: rec for rec, _ in report.entries}
            self.state.summaries = {
                rec.record_id: summ for rec, summ in report.entries if summ is not None
            }

    def attach_live(self, records: list[DeficiencyRecord], summaries: dict[int, StructuredSummary]) -> None:
        """Update the live snapshot mid-run."""
        with self._lock:
            self.state.status = "running"
            self.state.records = {rec.record_id: rec for rec in records}
            self.state.summaries = dict(summaries)

    def compile_report(self) -> InspectionReport:
        """Ordered report; snapshot mode leaves unsummarized records pending."""
        with self._lock:
            records = sorted(
                self.state.records.values(), key=lambda r: (r.first_pose.chainage, r.record_id)
            )
            entries = tuple(
                (rec, self.state.summaries.get(rec.record_id)) for rec in records
            )
            return InspectionReport(
                run_id=self.state.run_id,
                segment=self.state.segment,
                entries=entries,
                telemetry_digest=dict(self.state.telemetry_digest),
            )

    # --- queries -------------------------------------------------------------

    def query(self, request: dict) -> dict:
        """Answer a structured or freeform query over the deficiency log.

        Freeform answers use deterministic retrieval: the highest-severity
        record in the target range (ties by confidence, then chainage).
        """
        mode = request.get("mode", "structured")
        if mode not in ("structured", "freeform"):
            raise ValueError(f"unknown query mode: {mode!r}")
        with self._lock:
            targets = self._resolve_targets(request)
            answer: dict[str, Any]
            if not targets:
                answer = {"record_id": None, "answer": None, "message": "no records in range"}
            elif mode == "structured":
                rec = targets[0]
                summ = self.state.summaries.get(rec.record_id)
                answer = {
                    "record_id": rec.record_id,
                    "answer": summ.to_dict() if summ else None,
                    "message": None if summ else "summary pending",
                }
            else:
                rec = self._rank_freeform(targets)
                summ = self.state.summaries.get(rec.record_id)
                answer = {
                    "record_id": rec.record_id,
                    "answer": summ.to_dict() if summ else None,
                    "message": f"highest-severity record in range: {rec.defect_class.value}",
                }
            self.state.query_log.append({"request": request, "record_id": answer["record_id"]})
        return answer

    def _resolve_targets(self, request: dict) -> list[DeficiencyRecord]:
        if "record_id" in request and request["record_id"] is not None:
            rec = self.state.records.get(int(request["record_id"]))
            return [rec] if rec else []
        if "segment" in request and request["segment"] is not None:
            a, b = (float(v) for v in request["segment"])
            return sorted(
                (
                    r
                    for r in self.state.records.values()
                    if a <= r.first_pose.chainage <= b
                ),
                key=lambda r: r.first_pose.chainage,
            )
        return sorted(self.state.records.values(), key=lambda r: r.first_pose.chainage)

    def _rank_freeform(self, targets: list[DeficiencyRecord]) -> DeficiencyRecord:
        def key(rec: DeficiencyRecord):
            summ = self.state.summaries.get(rec.record_id)
            level = summ.severity_level if summ else "medium"
            return (
                _SEVERITY_ORDER[level],
                rec.representative.confidence,
                -rec.first_pose.chainage,
            )

        return max(targets, key=key)


def create_app(session: GatewaySession) -> FastAPI:
    """Build the gateway application over one session."""
    app = FastAPI(title="culvertd gateway")
    app.state.session = session

    @app.get("/api/run")
    def run_status() -> dict:
        st = session.state
        return {
            "api_version": API_VERSION,
            "run_id": st.run_id,
            "status": st.status,
            "records": len(st.records),
            "summaries": len(st.summaries),
            "telemetry_digest": st.telemetry_digest,
        }

    @app.get("/api/deficiencies")
    def deficiencies() -> dict:
        report = session.compile_report()
        return {
            "api_version": API_VERSION,
            "records": [rec.to_dict() for rec in report.records],
        }

    @app.get("/api/report")
    def report() -> dict:
        doc = session.compile_report().to_dict()
        doc["api_version"] = API_VERSION
        return doc

    @app.post("/api/query")
    def query(request: dict) -> JSONResponse:
        try:
            answer = session.query(request)
        except (ValueError, KeyError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        answer["api_version"] = API_VERSION
        return JSONResponse(answer)

    @app.websocket("/ws")
    async def stream(ws: WebSocket) -> None:
        await ws.accept()
        subs: list[Subscription] = [
            session.bus.subscribe(topic, replay=True) for topic in STREAM_TOPICS
        ]
        try:
            while True:
                sent = False
                for sub in subs:
                    for message in sub.drain():
                        await ws.send_text(
                            json.dumps({"topic": sub.topic, "data": message})
                        )
                        sent = True
                if not sent:
                    # Yield so client messages (including close) get handled.
                    try:
                        await asyncio.wait_for(ws.receive_text(), timeout=0.05)
                    except asyncio.TimeoutError:
                        pass
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            for sub in subs:
                session.bus.unsubscribe(sub)

    return app


def serve(
    session: GatewaySession, host: str = "127.0.0.1", port: int = 8750
) -> None:
    """Run the gateway with uvicorn (blocking)."""
    import uvicorn

    try:
        uvicorn.run(create_app(session), host=host, port=port, log_level="warning")
    except OSError as exc:
        raise RuntimeError(f"gateway bind failure on {host}:{port}: {exc}") from exc
