"""Regenerate one-defect.json by running a real one-defect mission through
the installed `culvertd` package and recording the gateway's REST responses
and retained WebSocket stream.

Usage: python3 regenerate.py
"""
from __future__ import annotations

import itertools
import json
from pathlib import Path

from fastapi.testclient import TestClient

from culvertd.bus import MessageBus
from culvertd.core import SegmentDescriptor
from culvertd.detection import DetectorProfile
from culvertd.gateway import STREAM_TOPICS, GatewaySession, create_app
from culvertd.orchestrator import TemplateSummarizer, run_pipeline
from culvertd.simulator import generate_scenario, replay

OUT = Path(__file__).with_name("one-defect.json")


def main() -> None:
    for seed in itertools.count():
        scenario = generate_scenario(seed, 6.0, 2.0)
        if len(scenario.planted) == 1:
            break

    bus = MessageBus()
    result = run_pipeline(
        replay(scenario),
        detector_profile=DetectorProfile(),
        summarizer=TemplateSummarizer(),
        bus=bus,
        run_id="one-defect",
        segment=SegmentDescriptor(pipe_length_m=scenario.pipe_length_m),
    )
    session = GatewaySession(bus, run_id="one-defect")
    session.attach_report(result.report)
    client = TestClient(create_app(session))

    n_retained = sum(len(bus.retained(t)) for t in STREAM_TOPICS)
    events = []
    with client.websocket_connect("/ws") as ws:
        for _ in range(n_retained):
            events.append(json.loads(ws.receive_text()))

    record_id = result.report.records[0].record_id
    fixture = {
        "run": client.get("/api/run").json(),
        "report": client.get("/api/report").json(),
        "deficiencies": client.get("/api/deficiencies").json(),
        "events": events,
        "query_structured": client.post(
            "/api/query", json={"mode": "structured", "record_id": record_id}
        ).json(),
        "query_freeform": client.post("/api/query", json={"mode": "freeform"}).json(),
        "query_segment": client.post(
            "/api/query",
            json={"mode": "structured", "segment": [0.0, scenario.pipe_length_m]},
        ).json(),
        "query_bad": client.post("/api/query", json={"mode": "telepathy"}).json(),
    }
    OUT.write_text(json.dumps(fixture, indent=2))
    print(f"wrote {OUT} ({len(events)} events, seed {seed})")


if __name__ == "__main__":
    main()
