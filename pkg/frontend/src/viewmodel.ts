/**
 * The console's entire display state as a single immutable value, updated
 * only by pure functions: `applyEvent` folds one stream event in, and
 * `applySnapshot` merges a REST resync. Replaying a recorded event stream
 * therefore reproduces exactly the state a live session ended in.
 */
import type {
  DeficiencyRecord,
  Detection,
  QueryAnswer,
  QueryRequest,
  RunStatus,
  StreamEvent,
  Summary,
  TelemetrySample,
} from "./types.js";

export type ConnectionState = "connecting" | "live" | "disconnected";

/** One row of the deficiency table. Rows appear from summary events or
 * resync snapshots and are never removed once acknowledged. */
export interface DeficiencyRow {
  recordId: number;
  /** Defect class name; unknown until a snapshot supplies the record. */
  defectClass: string | null;
  /** Chainage of the first sighting in metres; null until known. */
  chainageM: number | null;
  confidence: number | null;
  memberCount: number | null;
  summary: Summary | null;
  pending: boolean;
}

export interface TelemetryPoint {
  timestamp: number;
  value: number;
}

export interface TelemetrySeries {
  latencyMs: TelemetryPoint[];
  fps: TelemetryPoint[];
  summariesPerSec: TelemetryPoint[];
}

export interface QueryHistoryEntry {
  request: QueryRequest;
  answer: QueryAnswer | null;
  /** Inline error text when the gateway rejected the request. */
  error: string | null;
}

export interface ViewModel {
  connection: ConnectionState;
  runId: string | null;
  runStatus: "pending" | "running" | "finished" | null;
  pipeLengthM: number | null;
  /** Keyed by record_id; iteration order is insertion order. */
  rows: Map<number, DeficiencyRow>;
  /** Rolling window of the most recent raw detections. */
  recentDetections: Detection[];
  detectionCount: number;
  telemetry: TelemetrySeries;
  selectedRecordId: number | null;
  queryHistory: QueryHistoryEntry[];
}

const RECENT_DETECTIONS_LIMIT = 50;

export function initialViewModel(): ViewModel {
  return {
    connection: "connecting",
    runId: null,
    runStatus: null,
    pipeLengthM: null,
    rows: new Map(),
    recentDetections: [],
    detectionCount: 0,
    telemetry: { latencyMs: [], fps: [], summariesPerSec: [] },
    selectedRecordId: null,
    queryHistory: [],
  };
}

function cloned(vm: ViewModel): ViewModel {
  return {
    ...vm,
    rows: new Map(vm.rows),
    recentDetections: [...vm.recentDetections],
    telemetry: {
      latencyMs: [...vm.telemetry.latencyMs],
      fps: [...vm.telemetry.fps],
      summariesPerSec: [...vm.telemetry.summariesPerSec],
    },
    queryHistory: [...vm.queryHistory],
  };
}

function emptyRow(recordId: number): DeficiencyRow {
  return {
    recordId,
    defectClass: null,
    chainageM: null,
    confidence: null,
    memberCount: null,
    summary: null,
    pending: true,
  };
}

/** Fold one stream event into the view model. Pure: the input model is not
 * mutated and the same (model, event) pair always yields the same result. */
export function applyEvent(vm: ViewModel, event: StreamEvent): ViewModel {
  const next = cloned(vm);
  switch (event.topic) {
    case "detections": {
      next.detectionCount += 1;
      next.recentDetections.push(event.data);
      if (next.recentDetections.length > RECENT_DETECTIONS_LIMIT) {
        next.recentDetections.shift();
      }
      break;
    }
    case "summaries": {
      const row = next.rows.get(event.data.record_id) ?? emptyRow(event.data.record_id);
      next.rows.set(event.data.record_id, {
        ...row,
        summary: event.data.summary,
        pending: false,
      });
      break;
    }
    case "telemetry": {
      const t = event.data;
      next.telemetry.latencyMs.push({ timestamp: t.timestamp, value: t.end_to_end_ms });
      next.telemetry.fps.push({ timestamp: t.timestamp, value: t.fps });
      next.telemetry.summariesPerSec.push({
        timestamp: t.timestamp,
        value: t.summaries_per_sec,
      });
      break;
    }
  }
  return next;
}

function mergeRecord(next: ViewModel, record: DeficiencyRecord): void {
  const row = next.rows.get(record.record_id) ?? emptyRow(record.record_id);
  next.rows.set(record.record_id, {
    ...row,
    defectClass: record.class,
    chainageM: record.first_pose.chainage,
    confidence: record.representative.confidence,
    memberCount: record.member_count,
  });
}

/**
 * Merge a REST resync into the model: run status plus the consolidated
 * deficiency list, each entry optionally carrying its summary. Rows already
 * acknowledged from the stream keep their summaries; the snapshot only adds
 * information, so applying the same snapshot twice is a no-op.
 */
export function applySnapshot(
  vm: ViewModel,
  run: RunStatus,
  records: DeficiencyRecord[],
  summaries?: Map<number, Summary | null>,
): ViewModel {
  const next = cloned(vm);
  next.runId = run.run_id;
  next.runStatus = run.status;
  for (const record of records) {
    mergeRecord(next, record);
    const summary = summaries?.get(record.record_id);
    if (summary != null) {
      const row = next.rows.get(record.record_id)!;
      next.rows.set(record.record_id, { ...row, summary, pending: false });
    }
  }
  return next;
}

export function setConnection(vm: ViewModel, connection: ConnectionState): ViewModel {
  if (vm.connection === connection) return vm;
  return { ...cloned(vm), connection };
}

export function setPipeLength(vm: ViewModel, pipeLengthM: number): ViewModel {
  return { ...cloned(vm), pipeLengthM };
}

export function selectRecord(vm: ViewModel, recordId: number | null): ViewModel {
  return { ...cloned(vm), selectedRecordId: recordId };
}

/** Record the outcome of a query-panel submission. A successful answer that
 * names a record also selects it, which highlights it on the strip map. */
export function applyQueryResult(
  vm: ViewModel,
  request: QueryRequest,
  answer: QueryAnswer | null,
  error: string | null,
): ViewModel {
  const next = cloned(vm);
  next.queryHistory.push({ request, answer, error });
  if (answer != null && answer.record_id != null) {
    next.selectedRecordId = answer.record_id;
  }
  return next;
}

/** Rows ordered by chainage (unknown chainage sorts last), for rendering. */
export function orderedRows(vm: ViewModel): DeficiencyRow[] {
  return [...vm.rows.values()].sort((a, b) => {
    const ca = a.chainageM ?? Number.POSITIVE_INFINITY;
    const cb = b.chainageM ?? Number.POSITIVE_INFINITY;
    return ca === cb ? a.recordId - b.recordId : ca - cb;
  });
}
