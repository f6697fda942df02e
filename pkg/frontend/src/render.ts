/**
 * Pure text renderers for the console: every function maps a view model (or
 * a piece of one) to a string, with no I/O and no hidden state, so rendering
 * the same model always produces the same screen.
 */
import type { QueryAnswer, Summary } from "./types.js";
import { orderedRows, type DeficiencyRow, type ViewModel } from "./viewmodel.js";

/** The four summary fields, each on its own labelled line. */
export function renderSummary(summary: Summary): string {
  return [
    `Condition:    ${summary.condition}`,
    `Location:     ${summary.location}`,
    `Severity:     ${summary.severity}`,
    `Implications: ${summary.implications}`,
  ].join("\n");
}

export function renderBanner(vm: ViewModel): string {
  switch (vm.connection) {
    case "live":
      return `LIVE — run ${vm.runId ?? "?"} (${vm.runStatus ?? "unknown"})`;
    case "connecting":
      return "CONNECTING…";
    case "disconnected":
      return "DISCONNECTED — retrying; showing last known state";
  }
}

function rowLine(row: DeficiencyRow, selected: boolean): string {
  const marker = selected ? ">" : " ";
  const chainage = row.chainageM == null ? "     ?" : row.chainageM.toFixed(2).padStart(6);
  const cls = (row.defectClass ?? "?").padEnd(14);
  const conf = row.confidence == null ? "  ?" : row.confidence.toFixed(2);
  const state = row.pending ? "pending" : "summarized";
  return `${marker} #${row.recordId} ${chainage} m  ${cls} conf ${conf}  ${state}`;
}

export function renderDeficiencyTable(vm: ViewModel): string {
  const rows = orderedRows(vm);
  if (rows.length === 0) return "(no deficiencies yet)";
  return rows.map((row) => rowLine(row, row.recordId === vm.selectedRecordId)).join("\n");
}

/**
 * One-line strip map of the pipe: a chainage axis with each deficiency
 * plotted at its position, marked by the first letter of its class. The
 * selected record renders as a bracketed uppercase marker.
 */
export function renderStripMap(vm: ViewModel, width = 60): string {
  const length = vm.pipeLengthM;
  if (length == null || length <= 0) return "(pipe length unknown)";
  const cells: string[] = Array(width).fill("-");
  for (const row of orderedRows(vm)) {
    if (row.chainageM == null) continue;
    const idx = Math.min(width - 1, Math.max(0, Math.floor((row.chainageM / length) * width)));
    const letter = (row.defectClass ?? "x").charAt(0);
    cells[idx] = row.recordId === vm.selectedRecordId ? `[${letter.toUpperCase()}]` : letter.toLowerCase();
  }
  return `0m |${cells.join("")}| ${length.toFixed(1)}m`;
}

export function renderTelemetry(vm: ViewModel): string {
  const last = <T>(xs: T[]): T | undefined => xs[xs.length - 1];
  const latency = last(vm.telemetry.latencyMs);
  const fps = last(vm.telemetry.fps);
  const rate = last(vm.telemetry.summariesPerSec);
  return [
    `latency ${latency ? latency.value.toFixed(0) + " ms" : "—"}`,
    `fps ${fps ? fps.value.toFixed(1) : "—"}`,
    `summaries/s ${rate ? rate.value.toFixed(2) : "—"}`,
    `points ${vm.telemetry.latencyMs.length}`,
  ].join("  |  ");
}

/** Render one query-history entry: the answer's four fields, a plain
 * message, or the inline error for a rejected request. */
export function renderQueryResult(answer: QueryAnswer | null, error: string | null): string {
  if (error != null) return `ERROR: ${error}`;
  if (answer == null) return "(no response)";
  if (answer.answer != null) return renderSummary(answer.answer);
  return answer.message ?? "(no matching record)";
}

export function renderConsole(vm: ViewModel): string {
  return [
    renderBanner(vm),
    renderStripMap(vm),
    renderDeficiencyTable(vm),
    renderTelemetry(vm),
  ].join("\n");
}
