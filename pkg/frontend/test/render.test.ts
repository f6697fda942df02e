import { describe, expect, it } from "vitest";
import {
  renderBanner,
  renderConsole,
  renderDeficiencyTable,
  renderStripMap,
  renderSummary,
  renderTelemetry,
} from "../src/render.js";
import { ReportSchema } from "../src/types.js";
import {
  applyEvent,
  initialViewModel,
  selectRecord,
  setConnection,
  setPipeLength,
  type ViewModel,
} from "../src/viewmodel.js";
import { loadFixture } from "./mock-gateway.js";

const fixture = loadFixture();
const summary = ReportSchema.parse(fixture.report).entries[0]!.summary!;

function foldedModel(): ViewModel {
  let vm = fixture.events.reduce(applyEvent, initialViewModel());
  vm = setPipeLength(vm, 6.0);
  return vm;
}

describe("summary rendering", () => {
  it("renders the four fields on distinct labelled lines", () => {
    const lines = renderSummary(summary).split("\n");
    expect(lines).toHaveLength(4);
    expect(lines[0]).toMatch(/^Condition: /);
    expect(lines[1]).toMatch(/^Location: /);
    expect(lines[2]).toMatch(/^Severity: /);
    expect(lines[3]).toMatch(/^Implications: /);
    expect(lines[0]).toContain(summary.condition);
    expect(lines[3]).toContain(summary.implications);
  });
});

describe("deficiency table", () => {
  it("marks the selected row and shows summarization state", () => {
    const vm = selectRecord(foldedModel(), 0);
    const table = renderDeficiencyTable(vm);
    expect(table).toContain("> #0");
    expect(table).toContain("summarized");
  });

  it("shows a placeholder when nothing has been seen", () => {
    expect(renderDeficiencyTable(initialViewModel())).toContain("no deficiencies");
  });
});

describe("strip map", () => {
  it("plots each record at its proportional chainage position", () => {
    let vm = initialViewModel();
    vm = applyEvent(vm, { topic: "summaries", data: { record_id: 3, summary } });
    vm = {
      ...vm,
      pipeLengthM: 10.0,
      rows: new Map([[3, { ...vm.rows.get(3)!, defectClass: "Holes", chainageM: 5.0 }]]),
    };
    const strip = renderStripMap(vm, 10);
    const axis = strip.split("|")[1]!;
    expect(axis.indexOf("h")).toBe(5);
  });

  it("highlights the selected record with a bracketed uppercase marker", () => {
    const vm = selectRecord(foldedModel(), 0);
    // Chainage unknown until a snapshot; fill it for the render.
    vm.rows.set(0, { ...vm.rows.get(0)!, defectClass: "Cracks", chainageM: 0.25 });
    expect(renderStripMap(vm)).toContain("[C]");
  });

  it("degrades gracefully when the pipe length is unknown", () => {
    expect(renderStripMap(initialViewModel())).toContain("unknown");
  });
});

describe("banner and telemetry", () => {
  it("states the connection condition plainly", () => {
    expect(renderBanner(setConnection(initialViewModel(), "disconnected"))).toContain(
      "DISCONNECTED",
    );
    expect(renderBanner(setConnection(initialViewModel(), "live"))).toContain("LIVE");
  });

  it("reports the latest sample of each series", () => {
    const vm = foldedModel();
    const text = renderTelemetry(vm);
    expect(text).toContain("latency");
    expect(text).toContain("fps");
    expect(text).toContain(`points ${vm.telemetry.latencyMs.length}`);
  });

  it("renders the whole console without throwing on a cold model", () => {
    expect(renderConsole(initialViewModel())).toContain("CONNECTING");
  });
});
