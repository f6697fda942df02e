/**
 * Gateway client: owns the WebSocket subscription, REST resync, reconnect
 * backoff, and the single fold loop that advances the view model. All state
 * transitions happen sequentially on one logical thread of control; the
 * transports are injectable so tests can drive the client deterministically.
 */
import {
  DeficiencyListSchema,
  QueryAnswerSchema,
  QueryErrorSchema,
  ReportSchema,
  RunStatusSchema,
  parseStreamEvent,
  type QueryAnswer,
  type QueryRequest,
  type Summary,
} from "./types.js";
import {
  applyEvent,
  applyQueryResult,
  applySnapshot,
  initialViewModel,
  setConnection,
  setPipeLength,
  type ViewModel,
} from "./viewmodel.js";

/** The subset of the WebSocket interface the client needs; matched by both
 * the browser WebSocket and the test fake. */
export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: (() => void) | null;
  close(): void;
}

export interface FetchResponseLike {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<FetchResponseLike>;

export interface GatewayClientOptions {
  /** e.g. "http://host:8750"; the stream URL is derived from it. */
  baseUrl: string;
  openSocket: (url: string) => SocketLike;
  fetch: FetchLike;
  /** First reconnect delay; doubles per attempt up to maxBackoffMs. */
  backoffMs?: number;
  maxBackoffMs?: number;
  schedule?: (fn: () => void, delayMs: number) => unknown;
}

export type Listener = (vm: ViewModel) => void;

export class QueryRejected extends Error {}

export class GatewayClient {
  private vm: ViewModel = initialViewModel();
  private readonly listeners = new Set<Listener>();
  private socket: SocketLike | null = null;
  private attempt = 0;
  private closed = false;
  private readonly backoffMs: number;
  private readonly maxBackoffMs: number;
  private readonly schedule: (fn: () => void, delayMs: number) => unknown;

  constructor(private readonly opts: GatewayClientOptions) {
    this.backoffMs = opts.backoffMs ?? 500;
    this.maxBackoffMs = opts.maxBackoffMs ?? 10_000;
    this.schedule = opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
  }

  get viewModel(): ViewModel {
    return this.vm;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  private advance(vm: ViewModel): void {
    this.vm = vm;
    for (const listener of this.listeners) listener(vm);
  }

  private streamUrl(): string {
    return this.opts.baseUrl.replace(/^http/, "ws") + "/ws";
  }

  /** Open the stream. Resolves once the first connection attempt has been
   * made; reconnection afterwards is automatic. */
  connect(): void {
    this.closed = false;
    this.openOnce();
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
    this.socket = null;
    this.advance(setConnection(this.vm, "disconnected"));
  }

  private openOnce(): void {
    const socket = this.opts.openSocket(this.streamUrl());
    this.socket = socket;
    socket.onopen = () => {
      this.attempt = 0;
      this.advance(setConnection(this.vm, "live"));
      // Resync after (re)connect so anything missed while offline is
      // recovered from the REST snapshot; retained-stream replay covers
      // recent events and the fold tolerates seeing both.
      void this.resync();
    };
    socket.onmessage = (event) => {
      this.advance(applyEvent(this.vm, parseStreamEvent(event.data)));
    };
    socket.onclose = () => {
      if (this.socket !== socket) return;
      this.socket = null;
      this.advance(setConnection(this.vm, "disconnected"));
      if (!this.closed) this.scheduleReconnect();
    };
  }

  private scheduleReconnect(): void {
    const delay = Math.min(this.backoffMs * 2 ** this.attempt, this.maxBackoffMs);
    this.attempt += 1;
    this.schedule(() => {
      if (!this.closed) this.openOnce();
    }, delay);
  }

  /** Pull the run status and full report and merge them into the model. */
  async resync(): Promise<void> {
    const runResp = await this.opts.fetch(this.opts.baseUrl + "/api/run");
    const run = RunStatusSchema.parse(await runResp.json());
    const listResp = await this.opts.fetch(this.opts.baseUrl + "/api/deficiencies");
    const list = DeficiencyListSchema.parse(await listResp.json());
    const reportResp = await this.opts.fetch(this.opts.baseUrl + "/api/report");
    const report = ReportSchema.parse(await reportResp.json());
    const summaries = new Map<number, Summary | null>(
      report.entries.map((entry) => [entry.record.record_id, entry.summary]),
    );
    let vm = applySnapshot(this.vm, run, list.records, summaries);
    const length = report.segment["pipe_length_m"];
    if (typeof length === "number") vm = setPipeLength(vm, length);
    this.advance(vm);
  }

  /**
   * Submit a query-panel request. Both outcomes land in the model's query
   * history: answers as entries (selecting the answering record), gateway
   * rejections as inline errors. Rejections also raise QueryRejected so the
   * panel can flag the input field.
   */
  async query(request: QueryRequest): Promise<QueryAnswer> {
    const resp = await this.opts.fetch(this.opts.baseUrl + "/api/query", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    const body = await resp.json();
    if (!resp.ok) {
      const error = QueryErrorSchema.safeParse(body);
      const message = error.success ? error.data.error : `query failed (${resp.status})`;
      this.advance(applyQueryResult(this.vm, request, null, message));
      throw new QueryRejected(message);
    }
    const answer = QueryAnswerSchema.parse(body);
    this.advance(applyQueryResult(this.vm, request, answer, null));
    return answer;
  }
}
