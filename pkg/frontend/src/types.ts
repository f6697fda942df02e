/**
 * Wire types for the inspection gateway's REST + WebSocket surface,
 * validated with zod at the transport boundary so the rest of the UI can
 * rely on well-formed data.
 */
import { z } from "zod";

export const PoseSchema = z.object({
  chainage: z.number(),
  lateral: z.number(),
  vertical: z.number(),
  heading: z.number(),
  timestamp: z.number(),
});
export type Pose = z.infer<typeof PoseSchema>;

export const RegionSchema = z.object({
  centroid_row: z.number(),
  centroid_col: z.number(),
  bbox: z.tuple([z.number(), z.number(), z.number(), z.number()]),
  area_px: z.number(),
});
export type Region = z.infer<typeof RegionSchema>;

export const DetectionSchema = z.object({
  frame_id: z.number().int(),
  class: z.string(),
  confidence: z.number(),
  region: RegionSchema,
  pose: PoseSchema,
});
export type Detection = z.infer<typeof DetectionSchema>;

/** Four-field structured summary plus the rendered full text. */
export const SummarySchema = z.object({
  condition: z.string(),
  location: z.string(),
  severity: z.string(),
  implications: z.string(),
  full_text: z.string(),
  /** Which engine produced the text (e.g. "template", "remote"). */
  source: z.string().optional(),
});
export type Summary = z.infer<typeof SummarySchema>;

export const DeficiencyRecordSchema = z.object({
  record_id: z.number().int(),
  class: z.string(),
  representative: DetectionSchema,
  member_count: z.number().int(),
  first_pose: PoseSchema,
  last_pose: PoseSchema,
  image_ref: z.string().nullable().optional(),
  mask_ref: z.string().nullable().optional(),
});
export type DeficiencyRecord = z.infer<typeof DeficiencyRecordSchema>;

export const DeficiencyListSchema = z.object({
  records: z.array(DeficiencyRecordSchema),
});

export const TelemetrySampleSchema = z.object({
  timestamp: z.number(),
  detect_ms: z.number(),
  summarize_ms: z.number(),
  end_to_end_ms: z.number(),
  memory_gb: z.number(),
  queue_depths: z.record(z.string(), z.number()),
  summaries_per_sec: z.number(),
  fps: z.number(),
  dropped_frames: z.number(),
  event: z.string().nullable().optional(),
});
export type TelemetrySample = z.infer<typeof TelemetrySampleSchema>;

export const SummaryEventSchema = z.object({
  record_id: z.number().int(),
  summary: SummarySchema,
});
export type SummaryEvent = z.infer<typeof SummaryEventSchema>;

/** Multiplexed stream envelope: one message per event, tagged by topic. */
export const StreamEventSchema = z.discriminatedUnion("topic", [
  z.object({ topic: z.literal("detections"), data: DetectionSchema }),
  z.object({ topic: z.literal("summaries"), data: SummaryEventSchema }),
  z.object({ topic: z.literal("telemetry"), data: TelemetrySampleSchema }),
]);
export type StreamEvent = z.infer<typeof StreamEventSchema>;

export const RunStatusSchema = z.object({
  api_version: z.number().int(),
  run_id: z.string(),
  status: z.enum(["pending", "running", "finished"]),
  records: z.number().int(),
  summaries: z.number().int(),
  telemetry_digest: z.record(z.string(), z.unknown()),
});
export type RunStatus = z.infer<typeof RunStatusSchema>;

export const ReportEntrySchema = z.object({
  record: DeficiencyRecordSchema,
  summary: SummarySchema.nullable(),
  pending: z.boolean(),
});

export const ReportSchema = z.object({
  api_version: z.number().int().optional(),
  run_id: z.string(),
  segment: z.record(z.string(), z.unknown()),
  entries: z.array(ReportEntrySchema),
  telemetry_digest: z.record(z.string(), z.unknown()),
});
export type Report = z.infer<typeof ReportSchema>;

export interface QueryRequest {
  mode?: "structured" | "freeform";
  record_id?: number;
  segment?: [number, number];
}

export const QueryAnswerSchema = z.object({
  record_id: z.number().int().nullable(),
  answer: SummarySchema.nullable(),
  message: z.string().nullable().optional(),
});
export type QueryAnswer = z.infer<typeof QueryAnswerSchema>;

export const QueryErrorSchema = z.object({ error: z.string() });

/** Parse one raw WebSocket frame into a typed stream event. */
export function parseStreamEvent(raw: string): StreamEvent {
  return StreamEventSchema.parse(JSON.parse(raw));
}
