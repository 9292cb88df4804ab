// Wire types for the anonymization service. Field names match the JSON the
// service emits; nothing here is recomputed client-side.

export type Category = "PERSON_WITH_DENSE" | "PERSON_PLAIN" | "FACE_ONLY";

export type Mode = "gan" | "pixelate8" | "pixelate16" | "maskout";

export interface DetectionSummary {
  index: number;
  category: Category;
  bbox: [number, number, number, number];
  coverage: number;
  confidence: number;
}

export interface SessionResponse {
  session_id: string;
  detections: DetectionSummary[];
}

/** One stitch step of the render plan, as reported by the service. */
export interface AuditRow {
  order: number;
  detection_index: number;
  generator: string;
  category: Category;
  coverage: number;
  bbox: [number, number, number, number];
}

export interface EditSpec {
  direction: string;
  strength: number;
}

export interface AnonymizeParams {
  mode: Mode;
  seed: number;
  psi: number;
  edits: EditSpec[];
}

export interface RenderResponse {
  image_b64: string;
  audit: AuditRow[];
  mode: Mode;
  seed: number;
  psi: number;
}

export interface ResampleResponse {
  image_b64: string;
  audit: AuditRow[];
  detection_index: number;
  order: number;
  generator: string;
  seed: number;
}

export interface DirectionsResponse {
  directions: string[];
}

export interface HealthResponse {
  status: string;
  sessions: number;
}
