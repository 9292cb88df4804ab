import type { AuditRow, Category, DetectionSummary } from "./types.js";

export const CATEGORY_COLORS: Record<Category, string> = {
  PERSON_WITH_DENSE: "#9ece6a",
  PERSON_PLAIN: "#7aa2f7",
  FACE_ONLY: "#ff9e64",
};

export interface BoxLayer {
  kind: "box";
  index: number;
  category: Category;
  color: string;
  bbox: [number, number, number, number];
  label: string;
  selected: boolean;
}

export interface BannerLayer {
  kind: "banner";
  text: string;
}

export type OverlayLayer = BoxLayer | BannerLayer;

export function auditFor(
  audit: AuditRow[],
  index: number,
): AuditRow | undefined {
  return audit.find((row) => row.detection_index === index);
}

/** Build the overlay layers for a session. Coverage and stitch order are
 * copied verbatim from service fields (detection summary before the first
 * render, audit rows after), never recomputed from pixels. */
export function layoutOverlay(
  detections: DetectionSummary[],
  audit: AuditRow[],
  opts: {
    toggles?: Partial<Record<Category, boolean>>;
    selected?: number | null;
  } = {},
): OverlayLayer[] {
  if (detections.length === 0) {
    return [{ kind: "banner", text: "no individuals detected" }];
  }
  const layers: OverlayLayer[] = [];
  for (const det of detections) {
    if (opts.toggles?.[det.category] === false) continue;
    const row = auditFor(audit, det.index);
    const order = row ? `order ${row.order}` : "order –";
    const coverage = row ? row.coverage : det.coverage;
    layers.push({
      kind: "box",
      index: det.index,
      category: det.category,
      color: CATEGORY_COLORS[det.category],
      bbox: det.bbox,
      label: `#${det.index} ${det.category.toLowerCase()} · ${order} · ${coverage}px`,
      selected: opts.selected === det.index,
    });
  }
  return layers;
}

/** Topmost (smallest) box under the cursor, or null. */
export function layerAt(
  layers: OverlayLayer[],
  x: number,
  y: number,
): BoxLayer | null {
  let hit: BoxLayer | null = null;
  let area = Infinity;
  for (const layer of layers) {
    if (layer.kind !== "box") continue;
    const [x0, y0, x1, y1] = layer.bbox;
    if (x < x0 || x > x1 || y < y0 || y > y1) continue;
    const a = (x1 - x0) * (y1 - y0);
    if (a < area) {
      hit = layer;
      area = a;
    }
  }
  return hit;
}

/** Tooltip lines for a hovered detection, straight from the audit row. */
export function hoverText(layer: BoxLayer, audit: AuditRow[]): string[] {
  const lines = [
    `detection #${layer.index} — ${layer.category.toLowerCase()}`,
    `bbox [${layer.bbox.map((v) => v.toFixed(0)).join(", ")}]`,
  ];
  const row = auditFor(audit, layer.index);
  if (row) {
    lines.push(
      `stitch order ${row.order}`,
      `generator ${row.generator}`,
      `coverage ${row.coverage}px`,
    );
  }
  return lines;
}

export function paintOverlay(
  ctx: CanvasRenderingContext2D,
  layers: OverlayLayer[],
  width: number,
  height: number,
): void {
  ctx.clearRect(0, 0, width, height);
  for (const layer of layers) {
    if (layer.kind === "banner") {
      ctx.font = "14px ui-sans-serif";
      const tw = ctx.measureText(layer.text).width;
      ctx.fillStyle = "rgba(0,0,0,0.65)";
      ctx.fillRect(width / 2 - tw / 2 - 10, height / 2 - 14, tw + 20, 28);
      ctx.fillStyle = "#e7e7e7";
      ctx.fillText(layer.text, width / 2 - tw / 2, height / 2 + 5);
      continue;
    }
    const [x0, y0, x1, y1] = layer.bbox;
    ctx.lineWidth = layer.selected ? 3 : 2;
    ctx.strokeStyle = layer.color;
    ctx.setLineDash(layer.selected ? [] : [6, 3]);
    ctx.strokeRect(x0, y0, Math.max(1, x1 - x0), Math.max(1, y1 - y0));
    ctx.setLineDash([]);
    ctx.font = "11px ui-monospace, monospace";
    const tw = ctx.measureText(layer.label).width;
    ctx.fillStyle = "rgba(0,0,0,0.6)";
    ctx.fillRect(x0, Math.max(0, y0 - 16), tw + 8, 14);
    ctx.fillStyle = layer.color;
    ctx.fillText(layer.label, x0 + 4, Math.max(10, y0 - 5));
  }
}
