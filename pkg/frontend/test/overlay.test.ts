import { describe, expect, it } from "vitest";

import {
  CATEGORY_COLORS,
  auditFor,
  hoverText,
  layerAt,
  layoutOverlay,
  type BoxLayer,
} from "../src/overlay";
import type { AuditRow, Category, DetectionSummary } from "../src/types";

function det(
  index: number,
  category: Category,
  bbox: [number, number, number, number],
  coverage = 100,
): DetectionSummary {
  return { index, category, bbox, coverage, confidence: 0.9 };
}

const boxes = (layers: ReturnType<typeof layoutOverlay>) =>
  layers.filter((l): l is BoxLayer => l.kind === "box");

describe("layoutOverlay", () => {
  it("gives each category its own color", () => {
    const layers = layoutOverlay(
      [
        det(0, "PERSON_WITH_DENSE", [0, 0, 10, 10]),
        det(1, "PERSON_PLAIN", [20, 0, 30, 10]),
        det(2, "FACE_ONLY", [40, 0, 50, 10]),
      ],
      [],
    );
    const colors = boxes(layers).map((l) => l.color);
    expect(colors).toHaveLength(3);
    expect(new Set(colors).size).toBe(3);
    expect(colors).toEqual([
      CATEGORY_COLORS.PERSON_WITH_DENSE,
      CATEGORY_COLORS.PERSON_PLAIN,
      CATEGORY_COLORS.FACE_ONLY,
    ]);
  });

  it("shows a banner when nothing was detected", () => {
    const layers = layoutOverlay([], []);
    expect(layers).toEqual([
      { kind: "banner", text: "no individuals detected" },
    ]);
  });

  it("labels boxes with order and coverage from the audit, not local math", () => {
    // The audit row deliberately disagrees with the detection summary; the
    // label must follow the audit because that is what the server rendered.
    const audit: AuditRow[] = [
      {
        order: 7,
        detection_index: 0,
        generator: "body",
        category: "PERSON_PLAIN",
        coverage: 4321,
        bbox: [0, 0, 10, 10],
      },
    ];
    const layers = boxes(
      layoutOverlay([det(0, "PERSON_PLAIN", [0, 0, 10, 10], 999)], audit),
    );
    expect(layers[0].label).toContain("order 7");
    expect(layers[0].label).toContain("4321px");
    expect(layers[0].label).not.toContain("999");
  });

  it("falls back to summary coverage before the first render", () => {
    const layers = boxes(
      layoutOverlay([det(3, "FACE_ONLY", [0, 0, 10, 10], 555)], []),
    );
    expect(layers[0].label).toContain("555px");
    expect(layers[0].label).toContain("order –");
  });

  it("hides only the toggled-off category", () => {
    const layers = boxes(
      layoutOverlay(
        [
          det(0, "PERSON_PLAIN", [0, 0, 10, 10]),
          det(1, "FACE_ONLY", [20, 0, 30, 10]),
        ],
        [],
        { toggles: { FACE_ONLY: false } },
      ),
    );
    expect(layers.map((l) => l.index)).toEqual([0]);
  });

  it("marks the selected detection", () => {
    const layers = boxes(
      layoutOverlay(
        [det(0, "PERSON_PLAIN", [0, 0, 10, 10]), det(1, "FACE_ONLY", [20, 0, 30, 10])],
        [],
        { selected: 1 },
      ),
    );
    expect(layers.map((l) => l.selected)).toEqual([false, true]);
  });
});

describe("layerAt", () => {
  const layers = layoutOverlay(
    [
      det(0, "PERSON_PLAIN", [0, 0, 100, 100]),
      det(1, "FACE_ONLY", [40, 40, 60, 60]),
    ],
    [],
  );

  it("prefers the smallest box under the cursor", () => {
    expect(layerAt(layers, 50, 50)?.index).toBe(1);
    expect(layerAt(layers, 10, 10)?.index).toBe(0);
  });

  it("returns null outside every box", () => {
    expect(layerAt(layers, 200, 200)).toBeNull();
  });
});

describe("hoverText", () => {
  it("echoes the audit fields for the hovered detection", () => {
    const audit: AuditRow[] = [
      {
        order: 1,
        detection_index: 4,
        generator: "face",
        category: "FACE_ONLY",
        coverage: 1024,
        bbox: [72, 16, 104, 48],
      },
    ];
    const layer = boxes(
      layoutOverlay([det(4, "FACE_ONLY", [72, 16, 104, 48])], audit),
    )[0];
    const lines = hoverText(layer, audit);
    expect(lines).toContain("stitch order 1");
    expect(lines).toContain("generator face");
    expect(lines).toContain("coverage 1024px");
    expect(auditFor(audit, 4)).toBeDefined();
    expect(auditFor(audit, 5)).toBeUndefined();
  });
});
