import { StudioClient } from "./client.js";
import {
  BoxLayer,
  hoverText,
  layerAt,
  layoutOverlay,
  paintOverlay,
} from "./overlay.js";
import { StudioController, ViewState } from "./state.js";
import type { Category, Mode } from "./types.js";

const CATEGORIES: Category[] = ["PERSON_WITH_DENSE", "PERSON_PLAIN", "FACE_ONLY"];

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

class StudioApp {
  private readonly controller: StudioController;
  private readonly renderCanvas = byId<HTMLCanvasElement>("render");
  private readonly overlayCanvas = byId<HTMLCanvasElement>("overlay");
  private readonly tooltip = byId<HTMLDivElement>("tooltip");
  private readonly status = byId<HTMLSpanElement>("status");
  private readonly detectionList = byId<HTMLUListElement>("detections");
  private bitmap: ImageBitmap | null = null;
  private bitmapFor: string | null = null;

  constructor(client: StudioClient) {
    this.controller = new StudioController(client, (s) => void this.sync(s));
    this.wire();
    this.controller.loadDirections().catch((err) => {
      this.status.textContent = `directions unavailable: ${err}`;
    });
  }

  private get state(): ViewState {
    return this.controller.state;
  }

  private wire(): void {
    byId<HTMLInputElement>("file").addEventListener("change", (ev) => {
      const file = (ev.target as HTMLInputElement).files?.[0];
      if (file) {
        this.controller.upload(file, file.name).catch(() => {});
      }
    });

    byId<HTMLButtonElement>("anonymize").addEventListener("click", () => {
      this.controller.render().catch(() => {});
    });

    byId<HTMLButtonElement>("resample").addEventListener("click", () => {
      const seed = Number(byId<HTMLInputElement>("seed").value) || 0;
      byId<HTMLInputElement>("seed").value = String(seed + 1);
      this.controller.resample(seed).catch(() => {});
    });

    byId<HTMLButtonElement>("retry").addEventListener("click", () => {
      this.controller.retry().catch(() => {});
    });

    byId<HTMLSelectElement>("mode").addEventListener("change", (ev) => {
      this.controller.setMode((ev.target as HTMLSelectElement).value as Mode);
    });

    const psi = byId<HTMLInputElement>("psi");
    psi.addEventListener("change", () => {
      this.controller.setPsi(Number(psi.value));
      byId<HTMLSpanElement>("psi-value").textContent = psi.value;
      if (this.state.sessionId) this.controller.render().catch(() => {});
    });

    const strength = byId<HTMLInputElement>("strength");
    strength.addEventListener("input", () => {
      byId<HTMLSpanElement>("strength-value").textContent = strength.value;
    });

    byId<HTMLButtonElement>("apply-edit").addEventListener("click", () => {
      const name = byId<HTMLSelectElement>("direction").value || null;
      this.controller.setDirection(name);
      this.controller.setStrength(Number(strength.value));
      this.controller.render().catch(() => {});
    });

    byId<HTMLInputElement>("compare").addEventListener("change", (ev) => {
      this.controller.setCompare((ev.target as HTMLInputElement).checked);
    });

    for (const cat of CATEGORIES) {
      const box = document.getElementById(`toggle-${cat}`);
      box?.addEventListener("change", () => this.controller.toggleCategory(cat));
    }

    this.overlayCanvas.addEventListener("click", (ev) => {
      const { x, y } = this.canvasPoint(ev);
      const layers = this.layers();
      const hit = layerAt(layers, x, y);
      this.controller.select(hit ? hit.index : null);
    });

    this.overlayCanvas.addEventListener("mousemove", (ev) => {
      const { x, y } = this.canvasPoint(ev);
      const hit = layerAt(this.layers(), x, y);
      if (hit) {
        this.showTooltip(hit, ev.clientX, ev.clientY);
      } else {
        this.tooltip.style.display = "none";
      }
    });
    this.overlayCanvas.addEventListener("mouseleave", () => {
      this.tooltip.style.display = "none";
    });
  }

  private canvasPoint(ev: MouseEvent): { x: number; y: number } {
    const rect = this.overlayCanvas.getBoundingClientRect();
    const sx = this.overlayCanvas.width / rect.width;
    const sy = this.overlayCanvas.height / rect.height;
    return { x: (ev.clientX - rect.left) * sx, y: (ev.clientY - rect.top) * sy };
  }

  private layers() {
    return layoutOverlay(this.state.detections, this.state.audit, {
      toggles: this.state.toggles,
      selected: this.state.selected,
    });
  }

  private showTooltip(layer: BoxLayer, clientX: number, clientY: number): void {
    this.tooltip.textContent = "";
    for (const line of hoverText(layer, this.state.audit)) {
      const div = document.createElement("div");
      div.textContent = line;
      this.tooltip.appendChild(div);
    }
    this.tooltip.style.display = "block";
    this.tooltip.style.left = `${clientX + 14}px`;
    this.tooltip.style.top = `${clientY + 14}px`;
  }

  private async sync(state: ViewState): Promise<void> {
    this.status.textContent = state.busy
      ? "working…"
      : state.lastError ?? "ready";
    this.status.className = state.lastError ? "error" : "";
    byId<HTMLButtonElement>("retry").style.display = state.lastError
      ? "inline-block"
      : "none";

    const select = byId<HTMLSelectElement>("direction");
    if (select.options.length !== state.directionNames.length) {
      select.textContent = "";
      for (const name of state.directionNames) {
        const opt = document.createElement("option");
        opt.value = name;
        opt.textContent = name;
        select.appendChild(opt);
      }
    }

    this.syncDetectionList(state);
    await this.paint(state);
  }

  private syncDetectionList(state: ViewState): void {
    this.detectionList.textContent = "";
    for (const det of state.detections) {
      const li = document.createElement("li");
      li.className = det.index === state.selected ? "selected" : "";
      const chip = document.createElement("span");
      chip.className = "chip";
      chip.style.background = layoutOverlay([det], [])
        .filter((l): l is BoxLayer => l.kind === "box")
        .map((l) => l.color)[0] ?? "#888";
      li.appendChild(chip);
      const label = document.createElement("span");
      label.textContent = ` #${det.index} ${det.category.toLowerCase()}`;
      li.appendChild(label);
      const seeds = state.seedHistory[det.index] ?? [];
      if (seeds.length > 0) {
        const hist = document.createElement("span");
        hist.className = "seeds";
        hist.textContent = ` seeds: ${seeds.join(", ")}`;
        li.appendChild(hist);
      }
      li.addEventListener("click", () => this.controller.select(det.index));
      this.detectionList.appendChild(li);
    }
  }

  private async paint(state: ViewState): Promise<void> {
    const shown = state.compare ? state.original : state.render ?? state.original;
    if (!shown) return;
    if (this.bitmapFor !== shown) {
      const bytes = Uint8Array.from(atob(shown), (c) => c.charCodeAt(0));
      this.bitmap = await createImageBitmap(
        new Blob([bytes], { type: "image/png" }),
      );
      this.bitmapFor = shown;
    }
    if (!this.bitmap) return;
    const { width, height } = this.bitmap;
    for (const canvas of [this.renderCanvas, this.overlayCanvas]) {
      if (canvas.width !== width || canvas.height !== height) {
        canvas.width = width;
        canvas.height = height;
      }
    }
    const ctx = this.renderCanvas.getContext("2d");
    const octx = this.overlayCanvas.getContext("2d");
    if (!ctx || !octx) return;
    ctx.drawImage(this.bitmap, 0, 0);
    if (state.affectedBbox && !state.compare) {
      const [x0, y0, x1, y1] = state.affectedBbox;
      ctx.strokeStyle = "rgba(255,255,255,0.8)";
      ctx.lineWidth = 1;
      ctx.strokeRect(x0 + 0.5, y0 + 0.5, x1 - x0 - 1, y1 - y0 - 1);
    }
    paintOverlay(octx, this.layers(), width, height);
  }
}

const params = new URLSearchParams(window.location.search);
const api = params.get("api") ?? "http://127.0.0.1:8000";
const token = params.get("token") ?? undefined;
new StudioApp(new StudioClient(api, token));
