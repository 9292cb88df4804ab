import { StudioClient } from "./client.js";
import type {
  AuditRow,
  Category,
  DetectionSummary,
  EditSpec,
  Mode,
} from "./types.js";

export interface EditControls {
  direction: string | null;
  strength: number;
  psi: number;
}

export interface ViewState {
  sessionId: string | null;
  detections: DetectionSummary[];
  /** Audit rows of the last render; the only source of order/coverage shown. */
  audit: AuditRow[];
  toggles: Partial<Record<Category, boolean>>;
  selected: number | null;
  /** Seeds tried per detection index, in the order they were applied. */
  seedHistory: Record<number, number[]>;
  edits: EditControls;
  mode: Mode;
  seed: number;
  /** Before/after compare: paint the upload instead of the render. */
  compare: boolean;
  /** Current render PNG, base64, exactly as the service returned it. */
  render: string | null;
  /** Render before the last mutation, for the compare view. */
  previousRender: string | null;
  /** The uploaded image, base64, kept client-side for compare only. */
  original: string | null;
  /** bbox of the detection the last mutation touched (service field). */
  affectedBbox: [number, number, number, number] | null;
  directionNames: string[];
  busy: boolean;
  lastError: string | null;
}

function initialState(): ViewState {
  return {
    sessionId: null,
    detections: [],
    audit: [],
    toggles: {},
    selected: null,
    seedHistory: {},
    edits: { direction: null, strength: 1.0, psi: 1.0 },
    mode: "gan",
    seed: 0,
    compare: false,
    render: null,
    previousRender: null,
    original: null,
    affectedBbox: null,
    directionNames: [],
    busy: false,
    lastError: null,
  };
}

export function bytesToB64(bytes: Uint8Array): string {
  const B = (globalThis as { Buffer?: { from(b: Uint8Array): { toString(e: string): string } } }).Buffer;
  if (B) return B.from(bytes).toString("base64");
  let s = "";
  for (let i = 0; i < bytes.length; i += 0x8000) {
    s += String.fromCharCode(...bytes.subarray(i, i + 0x8000));
  }
  return btoa(s);
}

type Action<T> = () => Promise<T>;

/** Drives a session against the service. All pixels shown to the user are
 * server renders passed through untouched; the controller only sequences
 * requests and bookkeeps view state. Mutating requests run strictly one at
 * a time per session — user actions queue behind the in-flight one. */
export class StudioController {
  readonly state: ViewState = initialState();
  private tail: Promise<unknown> = Promise.resolve();
  private lastAction: Action<unknown> | null = null;

  constructor(
    private readonly client: StudioClient,
    private readonly onChange: (state: ViewState) => void = () => {},
  ) {}

  private notify(): void {
    this.onChange(this.state);
  }

  private enqueue<T>(action: Action<T>): Promise<T> {
    this.lastAction = action;
    const result = this.tail.then(async () => {
      this.state.busy = true;
      this.notify();
      try {
        const value = await action();
        this.state.lastError = null;
        return value;
      } catch (err) {
        this.state.lastError = err instanceof Error ? err.message : String(err);
        throw err;
      } finally {
        this.state.busy = false;
        this.notify();
      }
    });
    // Keep the queue alive whether the action succeeded or not.
    this.tail = result.then(
      () => undefined,
      () => undefined,
    );
    return result;
  }

  /** Re-issue the most recent queued action (after a surfaced error). */
  retry(): Promise<unknown> {
    if (this.lastAction === null) return Promise.resolve();
    return this.enqueue(this.lastAction);
  }

  async upload(image: Blob | Uint8Array, filename = "upload.png"): Promise<void> {
    const bytes =
      image instanceof Blob
        ? new Uint8Array(await image.arrayBuffer())
        : image;
    await this.enqueue(async () => {
      const res = await this.client.createSession(bytes, filename);
      const fresh = initialState();
      fresh.sessionId = res.session_id;
      fresh.detections = res.detections;
      fresh.selected = res.detections.length > 0 ? 0 : null;
      fresh.original = bytesToB64(bytes);
      fresh.directionNames = this.state.directionNames;
      Object.assign(this.state, fresh);
    });
  }

  async loadDirections(): Promise<void> {
    const res = await this.client.directions();
    this.state.directionNames = res.directions;
    if (this.state.edits.direction === null && res.directions.length > 0) {
      this.state.edits.direction = res.directions[0];
    }
    this.notify();
  }

  select(index: number | null): void {
    if (index !== null && !this.state.detections.some((d) => d.index === index)) {
      return;
    }
    this.state.selected = index;
    this.notify();
  }

  toggleCategory(category: Category): void {
    this.state.toggles[category] = !(this.state.toggles[category] ?? true);
    this.notify();
  }

  setMode(mode: Mode): void {
    this.state.mode = mode;
    this.notify();
  }

  setSeed(seed: number): void {
    this.state.seed = Math.trunc(seed);
    this.notify();
  }

  setPsi(psi: number): void {
    this.state.edits.psi = Math.min(1, Math.max(0, psi));
    this.notify();
  }

  setDirection(name: string | null): void {
    this.state.edits.direction = name;
    this.notify();
  }

  setStrength(strength: number): void {
    this.state.edits.strength = strength;
    this.notify();
  }

  setCompare(on: boolean): void {
    this.state.compare = on;
    this.notify();
  }

  /** The edit list sent to the service. A chosen direction is always sent,
   * strength 0 included — identity is the server's call, not ours. */
  private editSpecs(): EditSpec[] {
    const { direction, strength } = this.state.edits;
    return direction === null ? [] : [{ direction, strength }];
  }

  private requireSession(): string {
    const sid = this.state.sessionId;
    if (sid === null) throw new Error("no session: upload an image first");
    return sid;
  }

  /** Full-frame render with the current mode/seed/psi/edit controls. */
  async render(): Promise<void> {
    const sid = this.requireSession();
    const params = {
      mode: this.state.mode,
      seed: this.state.seed,
      psi: this.state.edits.psi,
      edits: this.state.mode === "gan" ? this.editSpecs() : [],
    };
    await this.enqueue(async () => {
      const res = await this.client.anonymize(sid, params);
      this.state.previousRender = this.state.render;
      this.state.render = res.image_b64;
      this.state.audit = res.audit;
      this.state.affectedBbox = null;
      res.audit.forEach((row) => {
        this.state.seedHistory[row.detection_index] ??= [];
      });
    });
  }

  /** Redraw one detection's identity; other regions stay server-cached. */
  async resample(seed: number, index?: number): Promise<void> {
    const sid = this.requireSession();
    const target = index ?? this.state.selected;
    if (target === null) throw new Error("no detection selected");
    await this.enqueue(async () => {
      const res = await this.client.resample(sid, target, seed);
      this.state.previousRender = this.state.render;
      this.state.render = res.image_b64;
      this.state.audit = res.audit;
      (this.state.seedHistory[target] ??= []).push(seed);
      const det = this.state.detections.find((d) => d.index === target);
      this.state.affectedBbox = det ? det.bbox : null;
    });
  }
}
