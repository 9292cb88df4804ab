import type {
  AnonymizeParams,
  DirectionsResponse,
  HealthResponse,
  RenderResponse,
  ResampleResponse,
  SessionResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`${status}: ${detail}`);
    this.name = "ApiError";
  }
}

/** Thin typed wrapper over the service HTTP API. Every image the studio
 * displays comes back through here as server-encoded PNG bytes. */
export class StudioClient {
  private readonly baseUrl: string;

  constructor(
    baseUrl: string,
    private readonly token?: string,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async unwrap<T>(res: Response): Promise<T> {
    if (!res.ok) {
      let detail = res.statusText || `http ${res.status}`;
      try {
        const body = (await res.json()) as { detail?: unknown };
        if (typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  async health(): Promise<HealthResponse> {
    return this.unwrap(await fetch(`${this.baseUrl}/healthz`));
  }

  async directions(): Promise<DirectionsResponse> {
    return this.unwrap(
      await fetch(`${this.baseUrl}/directions`, { headers: this.headers() }),
    );
  }

  async createSession(
    image: Blob | Uint8Array,
    filename = "upload.png",
  ): Promise<SessionResponse> {
    const blob =
      image instanceof Blob
        ? image
        : new Blob([new Uint8Array(image)], { type: "image/png" });
    const form = new FormData();
    form.append("image", blob, filename);
    return this.unwrap(
      await fetch(`${this.baseUrl}/sessions`, {
        method: "POST",
        headers: this.headers(),
        body: form,
      }),
    );
  }

  async anonymize(
    sessionId: string,
    params: AnonymizeParams,
  ): Promise<RenderResponse> {
    return this.unwrap(
      await fetch(`${this.baseUrl}/sessions/${sessionId}/anonymize`, {
        method: "POST",
        headers: this.headers(true),
        body: JSON.stringify(params),
      }),
    );
  }

  async resample(
    sessionId: string,
    index: number,
    seed: number,
  ): Promise<ResampleResponse> {
    return this.unwrap(
      await fetch(
        `${this.baseUrl}/sessions/${sessionId}/detections/${index}/resample`,
        {
          method: "POST",
          headers: this.headers(true),
          body: JSON.stringify({ seed }),
        },
      ),
    );
  }
}
