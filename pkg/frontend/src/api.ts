/** Thin client for the inference service HTTP API. */

export interface Point {
  x: number;
  y: number;
  polarity: 0 | 1;
}

export interface SegmentResponse {
  rle: number[];
  h: number;
  w: number;
  confidence: number;
  ms: number;
}

export interface UndoResponse {
  noop: boolean;
  rle?: number[];
  h: number;
  w: number;
  confidence?: number;
  points?: Point[];
}

export interface SessionInfo {
  id: string;
  h: number;
  w: number;
}

export interface SegmentBackend {
  segment(points: Point[], mode: string): Promise<SegmentResponse>;
  undo(): Promise<UndoResponse>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function expectOk(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      detail = (await resp.json()).detail ?? detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  async createSession(image: Blob, task: string, mode: string): Promise<SessionInfo> {
    const form = new FormData();
    form.append("image", image, "upload.png");
    form.append("task", task);
    form.append("mode", mode);
    return expectOk(await fetch(`${this.baseUrl}/sessions`, { method: "POST", body: form }));
  }

  async segment(sessionId: string, points: Point[], mode: string): Promise<SegmentResponse> {
    return expectOk(
      await fetch(`${this.baseUrl}/sessions/${sessionId}/segment`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ points, mode }),
      })
    );
  }

  async undo(sessionId: string): Promise<UndoResponse> {
    return expectOk(await fetch(`${this.baseUrl}/sessions/${sessionId}/undo`, { method: "POST" }));
  }

  async modelInfo(): Promise<{ variant: string; rank: number | null; task: string; checkpoint: string }> {
    return expectOk(await fetch(`${this.baseUrl}/model`));
  }

  /** Backend view bound to one session, as consumed by the state store. */
  forSession(sessionId: string): SegmentBackend {
    return {
      segment: (points, mode) => this.segment(sessionId, points, mode),
      undo: () => this.undo(sessionId),
    };
  }
}
