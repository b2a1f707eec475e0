import type { IterationReport, QueueItem, SampleBundle, SessionInfo } from "./types.js";

export class ConflictError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ConflictError";
  }
}

export class ServiceUnreachableError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ServiceUnreachableError";
  }
}

type FetchLike = typeof fetch;

/**
 * Typed client for the annotation service. All mutations carry the caller's
 * revision; a 409 surfaces as ConflictError so the UI can refetch and retry.
 */
export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      throw new ServiceUnreachableError(`cannot reach service: ${err}`);
    }
    if (response.status === 409) {
      const body = await response.json().catch(() => ({ detail: "conflict" }));
      throw new ConflictError(String((body as { detail?: string }).detail ?? "conflict"));
    }
    if (!response.ok) {
      const text = await response.text();
      throw new Error(`${response.status}: ${text}`);
    }
    return (await response.json()) as T;
  }

  getSession(): Promise<SessionInfo> {
    return this.request<SessionInfo>("/api/session");
  }

  async getQueue(): Promise<{ revision: number; items: QueueItem[] }> {
    return this.request("/api/queue");
  }

  getSample(id: string): Promise<SampleBundle> {
    return this.request<SampleBundle>(`/api/sample/${id}`);
  }

  postDecision(id: string, decision: "accept" | "reject", revision: number): Promise<{ revision: number }> {
    return this.request(`/api/sample/${id}/decision`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ decision, revision }),
    });
  }

  postKeypoint(
    id: string,
    view: number,
    keypointId: number,
    u: number,
    v: number,
    revision: number,
  ): Promise<{ revision: number }> {
    return this.request(`/api/sample/${id}/keypoints`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ view, keypoint_id: keypointId, u, v, revision }),
    });
  }

  triggerIteration(): Promise<{ revision: number; report: IterationReport }> {
    return this.request("/api/iterate", { method: "POST" });
  }

  /**
   * Run a mutation; on a stale revision, refresh it once via the session
   * endpoint and retry. Returns the new revision.
   */
  async withRevisionRetry(
    action: (revision: number) => Promise<{ revision: number }>,
    revision: number,
  ): Promise<number> {
    try {
      return (await action(revision)).revision;
    } catch (err) {
      if (!(err instanceof ConflictError)) throw err;
      const fresh = await this.getSession();
      return (await action(fresh.revision)).revision;
    }
  }
}
