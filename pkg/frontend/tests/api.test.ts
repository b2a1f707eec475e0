import { describe, expect, it, vi } from "vitest";
import { ApiClient, ConflictError, ServiceUnreachableError } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

describe("ApiClient", () => {
  it("posts decisions with the caller revision", async () => {
    const calls: { url: string; body: unknown }[] = [];
    const fetchMock = vi.fn(async (url: RequestInfo | URL, init?: RequestInit) => {
      calls.push({ url: String(url), body: JSON.parse(String(init?.body)) });
      return jsonResponse({ revision: 6 });
    });
    const api = new ApiClient("http://svc", fetchMock as unknown as typeof fetch);
    const out = await api.postDecision("s1", "accept", 5);
    expect(out.revision).toBe(6);
    expect(calls[0].url).toBe("http://svc/api/sample/s1/decision");
    expect(calls[0].body).toEqual({ decision: "accept", revision: 5 });
  });

  it("surfaces 409 as ConflictError", async () => {
    const fetchMock = vi.fn(async () => jsonResponse({ detail: "stale revision 3" }, 409));
    const api = new ApiClient("", fetchMock as unknown as typeof fetch);
    await expect(api.postDecision("s1", "reject", 3)).rejects.toBeInstanceOf(ConflictError);
  });

  it("withRevisionRetry refetches the revision once and retries", async () => {
    let attempts = 0;
    const fetchMock = vi.fn(async (url: RequestInfo | URL) => {
      const u = String(url);
      if (u.endsWith("/api/session")) {
        return jsonResponse({ revision: 9 });
      }
      attempts += 1;
      if (attempts === 1) return jsonResponse({ detail: "stale" }, 409);
      return jsonResponse({ revision: 10 });
    });
    const api = new ApiClient("", fetchMock as unknown as typeof fetch);
    const revision = await api.withRevisionRetry(
      (rev) => api.postDecision("s", "accept", rev),
      2,
    );
    expect(revision).toBe(10);
    expect(attempts).toBe(2);
  });

  it("maps network failure to ServiceUnreachableError", async () => {
    const fetchMock = vi.fn(async () => {
      throw new TypeError("fetch failed");
    });
    const api = new ApiClient("", fetchMock as unknown as typeof fetch);
    await expect(api.getQueue()).rejects.toBeInstanceOf(ServiceUnreachableError);
  });

  it("keypoint body uses the service field names", async () => {
    let captured: unknown;
    const fetchMock = vi.fn(async (_url: RequestInfo | URL, init?: RequestInit) => {
      captured = JSON.parse(String(init?.body));
      return jsonResponse({ revision: 1 });
    });
    const api = new ApiClient("", fetchMock as unknown as typeof fetch);
    await api.postKeypoint("s", 3, 12, 40.5, 41.25, 0);
    expect(captured).toEqual({ view: 3, keypoint_id: 12, u: 40.5, v: 41.25, revision: 0 });
  });
});
