import type {
  ActionPayload,
  AttributeListing,
  FeedbackPayload,
  HealthReport,
  SessionSummary,
  Transcript,
} from "./types.js";

/** Error raised for any non-2xx response, carrying the service's code. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

/** Subset of fetch the client needs; injectable for tests. */
export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

/** Thin typed wrapper over the session API. */
export class ServiceClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(`${this.base}${path}`, init);
    const payload: unknown = await response.json().catch(() => null);
    if (!response.ok) {
      const err = (payload ?? {}) as Partial<{ code: string; message: string }>;
      throw new ServiceError(
        response.status,
        err.code ?? "http_error",
        err.message ?? `request failed with status ${response.status}`,
      );
    }
    return payload as T;
  }

  health(): Promise<HealthReport> {
    return this.request("GET", "/health");
  }

  attributes(): Promise<AttributeListing> {
    return this.request("GET", "/attributes");
  }

  createSession(
    openingAttribute: number,
    seed = 0,
    userId: number | null = null,
  ): Promise<SessionSummary> {
    return this.request("POST", "/sessions", {
      opening_attribute: openingAttribute,
      seed,
      user_id: userId,
    });
  }

  summary(sessionId: string): Promise<SessionSummary> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  transcript(sessionId: string): Promise<Transcript> {
    return this.request("GET", `/sessions/${sessionId}/transcript`);
  }

  nextAction(sessionId: string): Promise<ActionPayload> {
    return this.request("GET", `/sessions/${sessionId}/next_action`);
  }

  sendFeedback(
    sessionId: string,
    payload: FeedbackPayload,
  ): Promise<SessionSummary> {
    return this.request("POST", `/sessions/${sessionId}/feedback`, payload);
  }
}
