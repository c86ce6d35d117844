// Typed client for the pipeline service API. The console displays only what
// these calls return; POSTs within one session are serialized to match the
// service's per-session FIFO.

export interface TimelineEntry {
  id: number;
  timestamp_ms: number;
  description: string;
  annotations: string[];
  image: boolean;
  pending: boolean;
}

export interface QueryResponse {
  route: string;
  answer_text: string;
  retrieved_id: number | null;
  similarity: number | null;
  prompts_used: [string, string][];
  llm_rounds: number;
  notes: string[];
  session_id: string;
  answer_id: number;
  audio: boolean;
  timings_ms: Record<string, number>;
}

export interface AnnotateResponse {
  route: string;
  answer_text: string;
  observation_id: number;
}

export interface HealthResponse {
  status: string;
  observations: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class SeeSayClient {
  private sessionQueues = new Map<string, Promise<unknown>>();

  constructor(
    readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  imageUrl(observationId: number): string {
    return `${this.baseUrl}/api/observations/${observationId}/image`;
  }

  audioUrl(answerId: number): string {
    return `${this.baseUrl}/api/answers/${answerId}/audio`;
  }

  eventsUrl(): string {
    return `${this.baseUrl}/api/events`;
  }

  async health(): Promise<HealthResponse> {
    return this.getJson("/api/health");
  }

  async timeline(limit?: number): Promise<TimelineEntry[]> {
    const suffix = limit === undefined ? "" : `?limit=${limit}`;
    return this.getJson(`/api/timeline${suffix}`);
  }

  async query(sessionId: string, text: string): Promise<QueryResponse> {
    return this.enqueue(sessionId, () =>
      this.postJson("/api/query", { session_id: sessionId, text }),
    );
  }

  async annotate(sessionId: string, text: string): Promise<AnnotateResponse> {
    return this.enqueue(sessionId, () =>
      this.postJson("/api/annotate", { session_id: sessionId, text }),
    );
  }

  // -- plumbing ------------------------------------------------------

  private enqueue<T>(sessionId: string, task: () => Promise<T>): Promise<T> {
    const previous = this.sessionQueues.get(sessionId) ?? Promise.resolve();
    const next = previous.then(task, task);
    this.sessionQueues.set(sessionId, next.catch(() => undefined));
    return next;
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`);
    return this.decode(response);
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    return this.decode(response);
  }

  private async decode<T>(response: Response): Promise<T> {
    if (!response.ok) {
      let message = `HTTP ${response.status}`;
      try {
        const data = (await response.json()) as { error?: string };
        if (data.error) message = data.error;
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(response.status, message);
    }
    return (await response.json()) as T;
  }
}
