// A fixture service at the fetch level: real client code, recorded responses.

import type { EventStream } from "../src/app.js";
import health from "./fixtures/health.json";
import timeline from "./fixtures/timeline.json";
import queryDescribe from "./fixtures/query_describe.json";
import queryPhone from "./fixtures/query_phone.json";
import queryEscalate from "./fixtures/query_escalate.json";
import annotateOk from "./fixtures/annotate_ok.json";

export const fixtures = {
  health,
  timeline,
  queryDescribe,
  queryPhone,
  queryEscalate,
  annotateOk,
};

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

export function jsonResponse(data: unknown, status = 200): Response {
  return new Response(JSON.stringify(data), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

const QUERY_FIXTURES: Record<string, unknown> = {
  "Describe what you see.": queryDescribe,
  "Where did I leave my phone?": queryPhone,
  "ask for more help": queryEscalate,
};

export function fixtureFetch(
  calls: RecordedCall[] = [],
  overrides: { annotateStatus?: number; annotateBody?: unknown } = {},
) {
  return async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(String(init.body)) : undefined;
    calls.push({ url, method, body });

    if (url.endsWith("/api/health")) return jsonResponse(health);
    if (url.includes("/api/timeline")) return jsonResponse(timeline);
    if (url.endsWith("/api/query")) {
      const fixture = QUERY_FIXTURES[(body as { text: string }).text];
      if (!fixture) return jsonResponse({ error: "no fixture for that text" }, 400);
      return jsonResponse(fixture);
    }
    if (url.endsWith("/api/annotate")) {
      if (overrides.annotateStatus) {
        return jsonResponse(
          overrides.annotateBody ?? { error: "There is no observation to annotate yet." },
          overrides.annotateStatus,
        );
      }
      return jsonResponse(annotateOk);
    }
    return jsonResponse({ error: `no fixture route for ${url}` }, 404);
  };
}

export class FakeEventSource implements EventStream {
  static instances: FakeEventSource[] = [];
  closed = false;
  private listeners = new Map<string, ((event: MessageEvent) => void)[]>();

  constructor(readonly url: string) {
    FakeEventSource.instances.push(this);
  }

  addEventListener(type: string, listener: (event: MessageEvent) => void): void {
    const existing = this.listeners.get(type) ?? [];
    existing.push(listener);
    this.listeners.set(type, existing);
  }

  close(): void {
    this.closed = true;
  }

  dispatch(type: string, data: unknown): void {
    for (const listener of this.listeners.get(type) ?? []) {
      listener(new MessageEvent(type, { data: JSON.stringify(data) }));
    }
  }
}

export function flush(): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, 0));
}
