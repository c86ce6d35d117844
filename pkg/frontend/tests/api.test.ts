import { describe, expect, it } from "vitest";

import { ApiError, SeeSayClient } from "../src/api.js";
import { fixtureFetch, fixtures, jsonResponse, type RecordedCall } from "./helpers.js";

describe("SeeSayClient", () => {
  it("fetches the timeline from /api/timeline", async () => {
    const calls: RecordedCall[] = [];
    const client = new SeeSayClient("", fixtureFetch(calls));
    const entries = await client.timeline();
    expect(calls[0]).toMatchObject({ url: "/api/timeline", method: "GET" });
    expect(entries).toEqual(fixtures.timeline);
  });

  it("passes the limit parameter through", async () => {
    const calls: RecordedCall[] = [];
    const client = new SeeSayClient("", fixtureFetch(calls));
    await client.timeline(2);
    expect(calls[0].url).toBe("/api/timeline?limit=2");
  });

  it("posts queries with session id and text", async () => {
    const calls: RecordedCall[] = [];
    const client = new SeeSayClient("", fixtureFetch(calls));
    const response = await client.query("console-1", "Where did I leave my phone?");
    expect(calls[0]).toMatchObject({
      url: "/api/query",
      method: "POST",
      body: { session_id: "console-1", text: "Where did I leave my phone?" },
    });
    expect(response).toEqual(fixtures.queryPhone);
    expect(response.route).toBe("Historical");
  });

  it("surfaces API error bodies as ApiError", async () => {
    const client = new SeeSayClient("", fixtureFetch([], { annotateStatus: 409 }));
    await expect(client.annotate("s", "x")).rejects.toThrowError(ApiError);
    await expect(client.annotate("s", "x")).rejects.toThrow(
      "There is no observation to annotate yet.",
    );
  });

  it("prefixes a configured base URL", async () => {
    const calls: RecordedCall[] = [];
    const client = new SeeSayClient("http://example.test:8080", fixtureFetch(calls));
    await client.health();
    expect(calls[0].url).toBe("http://example.test:8080/api/health");
    expect(client.imageUrl(3)).toBe("http://example.test:8080/api/observations/3/image");
    expect(client.audioUrl(7)).toBe("http://example.test:8080/api/answers/7/audio");
    expect(client.eventsUrl()).toBe("http://example.test:8080/api/events");
  });

  it("serializes posts within one session, FIFO", async () => {
    const order: string[] = [];
    const resolvers: (() => void)[] = [];
    const slowFetch = async (url: string, init?: RequestInit): Promise<Response> => {
      const text = JSON.parse(String(init?.body)).text as string;
      order.push(`start:${text}`);
      await new Promise<void>((resolve) => resolvers.push(resolve));
      order.push(`end:${text}`);
      return jsonResponse(fixtures.queryDescribe);
    };
    const client = new SeeSayClient("", slowFetch);
    const first = client.query("same", "one");
    const second = client.query("same", "two");
    await Promise.resolve();
    expect(order).toEqual(["start:one"]); // second waits for first
    resolvers[0]();
    await first;
    await Promise.resolve();
    expect(order).toContain("start:two");
    resolvers[1]();
    await second;
    expect(order).toEqual(["start:one", "end:one", "start:two", "end:two"]);
  });

  it("lets different sessions proceed independently", async () => {
    const started: string[] = [];
    const resolvers: (() => void)[] = [];
    const slowFetch = async (_url: string, init?: RequestInit): Promise<Response> => {
      started.push(JSON.parse(String(init?.body)).session_id as string);
      await new Promise<void>((resolve) => resolvers.push(resolve));
      return jsonResponse(fixtures.queryDescribe);
    };
    const client = new SeeSayClient("", slowFetch);
    const a = client.query("session-a", "x");
    const b = client.query("session-b", "y");
    await Promise.resolve();
    expect(started.sort()).toEqual(["session-a", "session-b"]);
    resolvers.forEach((resolve) => resolve());
    await Promise.all([a, b]);
  });
});
