// Console wiring: timeline panel, query panel with trace view, annotate
// actions, and one SSE connection per tab. The console keeps no state beyond
// the view; a reload rebuilds every panel from the API alone.

import { ApiError, SeeSayClient } from "./api.js";
import type { QueryResponse, TimelineEntry } from "./api.js";
import {
  renderEmptyState,
  renderError,
  renderTimelineEntry,
  renderTraceCard,
} from "./render.js";

export interface EventStream {
  addEventListener(type: string, listener: (event: MessageEvent) => void): void;
  close(): void;
}

export type EventStreamFactory = (url: string) => EventStream;

const TIMELINE_EMPTY = "Nothing observed yet. Ingest a frame to get started.";
const TRACE_EMPTY = "Ask a question to see its route and answer here.";

interface AnswerEvent {
  session_id: string;
  utterance: string | null;
  answer_id: number;
  audio: boolean;
  result: Omit<QueryResponse, "session_id" | "answer_id" | "audio" | "timings_ms">;
  timings_ms: Record<string, number>;
}

export class ConsoleApp {
  readonly sessionId: string;
  private stream: EventStream | null = null;
  private timelineList!: HTMLElement;
  private traceList!: HTMLElement;
  private statusLine!: HTMLElement;
  private errorSlot!: HTMLElement;
  private renderedAnswers = new Set<number>();

  constructor(
    private readonly root: HTMLElement,
    private readonly client: SeeSayClient,
    private readonly eventStreamFactory: EventStreamFactory,
    sessionId?: string,
  ) {
    this.sessionId = sessionId ?? `console-${Math.random().toString(36).slice(2, 10)}`;
  }

  async start(): Promise<void> {
    this.buildSkeleton();
    await this.refreshStatus();
    await this.refreshTimeline();
    this.stream = this.eventStreamFactory(this.client.eventsUrl());
    this.stream.addEventListener("ingest", (event) =>
      this.onIngest(JSON.parse(event.data)),
    );
    this.stream.addEventListener("annotate", (event) =>
      this.onAnnotate(JSON.parse(event.data)),
    );
    this.stream.addEventListener("answer", (event) =>
      this.onAnswer(JSON.parse(event.data)),
    );
  }

  stop(): void {
    this.stream?.close();
    this.stream = null;
  }

  // -- panels ----------------------------------------------------------

  private buildSkeleton(): void {
    this.root.innerHTML = "";

    const header = document.createElement("header");
    header.className = "console-header";
    const title = document.createElement("h1");
    title.textContent = "SeeSay console";
    this.statusLine = document.createElement("span");
    this.statusLine.className = "status-line";
    header.append(title, this.statusLine);
    this.errorSlot = document.createElement("div");
    this.errorSlot.className = "error-slot";
    header.appendChild(this.errorSlot);
    this.root.appendChild(header);

    const main = document.createElement("main");
    main.className = "console-main";

    const queryPanel = document.createElement("section");
    queryPanel.className = "panel query-panel";
    queryPanel.appendChild(this.sectionTitle("Ask"));
    queryPanel.appendChild(this.buildQueryForm());
    this.traceList = document.createElement("div");
    this.traceList.className = "trace-list";
    this.traceList.appendChild(renderEmptyState(TRACE_EMPTY));
    queryPanel.appendChild(this.traceList);
    main.appendChild(queryPanel);

    const timelinePanel = document.createElement("section");
    timelinePanel.className = "panel timeline-panel";
    timelinePanel.appendChild(this.sectionTitle("Memory timeline"));
    timelinePanel.appendChild(this.buildAnnotateForm());
    this.timelineList = document.createElement("div");
    this.timelineList.className = "timeline-list";
    timelinePanel.appendChild(this.timelineList);
    main.appendChild(timelinePanel);

    this.root.appendChild(main);
  }

  private sectionTitle(text: string): HTMLElement {
    const h2 = document.createElement("h2");
    h2.textContent = text;
    return h2;
  }

  private buildQueryForm(): HTMLFormElement {
    const form = document.createElement("form");
    form.className = "query-form";
    const input = document.createElement("input");
    input.type = "text";
    input.name = "utterance";
    input.placeholder = "Describe what you see.";
    input.autocomplete = "off";
    const button = document.createElement("button");
    button.type = "submit";
    button.textContent = "Ask";
    form.append(input, button);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const text = input.value.trim();
      if (!text) return;
      input.value = "";
      void this.submitQuery(text);
    });
    return form;
  }

  private buildAnnotateForm(): HTMLFormElement {
    const form = document.createElement("form");
    form.className = "annotate-form";
    const input = document.createElement("input");
    input.type = "text";
    input.name = "annotation";
    input.placeholder = "Remember this person as Mary.";
    input.autocomplete = "off";
    const button = document.createElement("button");
    button.type = "submit";
    button.textContent = "Remember";
    button.disabled = true;
    input.addEventListener("input", () => {
      button.disabled = input.value.trim().length === 0;
    });
    form.append(input, button);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const text = input.value.trim();
      if (!text) return;
      void this.submitAnnotation(text, () => {
        input.value = "";
        button.disabled = true;
      });
    });
    return form;
  }

  // -- actions ---------------------------------------------------------

  async submitQuery(text: string): Promise<void> {
    this.clearError();
    try {
      const response = await this.client.query(this.sessionId, text);
      this.renderedAnswers.add(response.answer_id);
      this.prependTrace(
        renderTraceCard(
          { utterance: text, sessionId: this.sessionId, response },
          this.client,
        ),
      );
      if (response.audio) this.playAnswer(response.answer_id);
    } catch (error) {
      this.showError(error);
    }
  }

  async submitAnnotation(text: string, onConfirmed?: () => void): Promise<void> {
    this.clearError();
    try {
      await this.client.annotate(this.sessionId, text);
      onConfirmed?.();
      await this.refreshTimeline();
      await this.refreshStatus();
    } catch (error) {
      this.showError(error);
    }
  }

  async refreshTimeline(): Promise<void> {
    const entries = await this.client.timeline();
    this.timelineList.innerHTML = "";
    if (entries.length === 0) {
      this.timelineList.appendChild(renderEmptyState(TIMELINE_EMPTY));
      return;
    }
    for (const entry of entries) {
      this.timelineList.appendChild(renderTimelineEntry(entry, this.client));
    }
  }

  private async refreshStatus(): Promise<void> {
    try {
      const health = await this.client.health();
      this.statusLine.textContent =
        `${health.status} · ${health.observations} observation(s) · session ${this.sessionId}`;
    } catch (error) {
      this.showError(error);
    }
  }

  // -- SSE handlers ------------------------------------------------------

  private onIngest(data: { entry: TimelineEntry }): void {
    this.removeEmptyState(this.timelineList);
    const existing = this.findEntry(data.entry.id);
    const rendered = renderTimelineEntry(data.entry, this.client);
    if (existing) {
      existing.replaceWith(rendered);
    } else {
      this.timelineList.prepend(rendered);
    }
    void this.refreshStatus();
  }

  private onAnnotate(data: { entry: TimelineEntry }): void {
    const existing = this.findEntry(data.entry.id);
    const rendered = renderTimelineEntry(data.entry, this.client);
    if (existing) existing.replaceWith(rendered);
    else this.timelineList.prepend(rendered);
  }

  private onAnswer(data: AnswerEvent): void {
    if (this.renderedAnswers.has(data.answer_id)) return; // already shown from the POST
    const response: QueryResponse = {
      ...data.result,
      session_id: data.session_id,
      answer_id: data.answer_id,
      audio: data.audio,
      timings_ms: data.timings_ms,
    } as QueryResponse;
    this.prependTrace(
      renderTraceCard(
        {
          utterance: data.utterance ?? "(audio utterance)",
          sessionId: data.session_id,
          response,
        },
        this.client,
      ),
    );
  }

  // -- helpers -----------------------------------------------------------

  private findEntry(observationId: number): HTMLElement | null {
    return this.timelineList.querySelector(
      `.timeline-entry[data-id="${observationId}"]`,
    );
  }

  private prependTrace(card: HTMLElement): void {
    this.removeEmptyState(this.traceList);
    this.traceList.prepend(card);
  }

  private removeEmptyState(container: HTMLElement): void {
    container.querySelector(".empty-state")?.remove();
  }

  private playAnswer(answerId: number): void {
    const card = this.traceList.querySelector(
      `.trace-card[data-answer-id="${answerId}"] audio`,
    ) as HTMLAudioElement | null;
    try {
      // Autoplay may be blocked (or unimplemented under jsdom); the element
      // keeps its controls either way.
      void card?.play()?.catch(() => undefined);
    } catch {
      // ignored: manual playback remains available
    }
  }

  private showError(error: unknown): void {
    const message =
      error instanceof ApiError
        ? error.message
        : error instanceof Error
          ? error.message
          : String(error);
    this.errorSlot.innerHTML = "";
    this.errorSlot.appendChild(renderError(message));
  }

  private clearError(): void {
    this.errorSlot.innerHTML = "";
  }
}
