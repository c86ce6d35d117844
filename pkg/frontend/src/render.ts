// Pure DOM builders. Everything shown comes verbatim from an API field; the
// only client-side formatting is number rounding and timestamps.

import type { QueryResponse, SeeSayClient, TimelineEntry } from "./api.js";

export interface TraceData {
  utterance: string;
  sessionId: string;
  response: QueryResponse;
}

export function routeBadge(route: string): HTMLSpanElement {
  const badge = document.createElement("span");
  badge.className = `badge route-${route.toLowerCase()}`;
  badge.textContent = route;
  return badge;
}

export function formatTimestamp(timestampMs: number): string {
  return new Date(timestampMs).toLocaleTimeString();
}

export function renderTimelineEntry(
  entry: TimelineEntry,
  client: SeeSayClient,
): HTMLElement {
  const article = document.createElement("article");
  article.className = "timeline-entry" + (entry.pending ? " pending" : "");
  article.dataset.id = String(entry.id);

  if (entry.image) {
    const img = document.createElement("img");
    img.className = "thumb";
    img.src = client.imageUrl(entry.id);
    img.alt = entry.description;
    img.loading = "lazy";
    article.appendChild(img);
  }

  const body = document.createElement("div");
  body.className = "entry-body";

  const header = document.createElement("header");
  const idLabel = document.createElement("span");
  idLabel.className = "entry-id";
  idLabel.textContent = `#${entry.id}`;
  const timeLabel = document.createElement("time");
  timeLabel.textContent = formatTimestamp(entry.timestamp_ms);
  header.append(idLabel, timeLabel);
  if (entry.pending) {
    const pending = document.createElement("span");
    pending.className = "pending-flag";
    pending.textContent = "description pending";
    header.appendChild(pending);
  }
  body.appendChild(header);

  const description = document.createElement("p");
  description.className = "description";
  description.textContent = entry.description;
  body.appendChild(description);

  if (entry.annotations.length > 0) {
    const chips = document.createElement("ul");
    chips.className = "annotations";
    for (const annotation of entry.annotations) {
      const chip = document.createElement("li");
      chip.className = "annotation-chip";
      chip.textContent = annotation;
      chips.appendChild(chip);
    }
    body.appendChild(chips);
  }

  article.appendChild(body);
  return article;
}

export function renderEmptyState(message: string): HTMLElement {
  const div = document.createElement("div");
  div.className = "empty-state";
  div.textContent = message;
  return div;
}

export function renderTraceCard(data: TraceData, client: SeeSayClient): HTMLElement {
  const { response } = data;
  const card = document.createElement("article");
  card.className = "trace-card";
  card.dataset.answerId = String(response.answer_id);

  const header = document.createElement("header");
  header.appendChild(routeBadge(response.route));
  const utterance = document.createElement("span");
  utterance.className = "utterance";
  utterance.textContent = data.utterance;
  header.appendChild(utterance);
  const session = document.createElement("span");
  session.className = "session";
  session.textContent = data.sessionId;
  header.appendChild(session);
  card.appendChild(header);

  const answer = document.createElement("p");
  answer.className = "answer";
  answer.textContent = response.answer_text;
  card.appendChild(answer);

  const meta = document.createElement("ul");
  meta.className = "trace-meta";
  if (response.retrieved_id !== null && response.retrieved_id !== undefined) {
    const item = document.createElement("li");
    const link = document.createElement("a");
    link.className = "retrieved-link";
    link.href = `#observation-${response.retrieved_id}`;
    link.dataset.observationId = String(response.retrieved_id);
    link.textContent = `observation #${response.retrieved_id}`;
    item.append("retrieved ", link);
    if (response.similarity !== null && response.similarity !== undefined) {
      const similarity = document.createElement("span");
      similarity.className = "similarity";
      similarity.textContent = ` (similarity ${response.similarity.toFixed(3)})`;
      item.appendChild(similarity);
    }
    meta.appendChild(item);
  }
  const rounds = document.createElement("li");
  rounds.className = "llm-rounds";
  rounds.textContent = `${response.llm_rounds} LLM round(s)`;
  meta.appendChild(rounds);
  for (const [stage, ms] of Object.entries(response.timings_ms ?? {})) {
    const item = document.createElement("li");
    item.className = "timing";
    item.textContent = `${stage.replace(/_ms$/, "")}: ${ms.toFixed(1)} ms`;
    meta.appendChild(item);
  }
  for (const note of response.notes ?? []) {
    const item = document.createElement("li");
    item.className = "note";
    item.textContent = note;
    meta.appendChild(item);
  }
  card.appendChild(meta);

  if (response.audio) {
    const audio = document.createElement("audio");
    audio.controls = true;
    audio.src = client.audioUrl(response.answer_id);
    card.appendChild(audio);
  }
  return card;
}

export function renderError(message: string): HTMLElement {
  const div = document.createElement("div");
  div.className = "error-banner";
  div.setAttribute("role", "alert");
  div.textContent = message;
  return div;
}
