// HTTP client for the study service. All requests carry the bearer token
// once one is set; error envelopes are normalized into ApiError.

import type { SurveyDoc } from "./sse.js";

export interface ErrorEnvelope {
  kind?: string;
  message?: string;
  reason?: string;
  data?: Record<string, unknown>;
  issues?: { path: string; severity: string; message: string }[];
}

export class ApiError extends Error {
  status: number;
  reason?: string;
  error: ErrorEnvelope;

  constructor(status: number, envelope: ErrorEnvelope) {
    super(envelope.message ?? `HTTP ${status}`);
    this.status = status;
    this.reason = envelope.reason;
    this.error = envelope;
  }
}

export interface StepDescriptor {
  index: number;
  kind: string;
  reminder_text: string | null;
  total_steps: number;
  consent_text?: string;
  consent_checkboxes?: string[];
  survey?: SurveyDoc | null;
  typology?: { categories: { category_id: string; label: string; description: string }[] };
  task?: { task_id: string; modality: string; title: string; description_markdown: string };
  notes_enabled?: boolean;
  min_interactions?: number;
  note?: string;
  turns?: TurnView[];
  queries?: QueryView[];
}

export interface TurnView {
  turn_id: string;
  turn_index: number;
  prompt_text: string;
  response_text: string;
  completed: boolean;
  turn_rating: number | null;
}

export interface QueryView {
  query_id: string;
  query_text: string;
  result_count: number;
  serp: { rank: number; title: string; url: string; snippet: string }[];
  clicks: { url: string; rank: number }[];
}

export interface ParticipantState {
  study: { study_id: string; title: string };
  session: {
    session_id: string;
    participant_id: string;
    cursor: number;
    total_steps: number;
    completed_at: number | null;
    counts: { prompts: number; responses: number; queries: number };
  };
  step: StepDescriptor | null;
  pending_popups: import("./sse.js").PopupDescriptor[];
}

export type AnswerValue = number | string | string[];

export class ApiClient {
  baseUrl: string;
  token: string | null = null;

  constructor(baseUrl = "") {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  headers(): Record<string, string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let envelope: ErrorEnvelope = {};
      try {
        envelope = ((await response.json()) as { error?: ErrorEnvelope }).error ?? {};
      } catch {
        envelope = { message: response.statusText };
      }
      throw new ApiError(response.status, envelope);
    }
    return (await response.json()) as T;
  }

  get<T>(path: string): Promise<T> {
    return this.request<T>("GET", path);
  }

  post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>("POST", path, body);
  }

  put<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>("PUT", path, body);
  }

  // -- health / auth -------------------------------------------------------

  health(): Promise<{ status: string; admin_setup_required: boolean; test_mode: boolean }> {
    return this.get("/api/health");
  }

  async setup(username: string, password: string): Promise<string> {
    const body = await this.post<{ token: string }>("/api/setup", { username, password });
    this.token = body.token;
    return body.token;
  }

  async adminLogin(username: string, password: string): Promise<string> {
    const body = await this.post<{ token: string }>("/api/admin/login", { username, password });
    this.token = body.token;
    return body.token;
  }

  // -- participant ----------------------------------------------------------

  async register(inviteCode: string, externalLabel = ""): Promise<{
    participant_id: string;
    session_id: string;
    study_id: string;
    token: string;
  }> {
    const body = await this.post<{
      participant_id: string;
      session_id: string;
      study_id: string;
      token: string;
    }>("/api/participant/register", { invite_code: inviteCode, external_label: externalLabel });
    this.token = body.token;
    return body;
  }

  state(): Promise<ParticipantState> {
    return this.get("/api/participant/state");
  }

  consent(checked: boolean[]): Promise<unknown> {
    return this.post("/api/participant/consent", { checked });
  }

  survey(answers: Record<string, AnswerValue>): Promise<unknown> {
    return this.post("/api/participant/survey", { answers });
  }

  /** Open the chat stream; the caller consumes SSE frames from the body. */
  async chatStream(
    prompt: string,
    typing: { typing_start_ms: number | null; typing_end_ms: number | null },
  ): Promise<ReadableStream<Uint8Array>> {
    const response = await fetch(this.baseUrl + "/api/participant/chat", {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify({ prompt, ...typing, client_ts: Date.now() }),
    });
    if (!response.ok || response.body === null) {
      let envelope: ErrorEnvelope = {};
      try {
        envelope = ((await response.json()) as { error?: ErrorEnvelope }).error ?? {};
      } catch {
        envelope = { message: response.statusText };
      }
      throw new ApiError(response.status, envelope);
    }
    return response.body;
  }

  search(
    query: string,
    typing: { typing_start_ms: number | null; typing_end_ms: number | null },
  ): Promise<{
    query_id: string;
    results: { rank: number; title: string; url: string; snippet: string }[];
    popups: import("./sse.js").PopupDescriptor[];
  }> {
    return this.post("/api/participant/search", { query, ...typing, client_ts: Date.now() });
  }

  click(queryId: string, url: string, rank: number): Promise<{ accepted: boolean }> {
    return this.post("/api/participant/click", {
      query_id: queryId,
      url,
      rank,
      client_ts: Date.now(),
    });
  }

  note(text: string): Promise<unknown> {
    return this.post("/api/participant/note", { text, client_ts: Date.now() });
  }

  rateTurn(turnId: string, rating: number): Promise<unknown> {
    return this.post("/api/participant/rate-turn", { turn_id: turnId, rating });
  }

  rateTrajectory(rating: number): Promise<unknown> {
    return this.post("/api/participant/rate-trajectory", { rating });
  }

  submitTask(finalNote?: string): Promise<unknown> {
    return this.post("/api/participant/submit-task", finalNote ? { final_note: finalNote } : {});
  }

  answerPopup(instanceId: string, answers: Record<string, AnswerValue>): Promise<unknown> {
    return this.post("/api/participant/popup", { instance_id: instanceId, answers });
  }

  // -- admin ------------------------------------------------------------------

  listStudies(): Promise<{ studies: { study_id: string; title: string }[] }> {
    return this.get("/api/admin/studies");
  }

  getStudy(studyId: string): Promise<{
    config: Record<string, unknown>;
    invite_code: string;
    version: number;
    issues: { path: string; message: string }[];
  }> {
    return this.get(`/api/admin/studies/${studyId}`);
  }

  createStudy(config: Record<string, unknown>): Promise<{
    study_id: string;
    invite_code: string;
    issues: { path: string; message: string }[];
  }> {
    return this.post("/api/admin/studies", config);
  }

  updateStudy(studyId: string, config: Record<string, unknown>): Promise<{ issues: { path: string; message: string }[] }> {
    return this.put(`/api/admin/studies/${studyId}`, config);
  }

  updateFlow(studyId: string, flow: unknown[]): Promise<{ issues: { path: string; message: string }[] }> {
    return this.put(`/api/admin/studies/${studyId}/flow`, { flow });
  }

  upsertSurvey(studyId: string, key: string, instrument: unknown): Promise<{ issues: { path: string; message: string }[] }> {
    return this.put(`/api/admin/studies/${studyId}/surveys/${key}`, instrument);
  }

  async exportSurveyJson(studyId: string, key: string): Promise<string> {
    const response = await fetch(
      `${this.baseUrl}/api/admin/studies/${studyId}/surveys/${key}/export`,
      { headers: this.headers() },
    );
    if (!response.ok) throw new ApiError(response.status, {});
    return await response.text();
  }

  async importSurveyJson(studyId: string, key: string, raw: string): Promise<unknown> {
    const response = await fetch(
      `${this.baseUrl}/api/admin/studies/${studyId}/surveys/${key}/import`,
      { method: "POST", headers: this.headers(), body: raw },
    );
    if (!response.ok) {
      const envelope = ((await response.json()) as { error?: ErrorEnvelope }).error ?? {};
      throw new ApiError(response.status, envelope);
    }
    return await response.json();
  }

  updateTypology(studyId: string, typology: unknown): Promise<{ issues: unknown[] }> {
    return this.put(`/api/admin/studies/${studyId}/typology`, typology);
  }

  updateTriggers(studyId: string, rules: unknown[]): Promise<{ issues: { path: string; message: string }[] }> {
    return this.put(`/api/admin/studies/${studyId}/triggers`, { trigger_rules: rules });
  }

  setCredentials(ref: string, providerConfig: unknown, apiKeys: Record<string, string>): Promise<unknown> {
    return this.put(`/api/admin/credentials/${ref}`, {
      provider_config: providerConfig,
      api_keys: apiKeys,
    });
  }

  verifyCredentials(ref: string): Promise<{ llm: string; search: string }> {
    return this.post(`/api/admin/credentials/${ref}/verify`);
  }

  listResponses(studyId: string): Promise<{ sessions: Record<string, unknown>[] }> {
    return this.get(`/api/admin/studies/${studyId}/responses`);
  }

  async exportZip(studyId: string): Promise<Blob> {
    const response = await fetch(`${this.baseUrl}/api/admin/studies/${studyId}/export`, {
      headers: this.headers(),
    });
    if (!response.ok) throw new ApiError(response.status, {});
    return await response.blob();
  }

  exportZipUrl(studyId: string): string {
    return `${this.baseUrl}/api/admin/studies/${studyId}/export`;
  }
}
