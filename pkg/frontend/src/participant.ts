// Participant single-page flow: consent, questionnaires, chat or search
// task with notes sidebar, in-situ popups, ratings, and completion.

import { ApiClient, ApiError, ParticipantState, StepDescriptor } from "./api.js";
import { clear, h } from "./dom.js";
import { renderMarkdown } from "./markdown.js";
import { PopupQueue } from "./popups.js";
import type { PopupDescriptor } from "./sse.js";
import { parseSseStream } from "./sse.js";
import { buildSurveyForm } from "./survey.js";
import { TypingTracker } from "./typing.js";

export class ParticipantApp {
  root: HTMLElement;
  api: ApiClient;
  popups = new PopupQueue();
  private typing = new TypingTracker();
  private noteTimer: number | null = null;
  private streaming = false;

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
  }

  async start(): Promise<void> {
    const saved = sessionStorage.getItem("participant_token");
    if (saved) {
      this.api.token = saved;
      try {
        await this.refresh();
        return;
      } catch {
        this.api.token = null;
        sessionStorage.removeItem("participant_token");
      }
    }
    this.renderJoin();
  }

  private renderJoin(): void {
    clear(this.root);
    const invite = h("input", { type: "text", placeholder: "Invite code", id: "invite-code" }) as HTMLInputElement;
    const label = h("input", { type: "text", placeholder: "Recruitment id (optional)", id: "external-label" }) as HTMLInputElement;
    const error = h("p", { class: "error", id: "join-error" });
    const join = async () => {
      try {
        await this.api.register(invite.value.trim(), label.value.trim());
        sessionStorage.setItem("participant_token", this.api.token ?? "");
        await this.refresh();
      } catch (err) {
        error.textContent = err instanceof ApiError ? err.message : String(err);
      }
    };
    this.root.append(
      h(
        "div",
        { class: "join-card" },
        h("h2", {}, "Join a study"),
        invite,
        label,
        h("button", { id: "join-button", onClick: join }, "Join"),
        error,
      ),
    );
  }

  async refresh(): Promise<void> {
    const state = await this.api.state();
    this.popups.enqueue(state.pending_popups);
    this.render(state);
  }

  private render(state: ParticipantState): void {
    clear(this.root);
    const step = state.step;
    this.root.append(
      h(
        "header",
        { class: "topbar" },
        h("strong", {}, state.study.title || state.study.study_id),
        h(
          "span",
          { class: "progress", id: "progress" },
          step ? `Step ${state.session.cursor + 1} of ${state.session.total_steps}` : "Complete",
        ),
      ),
    );
    if (step === null) {
      this.root.append(
        h(
          "div",
          { class: "card done-card" },
          h("h2", {}, "All done"),
          h("p", {}, "Thank you for participating. You may close this window."),
        ),
      );
      return;
    }
    if (step.reminder_text) {
      this.root.append(h("div", { class: "reminder", id: "reminder" }, step.reminder_text));
    }
    if (step.kind === "consent") {
      this.renderConsent(step);
    } else if (step.kind === "main_task") {
      this.renderTask(state, step);
    } else {
      this.renderSurvey(step);
    }
    this.maybeShowPopup();
  }

  private renderConsent(step: StepDescriptor): void {
    const boxes: HTMLInputElement[] = [];
    const list = h("div", { class: "consent-boxes" });
    for (const text of step.consent_checkboxes ?? []) {
      const box = h("input", { type: "checkbox", class: "consent-box" }) as HTMLInputElement;
      boxes.push(box);
      list.append(h("label", { class: "consent-line" }, box, text));
    }
    const error = h("p", { class: "error" });
    const card = h(
      "div",
      { class: "card consent-card" },
      h("div", { class: "markdown", id: "consent-text" }),
      list,
      h(
        "button",
        {
          id: "consent-submit",
          onClick: async () => {
            try {
              await this.api.consent(boxes.map((b) => b.checked));
              await this.refresh();
            } catch (err) {
              error.textContent = err instanceof ApiError ? err.message : String(err);
            }
          },
        },
        "I agree, continue",
      ),
      error,
    );
    (card.querySelector("#consent-text") as HTMLElement).innerHTML = renderMarkdown(step.consent_text ?? "");
    this.root.append(card);
  }

  private renderSurvey(step: StepDescriptor): void {
    if (!step.survey) return;
    const labels = new Map(
      (step.typology?.categories ?? []).map((c) => [c.category_id, c.label]),
    );
    // typology categories are stored by id; show their labels
    const instrument = {
      ...step.survey,
      questions: step.survey.questions.map((q) =>
        q.question_id === "__intentions__"
          ? {
              ...q,
              answer_type: {
                ...q.answer_type,
                options: q.answer_type.options ?? [],
              },
            }
          : q,
      ),
    };
    const form = buildSurveyForm(instrument);
    if (labels.size) {
      form.element
        .querySelectorAll<HTMLLabelElement>('fieldset[data-qid="__intentions__"] label.choice')
        .forEach((node) => {
          const input = node.querySelector("input");
          if (input && labels.has(input.value)) {
            node.lastChild!.textContent = labels.get(input.value)!;
          }
        });
    }
    const error = h("p", { class: "error", id: "survey-error" });
    this.root.append(
      h(
        "div",
        { class: "card survey-card" },
        form.element,
        h(
          "button",
          {
            id: "survey-submit",
            onClick: async () => {
              const { answers, missing } = form.collect();
              if (missing.length) {
                error.textContent = `Please answer the required questions: ${missing.join(", ")}`;
                return;
              }
              try {
                await this.api.survey(answers);
                await this.refresh();
              } catch (err) {
                error.textContent = err instanceof ApiError ? err.message : String(err);
              }
            },
          },
          "Submit answers",
        ),
        error,
      ),
    );
  }

  // -- main task -------------------------------------------------------------

  private renderTask(state: ParticipantState, step: StepDescriptor): void {
    const layout = h("div", { class: "task-layout" });
    const description = h("aside", { class: "panel task-panel" }, h("h3", {}, step.task?.title ?? "Task"));
    const body = h("div", { class: "markdown", id: "task-description" });
    body.innerHTML = renderMarkdown(step.task?.description_markdown ?? "");
    description.append(body);
    const gate = h(
      "p",
      { class: "gate-hint", id: "gate-hint" },
      this.gateHint(state, step),
    );
    const error = h("p", { class: "error", id: "task-error" });
    description.append(
      gate,
      h("label", { class: "trajectory" }, "Overall rating: ", this.trajectorySelect()),
      h(
        "button",
        {
          id: "submit-task",
          onClick: async () => {
            try {
              await this.api.submitTask();
              await this.refresh();
            } catch (err) {
              if (err instanceof ApiError && err.reason === "pending_trigger") {
                const popups = (err.error.data?.["popups"] ?? []) as PopupDescriptor[];
                this.popups.enqueue(popups);
                this.maybeShowPopup();
                error.textContent = "Please answer the popup survey before submitting.";
              } else {
                error.textContent = err instanceof ApiError ? err.message : String(err);
              }
            }
          },
        },
        "Submit task",
      ),
      error,
    );
    layout.append(description);

    const center =
      step.task?.modality === "chat" ? this.chatPanel(state, step) : this.searchPanel(step);
    layout.append(center);

    if (step.notes_enabled) {
      layout.append(this.notesPanel(step));
    }
    this.root.append(layout);
  }

  private gateHint(state: ParticipantState, step: StepDescriptor): string {
    const need = step.min_interactions ?? 0;
    if (!need) return "";
    const count =
      step.task?.modality === "chat" ? state.session.counts.prompts : state.session.counts.queries;
    const noun = step.task?.modality === "chat" ? "prompts" : "queries";
    return `${count}/${need} required ${noun}`;
  }

  private trajectorySelect(): HTMLElement {
    const select = h("select", { id: "trajectory-rating" }) as HTMLSelectElement;
    select.append(h("option", { value: "" }, "rate 1-5"));
    for (let value = 1; value <= 5; value++) {
      select.append(h("option", { value: String(value) }, String(value)));
    }
    select.addEventListener("change", async () => {
      if (select.value) await this.api.rateTrajectory(Number(select.value));
    });
    return select;
  }

  private chatPanel(state: ParticipantState, step: StepDescriptor): HTMLElement {
    const transcript = h("div", { class: "transcript", id: "transcript" });
    for (const turn of step.turns ?? []) {
      transcript.append(this.turnNode(turn.turn_id, turn.prompt_text, turn.response_text, turn.turn_rating));
    }
    const input = h("textarea", {
      id: "chat-input",
      placeholder: "Type a message",
      rows: "3",
    }) as HTMLTextAreaElement;
    input.addEventListener("keydown", () => this.typing.noteKeystroke());
    const send = h(
      "button",
      {
        id: "chat-send",
        onClick: () => void this.sendPrompt(input, transcript),
      },
      "Send",
    );
    return h(
      "section",
      { class: "panel center-panel chat-panel" },
      transcript,
      h("div", { class: "composer" }, input, send),
    );
  }

  private turnNode(
    turnId: string,
    prompt: string,
    response: string,
    rating: number | null,
  ): HTMLElement {
    const responseBody = h("div", { class: "markdown response-text" });
    responseBody.innerHTML = renderMarkdown(response);
    const stars = h("span", { class: "turn-rating" });
    const node = h(
      "div",
      { class: "turn", dataset: { turnId } },
      h("div", { class: "bubble prompt" }, prompt),
      h("div", { class: "bubble response" }, responseBody, stars),
    );
    for (let value = 1; value <= 5; value++) {
      stars.append(
        h(
          "button",
          {
            class: "star" + (rating !== null && value <= rating ? " lit" : ""),
            dataset: { rating: String(value) },
            onClick: async () => {
              // the id is assigned by the final stream frame; read it late
              const id = node.dataset.turnId;
              if (!id || id === "pending") return;
              await this.api.rateTurn(id, value);
              stars.querySelectorAll(".star").forEach((star, index) => {
                star.classList.toggle("lit", index < value);
              });
            },
          },
          "★",
        ),
      );
    }
    return node;
  }

  private async sendPrompt(input: HTMLTextAreaElement, transcript: HTMLElement): Promise<void> {
    const prompt = input.value.trim();
    if (!prompt || this.streaming) return;
    this.streaming = true;
    input.value = "";
    const typing = this.typing.snapshot();
    this.typing.reset();
    const node = this.turnNode("pending", prompt, "", null);
    transcript.append(node);
    const responseBody = node.querySelector(".response-text") as HTMLElement;
    let text = "";
    try {
      const stream = await this.api.chatStream(prompt, typing);
      for await (const frame of parseSseStream(stream)) {
        if (frame.final) {
          node.dataset.turnId = frame.turn_id ?? "";
          this.popups.enqueue(frame.popups);
          if (frame.error) {
            responseBody.append(h("p", { class: "error" }, `Stream interrupted: ${frame.error}`));
          }
        } else if (frame.text !== undefined) {
          text += frame.text;
          responseBody.innerHTML = renderMarkdown(text);
        }
        transcript.scrollTop = transcript.scrollHeight;
      }
    } catch (err) {
      responseBody.append(h("p", { class: "error" }, err instanceof Error ? err.message : String(err)));
    } finally {
      this.streaming = false;
    }
    await this.refreshGateHint();
    this.maybeShowPopup();
  }

  private async refreshGateHint(): Promise<void> {
    const hint = this.root.querySelector("#gate-hint");
    if (!hint) return;
    const state = await this.api.state();
    if (state.step) hint.textContent = this.gateHint(state, state.step);
    this.popups.enqueue(state.pending_popups);
  }

  private searchPanel(step: StepDescriptor): HTMLElement {
    const results = h("div", { class: "serp", id: "serp" });
    const input = h("input", {
      id: "search-input",
      type: "text",
      placeholder: "Search the web",
    }) as HTMLInputElement;
    input.addEventListener("keydown", () => this.typing.noteKeystroke());
    const runSearch = async () => {
      const query = input.value.trim();
      if (!query) return;
      const typing = this.typing.snapshot();
      this.typing.reset();
      const page = await this.api.search(query, typing);
      this.popups.enqueue(page.popups);
      clear(results);
      if (!page.results.length) {
        results.append(h("p", { class: "empty" }, "No results."));
      }
      for (const item of page.results) {
        const link = h(
          "a",
          {
            href: item.url,
            class: "serp-title",
            onClick: async (event: Event) => {
              // log-before-navigate: the click report must land first
              event.preventDefault();
              await this.api.click(page.query_id, item.url, item.rank);
              window.open(item.url, "_blank", "noopener");
            },
          },
          `${item.rank}. ${item.title}`,
        );
        results.append(
          h(
            "div",
            { class: "serp-item", dataset: { rank: String(item.rank) } },
            link,
            h("div", { class: "serp-url" }, item.url),
            h("div", { class: "serp-snippet" }, item.snippet),
          ),
        );
      }
      await this.refreshGateHint();
      this.maybeShowPopup();
    };
    input.addEventListener("keyup", (event) => {
      if ((event as KeyboardEvent).key === "Enter") void runSearch();
    });
    return h(
      "section",
      { class: "panel center-panel search-panel" },
      h("div", { class: "searchbar" }, input, h("button", { id: "search-go", onClick: runSearch }, "Search")),
      results,
    );
  }

  private notesPanel(step: StepDescriptor): HTMLElement {
    const area = h("textarea", {
      id: "notes-area",
      placeholder: "Your notes",
    }) as HTMLTextAreaElement;
    area.value = step.note ?? "";
    const status = h("span", { class: "note-status", id: "note-status" });
    area.addEventListener("input", () => {
      if (this.noteTimer !== null) window.clearTimeout(this.noteTimer);
      this.noteTimer = window.setTimeout(async () => {
        await this.api.note(area.value);
        status.textContent = "saved";
        window.setTimeout(() => (status.textContent = ""), 1200);
      }, 600);
    });
    return h(
      "aside",
      { class: "panel notes-panel" },
      h("h3", {}, "Notes ", status),
      area,
    );
  }

  // -- popups -----------------------------------------------------------------

  maybeShowPopup(): void {
    const existing = this.root.querySelector(".popup-overlay");
    if (existing) return;
    const popup = this.popups.current();
    if (!popup || !popup.survey) return;
    const form = buildSurveyForm(popup.survey);
    const error = h("p", { class: "error" });
    const overlay = h(
      "div",
      { class: "popup-overlay" },
      h(
        "div",
        { class: "popup-card", dataset: { instanceId: popup.instance_id } },
        form.element,
        h(
          "button",
          {
            id: "popup-submit",
            onClick: async () => {
              const { answers, missing } = form.collect();
              if (missing.length) {
                error.textContent = "Please answer the required questions.";
                return;
              }
              try {
                await this.api.answerPopup(popup.instance_id, answers);
                this.popups.resolve(popup.instance_id);
                overlay.remove();
                this.maybeShowPopup(); // drain strictly FIFO
              } catch (err) {
                error.textContent = err instanceof ApiError ? err.message : String(err);
              }
            },
          },
          "Submit",
        ),
        error,
      ),
    );
    this.root.append(overlay);
  }
}
