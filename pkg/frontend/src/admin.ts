// Administrator dashboard: study settings, flow management with
// drag-and-drop reorder, four-mode survey editor, typology, trigger
// rules, provider credentials, response browsing, and export download.

import { ApiClient, ApiError } from "./api.js";
import { clear, h } from "./dom.js";
import { dragPermutation, moveItem, reorderFlowSteps } from "./reorder.js";
import type { SurveyDoc } from "./sse.js";

type Config = Record<string, any>;

const SURVEY_MODES = ["view", "reorder", "form", "json"] as const;
type SurveyMode = (typeof SURVEY_MODES)[number];

export class AdminApp {
  root: HTMLElement;
  api: ApiClient;
  studyId: string | null = null;
  config: Config | null = null;
  inviteCode = "";
  surveyMode: SurveyMode = "view";
  surveyKey = "background";
  activeTab = "settings";

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
  }

  async start(): Promise<void> {
    const health = await this.api.health();
    const saved = sessionStorage.getItem("admin_token");
    if (saved && !health.admin_setup_required) {
      this.api.token = saved;
      try {
        await this.showStudies();
        return;
      } catch {
        this.api.token = null;
        sessionStorage.removeItem("admin_token");
      }
    }
    this.renderLogin(health.admin_setup_required);
  }

  private renderLogin(setupRequired: boolean): void {
    clear(this.root);
    const username = h("input", { type: "text", placeholder: "Username", id: "admin-user" }) as HTMLInputElement;
    const password = h("input", { type: "password", placeholder: "Password", id: "admin-pass" }) as HTMLInputElement;
    const error = h("p", { class: "error" });
    const submit = async () => {
      try {
        if (setupRequired) {
          await this.api.setup(username.value, password.value);
        } else {
          await this.api.adminLogin(username.value, password.value);
        }
        sessionStorage.setItem("admin_token", this.api.token ?? "");
        await this.showStudies();
      } catch (err) {
        error.textContent = err instanceof ApiError ? err.message : String(err);
      }
    };
    this.root.append(
      h(
        "div",
        { class: "join-card" },
        h("h2", {}, setupRequired ? "Create the administrator account" : "Administrator sign in"),
        username,
        password,
        h("button", { id: "admin-login", onClick: submit }, setupRequired ? "Create account" : "Sign in"),
        error,
      ),
    );
  }

  async showStudies(): Promise<void> {
    const { studies } = await this.api.listStudies();
    clear(this.root);
    const list = h("div", { class: "study-list" });
    for (const study of studies) {
      list.append(
        h(
          "button",
          { class: "study-link", onClick: () => void this.openStudy(study.study_id) },
          `${study.title || study.study_id} (${study.study_id})`,
        ),
      );
    }
    const newId = h("input", { type: "text", placeholder: "new-study-id", id: "new-study-id" }) as HTMLInputElement;
    this.root.append(
      h("header", { class: "topbar" }, h("strong", {}, "Studies")),
      list,
      h(
        "div",
        { class: "card" },
        newId,
        h(
          "button",
          {
            id: "create-study",
            onClick: async () => {
              const id = newId.value.trim();
              if (!id) return;
              await this.api.createStudy(emptyStudy(id));
              await this.openStudy(id);
            },
          },
          "Create study",
        ),
      ),
    );
  }

  async openStudy(studyId: string): Promise<void> {
    const body = await this.api.getStudy(studyId);
    this.studyId = studyId;
    this.config = body.config as Config;
    this.inviteCode = body.invite_code;
    this.renderStudy(body.issues);
  }

  private async saveConfig(): Promise<void> {
    if (!this.studyId || !this.config) return;
    const { issues } = await this.api.updateStudy(this.studyId, this.config);
    this.renderStudy(issues);
  }

  private renderStudy(issues: { path: string; message: string }[]): void {
    clear(this.root);
    const tabs = [
      ["settings", "Settings"],
      ["flow", "Study flow"],
      ["tasks", "Tasks"],
      ["surveys", "Surveys"],
      ["typology", "Typology"],
      ["triggers", "In-situ surveys"],
      ["credentials", "API settings"],
      ["responses", "Responses"],
      ["export", "Export"],
    ] as const;
    this.root.append(
      h(
        "header",
        { class: "topbar" },
        h("button", { class: "back", onClick: () => void this.showStudies() }, "← studies"),
        h("strong", {}, this.studyId ?? ""),
        h("span", { class: "invite", id: "invite-code" }, `invite code: ${this.inviteCode}`),
      ),
      h(
        "nav",
        { class: "tabs" },
        tabs.map(([key, label]) =>
          h(
            "button",
            {
              class: "tab" + (this.activeTab === key ? " active" : ""),
              dataset: { tab: key },
              onClick: () => {
                this.activeTab = key;
                this.renderStudy(issues);
              },
            },
            label,
          ),
        ),
      ),
    );
    if (issues.length) {
      this.root.append(
        h(
          "div",
          { class: "issues", id: "issues" },
          issues.map((issue) => h("p", { class: "issue" }, `${issue.path}: ${issue.message}`)),
        ),
      );
    }
    const body = h("main", { class: "tab-body" });
    this.root.append(body);
    const render = {
      settings: () => this.renderSettings(body),
      flow: () => this.renderFlow(body),
      tasks: () => this.renderTasks(body),
      surveys: () => this.renderSurveys(body),
      typology: () => this.renderTypology(body),
      triggers: () => this.renderTriggers(body),
      credentials: () => this.renderCredentials(body),
      responses: () => void this.renderResponses(body),
      export: () => this.renderExport(body),
    }[this.activeTab];
    render?.();
  }

  // -- settings ---------------------------------------------------------------

  private renderSettings(body: HTMLElement): void {
    const config = this.config!;
    const settings = config.settings;
    const title = h("input", { type: "text", value: config.title ?? "", id: "study-title" }) as HTMLInputElement;
    const minInteractions = h("input", {
      type: "number", min: "0", value: String(settings.min_interactions ?? 0), id: "min-interactions",
    }) as HTMLInputElement;
    const notes = h("input", { type: "checkbox", id: "notes-toggle" }) as HTMLInputElement;
    notes.checked = Boolean(settings.notes_enabled);
    const policy = h("select", { id: "attention-policy" }) as HTMLSelectElement;
    for (const value of ["record_only", "block_advance"]) {
      const option = h("option", { value }, value) as HTMLOptionElement;
      option.selected = settings.attention_fail_policy === value;
      policy.append(option);
    }
    const taskOrder = h("input", {
      type: "text", value: (settings.task_order ?? []).join(","), id: "task-order",
    }) as HTMLInputElement;
    const consent = h("textarea", { rows: "6", id: "consent-text" }) as HTMLTextAreaElement;
    consent.value = config.consent_text ?? "";
    const checkboxes = h("textarea", { rows: "3", id: "consent-checkboxes" }) as HTMLTextAreaElement;
    checkboxes.value = (config.consent_checkboxes ?? []).join("\n");
    body.append(
      h(
        "div",
        { class: "card form-grid" },
        h("label", {}, "Title", title),
        h("label", {}, "Minimum interactions", minInteractions),
        h("label", {}, "Notes sidebar", notes),
        h("label", {}, "Attention-check policy", policy),
        h("label", {}, "Task order (comma separated)", taskOrder),
        h("label", {}, "Consent text (markdown)", consent),
        h("label", {}, "Consent checkboxes (one per line)", checkboxes),
        h(
          "button",
          {
            id: "save-settings",
            onClick: async () => {
              config.title = title.value;
              config.settings = {
                ...settings,
                min_interactions: Number(minInteractions.value),
                notes_enabled: notes.checked,
                attention_fail_policy: policy.value,
                task_order: taskOrder.value.split(",").map((s) => s.trim()).filter(Boolean),
              };
              config.consent_text = consent.value;
              config.consent_checkboxes = checkboxes.value.split("\n").filter((line) => line.trim());
              await this.saveConfig();
            },
          },
          "Save settings",
        ),
      ),
    );
  }

  // -- flow ----------------------------------------------------------------------

  private renderFlow(body: HTMLElement): void {
    const config = this.config!;
    const steps = (config.flow as Config[]).slice().sort((a, b) => a.order - b.order);
    const list = h("div", { class: "flow-list", id: "flow-list" });
    steps.forEach((step, index) => {
      const enabled = h("input", { type: "checkbox", class: "step-enabled" }) as HTMLInputElement;
      enabled.checked = Boolean(step.enabled);
      enabled.addEventListener("change", async () => {
        step.enabled = enabled.checked;
        config.flow = steps;
        await this.saveConfig();
      });
      const reminder = h("input", {
        type: "text", class: "step-reminder", placeholder: "reminder text",
        value: step.reminder_text ?? "",
      }) as HTMLInputElement;
      reminder.addEventListener("change", async () => {
        step.reminder_text = reminder.value || null;
        config.flow = steps;
        await this.saveConfig();
      });
      const row = h(
        "div",
        { class: "flow-step", draggable: "true", dataset: { index: String(index), kind: step.kind } },
        h("span", { class: "grip" }, "☰"),
        h("span", { class: "step-kind" }, `${index + 1}. ${step.kind}`),
        step.task_id ? h("span", { class: "step-task" }, step.task_id) : null,
        enabled,
        reminder,
      );
      row.addEventListener("dragstart", (event) => {
        (event as DragEvent).dataTransfer?.setData("text/plain", String(index));
      });
      row.addEventListener("dragover", (event) => event.preventDefault());
      row.addEventListener("drop", (event) => {
        event.preventDefault();
        const from = Number((event as DragEvent).dataTransfer?.getData("text/plain"));
        void this.applyFlowMove(from, index);
      });
      list.append(row);
    });
    body.append(
      h("div", { class: "card" }, h("p", { class: "hint" }, "Drag steps to reorder; untick to disable."), list),
    );
  }

  async applyFlowMove(fromIndex: number, toIndex: number): Promise<void> {
    const config = this.config!;
    const reordered = reorderFlowSteps(config.flow as { order: number }[], fromIndex, toIndex);
    const { issues } = await this.api.updateFlow(this.studyId!, reordered);
    const body = await this.api.getStudy(this.studyId!);
    this.config = body.config as Config;
    this.renderStudy(issues);
  }

  // -- tasks ------------------------------------------------------------------------

  private renderTasks(body: HTMLElement): void {
    const config = this.config!;
    const card = h("div", { class: "card" });
    for (const task of config.tasks as Config[]) {
      const description = h("textarea", { rows: "4", class: "task-desc" }) as HTMLTextAreaElement;
      description.value = task.description_markdown ?? "";
      description.addEventListener("change", async () => {
        task.description_markdown = description.value;
        await this.saveConfig();
      });
      card.append(
        h(
          "fieldset",
          { class: "task-editor", dataset: { taskId: task.task_id } },
          h("legend", {}, `${task.task_id} (${task.modality})`),
          description,
        ),
      );
    }
    const newId = h("input", { type: "text", placeholder: "task id", id: "new-task-id" }) as HTMLInputElement;
    const modality = h("select", { id: "new-task-modality" }) as HTMLSelectElement;
    modality.append(h("option", { value: "chat" }, "chat"), h("option", { value: "search" }, "search"));
    card.append(
      h(
        "div",
        { class: "row" },
        newId,
        modality,
        h(
          "button",
          {
            id: "add-task",
            onClick: async () => {
              if (!newId.value.trim()) return;
              (config.tasks as Config[]).push({
                task_id: newId.value.trim(),
                modality: modality.value,
                title: newId.value.trim(),
                description_markdown: "Describe the task here.",
              });
              await this.saveConfig();
            },
          },
          "Add task",
        ),
      ),
    );
    body.append(card);
  }

  // -- surveys (view / reorder / form / json) -------------------------------------------

  private currentSurvey(): SurveyDoc | null {
    return ((this.config!.surveys ?? {}) as Record<string, SurveyDoc>)[this.surveyKey] ?? null;
  }

  private renderSurveys(body: HTMLElement): void {
    const config = this.config!;
    const keys = Object.keys(config.surveys ?? {});
    const picker = h("select", { id: "survey-picker" }) as HTMLSelectElement;
    for (const key of keys) {
      const option = h("option", { value: key }, key) as HTMLOptionElement;
      option.selected = key === this.surveyKey;
      picker.append(option);
    }
    picker.addEventListener("change", () => {
      this.surveyKey = picker.value;
      clear(editor);
      this.renderSurveyEditor(editor);
    });
    const modes = h(
      "div",
      { class: "mode-switch" },
      SURVEY_MODES.map((mode) =>
        h(
          "button",
          {
            class: "mode" + (this.surveyMode === mode ? " active" : ""),
            dataset: { mode },
            onClick: () => {
              this.surveyMode = mode;
              clear(editor);
              this.renderSurveyEditor(editor);
            },
          },
          mode,
        ),
      ),
    );
    const editor = h("div", { class: "survey-editor", id: "survey-editor" });
    body.append(h("div", { class: "card" }, h("div", { class: "row" }, picker, modes), editor));
    this.renderSurveyEditor(editor);
  }

  private renderSurveyEditor(editor: HTMLElement): void {
    const survey = this.currentSurvey();
    if (!survey) {
      editor.append(h("p", {}, "No survey under this key."));
      return;
    }
    if (this.surveyMode === "view") {
      const list = h("ol", { class: "question-view" });
      for (const q of survey.questions) {
        const details =
          q.answer_type.kind === "likert"
            ? `likert ${q.answer_type.points} (${q.answer_type.low_anchor} … ${q.answer_type.high_anchor})`
            : q.answer_type.kind === "multiple_choice"
              ? `choice of ${(q.answer_type.options ?? []).join(" / ")}${q.answer_type.allow_multiple ? " (multi)" : ""}`
              : "open-ended";
        list.append(
          h(
            "li",
            { dataset: { qid: q.question_id } },
            h("strong", {}, q.prompt),
            h("span", { class: "qmeta" }, ` [${q.question_id}] ${details}${q.required ? ", required" : ""}${q.attention_check ? ", attention check" : ""}`),
          ),
        );
      }
      editor.append(list);
    } else if (this.surveyMode === "reorder") {
      const list = h("div", { class: "reorder-list", id: "reorder-list" });
      survey.questions.forEach((q, index) => {
        const row = h(
          "div",
          { class: "reorder-row", draggable: "true", dataset: { index: String(index), qid: q.question_id } },
          h("span", { class: "grip" }, "☰"),
          q.prompt,
        );
        row.addEventListener("dragstart", (event) => {
          (event as DragEvent).dataTransfer?.setData("text/plain", String(index));
        });
        row.addEventListener("dragover", (event) => event.preventDefault());
        row.addEventListener("drop", async (event) => {
          event.preventDefault();
          const from = Number((event as DragEvent).dataTransfer?.getData("text/plain"));
          const permutation = dragPermutation(survey.questions.length, from, index);
          const reordered = { ...survey, questions: permutation.map((i) => survey.questions[i]) };
          await this.api.upsertSurvey(this.studyId!, this.surveyKey, reordered);
          await this.openStudy(this.studyId!);
        });
        list.append(row);
      });
      editor.append(list);
    } else if (this.surveyMode === "form") {
      editor.append(this.surveyFormEditor(survey));
    } else {
      void this.surveyJsonEditor(editor);
    }
  }

  private surveyFormEditor(survey: SurveyDoc): HTMLElement {
    const container = h("div", { class: "form-mode" });
    survey.questions.forEach((q, index) => {
      const prompt = h("input", { type: "text", value: q.prompt, class: "q-prompt" }) as HTMLInputElement;
      prompt.addEventListener("change", async () => {
        const updated = { ...survey, questions: survey.questions.slice() };
        updated.questions[index] = { ...q, prompt: prompt.value };
        await this.api.upsertSurvey(this.studyId!, this.surveyKey, updated);
        await this.openStudy(this.studyId!);
      });
      const remove = h(
        "button",
        {
          class: "remove-q",
          onClick: async () => {
            const updated = { ...survey, questions: survey.questions.filter((_, i) => i !== index) };
            await this.api.upsertSurvey(this.studyId!, this.surveyKey, updated);
            await this.openStudy(this.studyId!);
          },
        },
        "remove",
      );
      container.append(
        h("div", { class: "form-q", dataset: { qid: q.question_id } }, prompt, remove),
      );
    });
    const qid = h("input", { type: "text", placeholder: "question id", id: "new-q-id" }) as HTMLInputElement;
    const qprompt = h("input", { type: "text", placeholder: "prompt", id: "new-q-prompt" }) as HTMLInputElement;
    const qkind = h("select", { id: "new-q-kind" }) as HTMLSelectElement;
    qkind.append(
      h("option", { value: "likert" }, "likert (5)"),
      h("option", { value: "multiple_choice" }, "multiple choice"),
      h("option", { value: "open_ended" }, "open-ended"),
    );
    const required = h("input", { type: "checkbox", id: "new-q-required" }) as HTMLInputElement;
    container.append(
      h(
        "div",
        { class: "row add-question" },
        qid,
        qprompt,
        qkind,
        h("label", {}, required, "required"),
        h(
          "button",
          {
            id: "add-question",
            onClick: async () => {
              if (!qid.value.trim() || !qprompt.value.trim()) return;
              const answerType =
                qkind.value === "likert"
                  ? { kind: "likert", points: 5, low_anchor: "Strongly disagree", high_anchor: "Strongly agree" }
                  : qkind.value === "multiple_choice"
                    ? { kind: "multiple_choice", options: ["Option A", "Option B"], allow_multiple: false }
                    : { kind: "open_ended" };
              const updated = {
                ...survey,
                questions: [
                  ...survey.questions,
                  {
                    question_id: qid.value.trim(),
                    prompt: qprompt.value.trim(),
                    answer_type: answerType,
                    required: required.checked,
                  },
                ],
              };
              await this.api.upsertSurvey(this.studyId!, this.surveyKey, updated);
              await this.openStudy(this.studyId!);
            },
          },
          "Add question",
        ),
      ),
    );
    return container;
  }

  private async surveyJsonEditor(editor: HTMLElement): Promise<void> {
    const raw = await this.api.exportSurveyJson(this.studyId!, this.surveyKey);
    const area = h("textarea", { rows: "18", class: "json-area", id: "survey-json" }) as HTMLTextAreaElement;
    area.value = raw;
    const error = h("p", { class: "error", id: "json-error" });
    editor.append(
      area,
      h(
        "div",
        { class: "row" },
        h(
          "button",
          {
            id: "import-json",
            onClick: async () => {
              try {
                await this.api.importSurveyJson(this.studyId!, this.surveyKey, area.value);
                await this.openStudy(this.studyId!);
              } catch (err) {
                error.textContent = err instanceof ApiError ? `${err.error.kind}: ${err.message}` : String(err);
              }
            },
          },
          "Import (replace)",
        ),
        h(
          "button",
          {
            id: "download-json",
            onClick: () => {
              const blob = new Blob([area.value], { type: "application/json" });
              const anchor = h("a", {
                href: URL.createObjectURL(blob),
                download: `${this.surveyKey}.json`,
              }) as HTMLAnchorElement;
              anchor.click();
            },
          },
          "Download",
        ),
      ),
      error,
    );
  }

  // -- typology -------------------------------------------------------------------------

  private renderTypology(body: HTMLElement): void {
    const config = this.config!;
    const categories = (config.typology?.categories ?? []) as Config[];
    const card = h("div", { class: "card" });
    const list = h("div", { class: "typology-list" });
    categories.forEach((category, index) => {
      const label = h("input", { type: "text", value: category.label, class: "cat-label" }) as HTMLInputElement;
      label.addEventListener("change", async () => {
        category.label = label.value;
        await this.saveConfig();
      });
      list.append(
        h(
          "div",
          { class: "typology-row", dataset: { catId: category.category_id } },
          h("code", {}, category.category_id),
          label,
          h(
            "button",
            {
              class: "remove-cat",
              onClick: async () => {
                categories.splice(index, 1);
                await this.saveConfig();
              },
            },
            "remove",
          ),
        ),
      );
    });
    const newId = h("input", { type: "text", placeholder: "category id", id: "new-cat-id" }) as HTMLInputElement;
    const newLabel = h("input", { type: "text", placeholder: "label", id: "new-cat-label" }) as HTMLInputElement;
    card.append(
      list,
      h(
        "div",
        { class: "row" },
        newId,
        newLabel,
        h(
          "button",
          {
            id: "add-category",
            onClick: async () => {
              if (!newId.value.trim() || !newLabel.value.trim()) return;
              categories.push({ category_id: newId.value.trim(), label: newLabel.value.trim(), description: "" });
              config.typology = { categories };
              await this.saveConfig();
            },
          },
          "Add category",
        ),
      ),
    );
    body.append(card);
  }

  // -- triggers -------------------------------------------------------------------------

  private renderTriggers(body: HTMLElement): void {
    const config = this.config!;
    const rules = (config.trigger_rules ?? []) as Config[];
    const card = h("div", { class: "card" });
    const list = h("div", { class: "trigger-list" });
    rules.forEach((rule, index) => {
      list.append(
        h(
          "div",
          { class: "trigger-row", dataset: { ruleId: rule.rule_id } },
          h("code", {}, rule.rule_id),
          h("span", {}, describeCondition(rule.condition), ` → ${rule.survey_id} (${rule.repeat}${rule.scope ? `, task ${rule.scope}` : ""})`),
          h(
            "button",
            {
              class: "remove-rule",
              onClick: async () => {
                rules.splice(index, 1);
                const { issues } = await this.api.updateTriggers(this.studyId!, rules);
                await this.openStudy(this.studyId!);
              },
            },
            "remove",
          ),
        ),
      );
    });
    const ruleId = h("input", { type: "text", placeholder: "rule id", id: "new-rule-id" }) as HTMLInputElement;
    const surveyId = h("input", { type: "text", placeholder: "survey id", id: "new-rule-survey" }) as HTMLInputElement;
    const kind = h("select", { id: "new-rule-kind" }) as HTMLSelectElement;
    for (const value of ["after_n_prompts", "after_n_responses", "after_n_queries", "periodic", "before_submission"]) {
      kind.append(h("option", { value }, value));
    }
    const threshold = h("input", { type: "number", min: "1", value: "2", id: "new-rule-n" }) as HTMLInputElement;
    const repeat = h("select", { id: "new-rule-repeat" }) as HTMLSelectElement;
    repeat.append(h("option", { value: "once" }, "once"), h("option", { value: "every_multiple" }, "every multiple"));
    card.append(
      list,
      h(
        "div",
        { class: "row add-rule" },
        ruleId,
        surveyId,
        kind,
        threshold,
        repeat,
        h(
          "button",
          {
            id: "add-rule",
            onClick: async () => {
              if (!ruleId.value.trim() || !surveyId.value.trim()) return;
              const n = Number(threshold.value) || 1;
              const condition =
                kind.value === "periodic"
                  ? { kind: "periodic", interval_s: n }
                  : kind.value === "before_submission"
                    ? { kind: "before_submission" }
                    : { kind: kind.value, n };
              rules.push({
                rule_id: ruleId.value.trim(),
                survey_id: surveyId.value.trim(),
                condition,
                repeat: kind.value === "before_submission" ? "once" : repeat.value,
                scope: null,
              });
              await this.api.updateTriggers(this.studyId!, rules);
              await this.openStudy(this.studyId!);
            },
          },
          "Add rule",
        ),
      ),
    );
    body.append(card);
  }

  // -- credentials -----------------------------------------------------------------------

  private renderCredentials(body: HTMLElement): void {
    const ref = this.config!.provider_config_ref ?? "default";
    const llmProvider = h("select", { id: "llm-provider" }) as HTMLSelectElement;
    for (const value of ["mock-echo", "openai-compatible", "gemini-compatible", "claude-compatible"]) {
      llmProvider.append(h("option", { value }, value));
    }
    const model = h("input", { type: "text", placeholder: "model name", id: "llm-model", value: "mock" }) as HTMLInputElement;
    const llmKey = h("input", { type: "password", placeholder: "LLM API key", id: "llm-key" }) as HTMLInputElement;
    const searchProvider = h("select", { id: "search-provider" }) as HTMLSelectElement;
    for (const value of ["mock-corpus", "generic-search-api"]) {
      searchProvider.append(h("option", { value }, value));
    }
    const searchUrl = h("input", { type: "text", placeholder: "search endpoint URL", id: "search-url" }) as HTMLInputElement;
    const searchKey = h("input", { type: "password", placeholder: "search API key", id: "search-key" }) as HTMLInputElement;
    const resultCount = h("input", { type: "number", min: "1", max: "50", value: "10", id: "results-per-query" }) as HTMLInputElement;
    const status = h("p", { class: "status", id: "verify-status" });
    body.append(
      h(
        "div",
        { class: "card form-grid" },
        h("p", { class: "hint" }, `Credential ref: ${ref} (keys are encrypted at rest)`),
        h("label", {}, "Chat provider", llmProvider),
        h("label", {}, "Model", model),
        h("label", {}, "Chat API key", llmKey),
        h("label", {}, "Search provider", searchProvider),
        h("label", {}, "Search endpoint", searchUrl),
        h("label", {}, "Search API key", searchKey),
        h("label", {}, "Results per query", resultCount),
        h(
          "div",
          { class: "row" },
          h(
            "button",
            {
              id: "save-credentials",
              onClick: async () => {
                await this.api.setCredentials(
                  ref,
                  {
                    llm: { provider: llmProvider.value, model: model.value, api_key_ref: "llm" },
                    search: {
                      provider: searchProvider.value,
                      api_key_ref: searchKey.value ? "search" : "",
                      results_per_query: Number(resultCount.value) || 10,
                      base_url: searchUrl.value,
                    },
                  },
                  { llm: llmKey.value, search: searchKey.value },
                );
                status.textContent = "saved";
              },
            },
            "Save",
          ),
          h(
            "button",
            {
              id: "verify-credentials",
              onClick: async () => {
                const result = await this.api.verifyCredentials(ref);
                status.textContent = `chat: ${result.llm}, search: ${result.search}`;
              },
            },
            "Verify",
          ),
        ),
        status,
      ),
    );
  }

  // -- responses & export -------------------------------------------------------------------

  private async renderResponses(body: HTMLElement): Promise<void> {
    const { sessions } = await this.api.listResponses(this.studyId!);
    const card = h("div", { class: "card" });
    if (!sessions.length) card.append(h("p", {}, "No sessions yet."));
    for (const session of sessions as Config[]) {
      const counts = session.counts ?? {};
      card.append(
        h(
          "details",
          { class: "session-row", dataset: { sessionId: session.session_id } },
          h(
            "summary",
            {},
            `${session.participant_id} — step ${session.cursor}/${session.total_steps}` +
              ` — ${counts.prompts ?? 0} prompts, ${counts.queries ?? 0} queries` +
              (session.completed_at ? " — completed" : ""),
          ),
          h(
            "div",
            { class: "session-surveys" },
            (session.surveys as Config[]).map((s) =>
              h("p", {}, `${s.step_kind}/${s.survey_id}: ${JSON.stringify(s.answers)}`),
            ),
          ),
        ),
      );
    }
    body.append(card);
  }

  private renderExport(body: HTMLElement): void {
    const files = [
      "registration.csv", "demographics.csv", "pre_task.csv", "post_task.csv",
      "chat_history.csv", "search_log.csv", "in_situ.csv", "notes.csv",
    ];
    body.append(
      h(
        "div",
        { class: "card" },
        h(
          "a",
          {
            class: "export-zip",
            id: "export-zip",
            href: this.api.exportZipUrl(this.studyId!),
            onClick: async (event: Event) => {
              event.preventDefault();
              const blob = await this.api.exportZip(this.studyId!);
              const anchor = h("a", {
                href: URL.createObjectURL(blob),
                download: `${this.studyId}-export.zip`,
              }) as HTMLAnchorElement;
              anchor.click();
            },
          },
          "Download all data (ZIP of 8 CSV files)",
        ),
        h(
          "ul",
          { class: "export-files" },
          files.map((name) => h("li", {}, h("code", {}, name))),
        ),
      ),
    );
  }
}

function describeCondition(condition: Config): string {
  switch (condition.kind) {
    case "after_n_prompts":
      return `after ${condition.n} prompts`;
    case "after_n_responses":
      return `after ${condition.n} responses`;
    case "after_n_queries":
      return `after ${condition.n} queries`;
    case "periodic":
      return `every ${condition.interval_s}s`;
    default:
      return "before task submission";
  }
}

export function emptyStudy(studyId: string): Config {
  return {
    study_id: studyId,
    title: studyId,
    settings: { task_order: [], notes_enabled: true, min_interactions: 0, attention_fail_policy: "record_only" },
    flow: [],
    tasks: [],
    surveys: {},
    typology: { categories: [] },
    trigger_rules: [],
    provider_config_ref: "default",
    consent_text: "",
    consent_checkboxes: [],
  };
}
