// Survey instrument rendering and answer collection.

import type { AnswerValue } from "./api.js";
import { h } from "./dom.js";
import type { QuestionDoc, SurveyDoc } from "./sse.js";

export interface SurveyForm {
  element: HTMLElement;
  collect(): { answers: Record<string, AnswerValue>; missing: string[] };
}

function likertRow(question: QuestionDoc): HTMLElement {
  const points = question.answer_type.points ?? 5;
  const scale = h("div", { class: "likert-scale" });
  for (let value = 1; value <= points; value++) {
    scale.append(
      h(
        "label",
        { class: "likert-point" },
        h("input", { type: "radio", name: question.question_id, value: String(value) }),
        String(value),
      ),
    );
  }
  return h(
    "div",
    { class: "likert" },
    h("span", { class: "anchor" }, question.answer_type.low_anchor ?? ""),
    scale,
    h("span", { class: "anchor" }, question.answer_type.high_anchor ?? ""),
  );
}

function choiceRows(question: QuestionDoc): HTMLElement {
  const multiple = Boolean(question.answer_type.allow_multiple);
  const box = h("div", { class: "choices" });
  for (const option of question.answer_type.options ?? []) {
    box.append(
      h(
        "label",
        { class: "choice" },
        h("input", {
          type: multiple ? "checkbox" : "radio",
          name: question.question_id,
          value: option,
        }),
        option,
      ),
    );
  }
  return box;
}

export function buildSurveyForm(instrument: SurveyDoc): SurveyForm {
  const element = h("form", { class: "survey-form" });
  if (instrument.title) element.append(h("h3", {}, instrument.title));
  for (const question of instrument.questions) {
    const field = h(
      "fieldset",
      { class: "question", dataset: { qid: question.question_id } },
      h("legend", {}, question.prompt + (question.required ? " *" : "")),
    );
    const kind = question.answer_type.kind;
    if (kind === "likert") {
      field.append(likertRow(question));
    } else if (kind === "multiple_choice") {
      field.append(choiceRows(question));
    } else {
      const attrs: Record<string, unknown> = { name: question.question_id, rows: "3" };
      if (question.answer_type.max_length) attrs["maxlength"] = String(question.answer_type.max_length);
      field.append(h("textarea", attrs));
    }
    element.append(field);
  }

  const collect = () => {
    const answers: Record<string, AnswerValue> = {};
    const missing: string[] = [];
    for (const question of instrument.questions) {
      const kind = question.answer_type.kind;
      const inputs = Array.from(
        element.querySelectorAll<HTMLInputElement | HTMLTextAreaElement>(
          `[name="${question.question_id}"]`,
        ),
      );
      if (kind === "likert") {
        const picked = inputs.find((i) => (i as HTMLInputElement).checked);
        if (picked) answers[question.question_id] = Number(picked.value);
      } else if (kind === "multiple_choice") {
        const picked = inputs.filter((i) => (i as HTMLInputElement).checked).map((i) => i.value);
        if (question.answer_type.allow_multiple) {
          if (picked.length) answers[question.question_id] = picked;
        } else if (picked.length === 1) {
          answers[question.question_id] = picked[0];
        }
      } else {
        const text = (inputs[0]?.value ?? "").toString();
        if (text.trim()) answers[question.question_id] = text;
      }
      if (question.required && !(question.question_id in answers)) {
        missing.push(question.question_id);
      }
    }
    return { answers, missing };
  };

  return { element, collect };
}
