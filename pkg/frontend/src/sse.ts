// Server-sent event parsing for the chat stream.

export interface ChatFrame {
  chunk_index?: number;
  text?: string;
  final?: boolean;
  turn_id?: string;
  error?: string;
  popup?: PopupDescriptor | null;
  popups?: PopupDescriptor[];
}

export interface PopupDescriptor {
  instance_id: string;
  rule_id: string;
  fired_at_ms: number;
  survey: SurveyDoc | null;
}

export interface SurveyDoc {
  survey_id: string;
  title: string;
  questions: QuestionDoc[];
}

export interface QuestionDoc {
  question_id: string;
  prompt: string;
  required: boolean;
  answer_type: {
    kind: "likert" | "multiple_choice" | "open_ended";
    points?: number;
    low_anchor?: string;
    high_anchor?: string;
    options?: string[];
    allow_multiple?: boolean;
    max_length?: number | null;
  };
  attention_check?: { expected_answer: unknown } | null;
}

/** Split an SSE byte stream into parsed `data:` frames. Frames may arrive
 * fragmented across reads; a trailing partial frame is held back until
 * its terminator arrives. */
export async function* parseSseStream(
  stream: ReadableStream<Uint8Array>,
): AsyncGenerator<ChatFrame> {
  const reader = stream.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  try {
    while (true) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let boundary = buffer.indexOf("\n\n");
      while (boundary >= 0) {
        const raw = buffer.slice(0, boundary);
        buffer = buffer.slice(boundary + 2);
        const frame = parseFrame(raw);
        if (frame !== null) yield frame;
        boundary = buffer.indexOf("\n\n");
      }
    }
    const tail = parseFrame(buffer);
    if (tail !== null) yield tail;
  } finally {
    reader.releaseLock();
  }
}

function parseFrame(raw: string): ChatFrame | null {
  const data = raw
    .split("\n")
    .filter((line) => line.startsWith("data:"))
    .map((line) => line.slice("data:".length).trim())
    .join("\n");
  if (!data) return null;
  return JSON.parse(data) as ChatFrame;
}
