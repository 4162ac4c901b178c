// Typing timestamps: first keystroke and last keystroke before submit.

export class TypingTracker {
  private start: number | null = null;
  private end: number | null = null;

  noteKeystroke(nowMs: number = Date.now()): void {
    if (this.start === null) this.start = nowMs;
    this.end = nowMs;
  }

  snapshot(): { typing_start_ms: number | null; typing_end_ms: number | null } {
    return { typing_start_ms: this.start, typing_end_ms: this.end };
  }

  reset(): void {
    this.start = null;
    this.end = null;
  }
}
