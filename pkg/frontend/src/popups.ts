// FIFO queue of in-situ popup descriptors; exactly one is shown at a time.

import type { PopupDescriptor } from "./sse.js";

export class PopupQueue {
  private queue: PopupDescriptor[] = [];
  private seen = new Set<string>();

  /** Add descriptors, ignoring instances already queued or resolved. */
  enqueue(popups: PopupDescriptor[] | null | undefined): void {
    for (const popup of popups ?? []) {
      if (this.seen.has(popup.instance_id)) continue;
      this.seen.add(popup.instance_id);
      this.queue.push(popup);
    }
  }

  current(): PopupDescriptor | null {
    return this.queue[0] ?? null;
  }

  resolve(instanceId: string): void {
    this.queue = this.queue.filter((p) => p.instance_id !== instanceId);
  }

  get size(): number {
    return this.queue.length;
  }
}
