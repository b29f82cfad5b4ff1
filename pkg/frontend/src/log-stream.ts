// Ordered, gap-free accumulation of build log batches. Batches may arrive
// split arbitrarily, duplicated, or overlapping; rendering only ever sees
// the contiguous prefix starting at index 0.

import type { LogBatch } from "./api.js";

export class LogBuffer {
  private byIndex = new Map<number, string>();
  private contiguous = 0;
  private done = false;

  add(batch: LogBatch): void {
    for (const line of batch.lines) {
      this.byIndex.set(line.index, line.text);
    }
    while (this.byIndex.has(this.contiguous)) {
      this.contiguous += 1;
    }
    if (batch.terminal && batch.next_index <= this.contiguous) {
      this.done = true;
    }
  }

  /** Index to request next; always the first gap. */
  get nextIndex(): number {
    return this.contiguous;
  }

  get terminal(): boolean {
    return this.done;
  }

  /** The renderable lines: exactly the contiguous prefix, in index order. */
  ordered(): string[] {
    const out: string[] = [];
    for (let i = 0; i < this.contiguous; i++) {
      out.push(this.byIndex.get(i)!);
    }
    return out;
  }
}
