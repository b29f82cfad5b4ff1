// Dashboard wiring: the launch form, the live launch card with its build
// log, and the session board. All rendering is recomputed from the latest
// API payloads; the only client-side accumulation is the ordered log buffer.

import { Api, ApiError, SessionDetail } from "./api.js";
import { LogBuffer } from "./log-stream.js";
import { sessionView } from "./model.js";
import {
  renderActiveList,
  renderBoard,
  renderCard,
  renderInlineError,
  renderLogLines,
  renderToast,
} from "./render.js";

export interface AppOptions {
  pollMs?: number;
  nowMs?: () => number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class HubApp {
  private pollMs: number;
  private nowMs: () => number;
  private sleep: (ms: number) => Promise<void>;
  private watching = new Set<string>();
  private streaming = new Set<string>();

  constructor(
    private doc: Document,
    private api: Api,
    options: AppOptions = {},
  ) {
    this.pollMs = options.pollMs ?? 2000;
    this.nowMs = options.nowMs ?? (() => Date.now());
    this.sleep = options.sleep ?? defaultSleep;
  }

  mount(): void {
    const form = this.doc.getElementById("launch-form") as HTMLFormElement | null;
    form?.addEventListener("submit", (event) => {
      event.preventDefault();
      const url = (this.doc.getElementById("repo-url") as HTMLInputElement).value.trim();
      const ref = (this.doc.getElementById("repo-ref") as HTMLInputElement | null)?.value.trim();
      void this.launch(url, ref || undefined);
    });
    this.doc.getElementById("board")?.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      const sessionId = target.dataset?.stop;
      if (sessionId) void this.stopSession(sessionId);
    });
    this.doc.getElementById("toast-area")?.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      if ("retry" in (target.dataset ?? {})) {
        this.setToast("");
        void this.refreshBoard();
      }
    });
    void this.refreshBoard();
  }

  // Launch flow ------------------------------------------------------------

  async launch(repoUrl: string, ref?: string): Promise<void> {
    this.setInlineError("");
    this.setLogPane([]);
    if (!repoUrl) {
      this.setInlineError(renderInlineError("Enter a repository URL."));
      return;
    }
    let accepted;
    try {
      accepted = await this.api.createSession(repoUrl, ref);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        const active = await this.api.listSessions().catch(() => []);
        const busy = active.filter((s) => !["stopped", "failed"].includes(s.state));
        this.setInlineError(
          renderInlineError(
            `Session quota reached: ${error.message}`,
            renderActiveList(busy),
          ),
        );
      } else if (error instanceof ApiError && error.status === 400) {
        this.setInlineError(renderInlineError(`That does not look like a launchable repository URL: ${error.message}`));
      } else {
        this.setInlineError(renderInlineError(describe(error)));
      }
      return;
    }
    await this.watchSession(accepted.id, "launch-card");
    void this.refreshBoard();
  }

  /** Poll one session every pollMs until terminal, re-rendering its card. */
  private async watchSession(id: string, targetId: string): Promise<void> {
    if (this.watching.has(id)) return; // one in-flight poll loop per card
    this.watching.add(id);
    try {
      let logStream: Promise<void> | null = null;
      while (true) {
        let detail: SessionDetail;
        try {
          detail = await this.api.getSession(id);
        } catch (error) {
          this.setToast(renderToast(describe(error)));
          return;
        }
        this.setCard(targetId, detail);
        const state = detail.state;
        if (logStream === null && !["pending", "cloning"].includes(state)) {
          logStream = this.streamLogs(id);
        }
        if (["stopped", "failed", "running"].includes(state)) {
          if (logStream) await logStream;
          return;
        }
        await this.sleep(this.pollMs);
      }
    } finally {
      this.watching.delete(id);
    }
  }

  /** Follow the build log from index 0, appending lines in order. */
  private async streamLogs(id: string): Promise<void> {
    if (this.streaming.has(id)) return;
    this.streaming.add(id);
    const buffer = new LogBuffer();
    try {
      while (!buffer.terminal) {
        const batch = await this.api.fetchLogs(id, buffer.nextIndex);
        buffer.add(batch);
        this.setLogPane(buffer.ordered());
        if (!batch.lines.length && !batch.terminal) {
          await this.sleep(this.pollMs);
        }
      }
    } catch (error) {
      this.setToast(renderToast(describe(error)));
    } finally {
      this.streaming.delete(id);
    }
  }

  // Session board ------------------------------------------------------------

  async refreshBoard(): Promise<void> {
    const board = this.doc.getElementById("board");
    if (!board) return;
    try {
      const sessions = await this.api.listSessions(true);
      const views = sessions.map((s) => sessionView(s, this.nowMs()));
      board.innerHTML = renderBoard(views);
    } catch (error) {
      // never a blank page: keep the last rendering, offer a retry
      this.setToast(renderToast(describe(error)));
    }
  }

  async stopSession(id: string): Promise<void> {
    try {
      await this.api.deleteSession(id);
      while (true) {
        const detail = await this.api.getSession(id);
        await this.refreshBoard();
        if (["stopped", "failed"].includes(detail.state)) return;
        await this.sleep(this.pollMs);
      }
    } catch (error) {
      this.setToast(renderToast(describe(error)));
    }
  }

  // DOM helpers ---------------------------------------------------------------

  private setCard(targetId: string, detail: SessionDetail): void {
    const element = this.doc.getElementById(targetId);
    if (element) element.innerHTML = renderCard(sessionView(detail, this.nowMs()));
  }

  private setLogPane(lines: string[]): void {
    const pane = this.doc.getElementById("log-pane");
    if (pane) pane.innerHTML = renderLogLines(lines);
  }

  private setInlineError(html: string): void {
    const element = this.doc.getElementById("launch-error");
    if (element) element.innerHTML = html;
  }

  private setToast(html: string): void {
    const element = this.doc.getElementById("toast-area");
    if (element) element.innerHTML = html;
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    if (error.status === 401) return "Not logged in. Visit /hub/login first.";
    return `Hub error ${error.status}: ${error.message}`;
  }
  return `Request failed: ${String(error)}`;
}
