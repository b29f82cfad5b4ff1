// HTML string renderers. Pure: payload in, markup out.

import type { SessionView } from "./model.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function renderBadge(view: SessionView): string {
  return `<span class="badge badge-${view.badgeTone}" data-state="${escapeHtml(view.state)}">${escapeHtml(view.state)}</span>`;
}

export function renderCard(view: SessionView): string {
  const open = view.openHref
    ? `<a class="open-link" href="${escapeHtml(view.openHref)}" target="_blank" rel="noopener">Open</a>`
    : "";
  const stop = view.stoppable
    ? `<button class="stop-btn" data-stop="${escapeHtml(view.id)}">Stop</button>`
    : "";
  const failure = view.failure
    ? `<div class="failure-panel"><strong>failed at ${escapeHtml(view.failure.stage)}</strong><pre>${escapeHtml(view.failure.detail)}</pre></div>`
    : "";
  return `
    <div class="card" data-session="${escapeHtml(view.id)}">
      <div class="card-head">
        <span class="repo">${escapeHtml(view.repo)}</span>
        ${renderBadge(view)}
      </div>
      <div class="card-meta">
        <span class="owner">${escapeHtml(view.owner)}</span>
        <span class="elapsed">${escapeHtml(view.elapsedText)}</span>
      </div>
      ${failure}
      <div class="card-actions">${open}${stop}</div>
    </div>`;
}

export function renderBoard(views: SessionView[]): string {
  if (views.length === 0) {
    return `<div class="empty-state">No sessions yet. Paste a repository URL above and launch one.</div>`;
  }
  return views.map(renderCard).join("\n");
}

export function renderLogLines(lines: string[]): string {
  return lines
    .map((line, i) => `<div class="log-line" data-index="${i}">${escapeHtml(line)}</div>`)
    .join("");
}

export function renderToast(message: string): string {
  return `<div class="toast" role="alert">${escapeHtml(message)} <button class="retry-btn" data-retry>Retry</button></div>`;
}

export function renderInlineError(message: string, extraHtml = ""): string {
  return `<div class="inline-error">${escapeHtml(message)}${extraHtml}</div>`;
}

export function renderActiveList(items: { id: string; repo: string; state: string }[]): string {
  const rows = items
    .map((s) => `<li>${escapeHtml(s.repo)} &middot; ${escapeHtml(s.state)}</li>`)
    .join("");
  return `<ul class="active-list">${rows}</ul>`;
}
