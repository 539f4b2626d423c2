import type { ChatEntry, ControllerView } from "./controller.js";
import type { SessionStatus } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

export type LabelFor = (attribute: number) => string;

export const defaultLabel: LabelFor = (attribute) => `attribute ${attribute}`;

export function counterHtml(count: number | null): string {
  if (count === null) return `<span class="counter">&ndash;</span>`;
  return `<span class="counter">${count} candidate${count === 1 ? "" : "s"}</span>`;
}

/**
 * Per-attribute belief bars. Answered attributes are dimmed; the attribute
 * of the outstanding question is highlighted so the reason for asking is
 * visible.
 */
export function beliefBarsHtml(
  view: Pick<ControllerView, "beliefs" | "asked" | "highlighted">,
  label: LabelFor = defaultLabel,
): string {
  const asked = new Set(view.asked);
  const rows = view.beliefs.map((q, p) => {
    const classes = ["belief-row"];
    if (asked.has(p)) classes.push("asked");
    if (view.highlighted === p) classes.push("highlighted");
    const width = Math.round(q * 100);
    return (
      `<div class="${classes.join(" ")}" data-attribute="${p}">` +
      `<span class="belief-label">${escapeHtml(label(p))}</span>` +
      `<span class="belief-track"><span class="belief-fill" style="width:${width}%"></span></span>` +
      `<span class="belief-value">${q.toFixed(2)}</span>` +
      `</div>`
    );
  });
  return rows.join("");
}

export function entryHtml(entry: ChatEntry, label: LabelFor = defaultLabel): string {
  switch (entry.kind) {
    case "opening":
      return `<div class="entry user">I like ${escapeHtml(label(entry.attribute))}.</div>`;
    case "question":
      return `<div class="entry system">Do you like ${escapeHtml(label(entry.attribute))}?</div>`;
    case "answer":
      return `<div class="entry user">${entry.liked ? "Yes" : "No"}</div>`;
    case "slate":
      return (
        `<div class="entry system">How about one of these? ` +
        `${entry.items.map((v) => `<span class="slate-item">item ${v}</span>`).join(" ")}` +
        `</div>`
      );
    case "verdict":
      return entry.accepted
        ? `<div class="entry user">I&#39;ll take ${
            entry.item !== undefined ? `item ${entry.item}` : "one"
          }.</div>`
        : `<div class="entry user">None of these.</div>`;
  }
}

export function chatLogHtml(
  entries: readonly ChatEntry[],
  label: LabelFor = defaultLabel,
): string {
  return entries.map((entry) => entryHtml(entry, label)).join("");
}

/**
 * Controls for the outstanding action. Yes/no buttons render only for a
 * question and slate buttons only for a recommendation, so the page can
 * never submit a mismatched feedback type.
 */
export function actionPanelHtml(
  view: Pick<ControllerView, "phase" | "highlighted" | "slate">,
  label: LabelFor = defaultLabel,
): string {
  if (view.phase === "question" && view.highlighted !== null) {
    return (
      `<p class="prompt">Do you like ${escapeHtml(label(view.highlighted))}?</p>` +
      `<button type="button" data-action="yes">Yes</button>` +
      `<button type="button" data-action="no">No</button>`
    );
  }
  if (view.phase === "slate" && view.slate !== null) {
    const picks = view.slate
      .map(
        (v) =>
          `<button type="button" data-action="accept" data-item="${v}">item ${v}</button>`,
      )
      .join(" ");
    return (
      `<p class="prompt">How about one of these?</p>` +
      `${picks} ` +
      `<button type="button" data-action="reject">None of these</button>`
    );
  }
  if (view.phase === "busy") {
    return `<p class="prompt">&hellip;</p>`;
  }
  return "";
}

/** Closing screen: accepted item and turn count, or the patience limit. */
export function terminalHtml(
  status: SessionStatus,
  terminationTurn: number | null,
): string {
  if (status === "succeeded") {
    return `<p class="terminal success">Accepted at turn ${terminationTurn}.</p>`;
  }
  return `<p class="terminal failure">Out of patience after ${terminationTurn} turns.</p>`;
}
