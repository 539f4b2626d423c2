import { ServiceClient, ServiceError } from "./client.js";
import type {
  ActionPayload,
  SessionStatus,
  SessionSummary,
} from "./types.js";

/** One bubble in the conversation log. */
export type ChatEntry =
  | { kind: "opening"; attribute: number }
  | { kind: "question"; attribute: number }
  | { kind: "answer"; liked: boolean }
  | { kind: "slate"; items: number[] }
  | { kind: "verdict"; accepted: boolean; item?: number };

/**
 * What input the UI may offer right now. Answer buttons exist only in
 * "question", slate buttons only in "slate", so a feedback payload can
 * never mismatch the outstanding action by construction.
 */
export type Phase = "idle" | "busy" | "question" | "slate" | "done";

export interface SlateVerdict {
  accepted?: boolean;
  item?: number;
}

export interface ControllerView {
  phase: Phase;
  status: SessionStatus | null;
  turn: number;
  candidateCount: number | null;
  /** Candidate count after the opening and after every completed turn. */
  counterSeries: readonly number[];
  beliefs: readonly number[];
  asked: readonly number[];
  /** Attribute of the outstanding question, for highlighting. */
  highlighted: number | null;
  entries: readonly ChatEntry[];
  slate: readonly number[] | null;
  terminationTurn: number | null;
  error: string | null;
}

type Listener = (view: ControllerView) => void;

/** Drives one conversation over the session API. */
export class SessionController {
  private readonly client: ServiceClient;
  private readonly listeners = new Set<Listener>();
  private sessionId: string | null = null;
  private summary: SessionSummary | null = null;
  private outstanding: ActionPayload | null = null;
  private busy = false;
  private entries: ChatEntry[] = [];
  private counterSeries: number[] = [];
  private error: string | null = null;

  constructor(client: ServiceClient) {
    this.client = client;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  /** Server-issued session id, e.g. for persisting across reloads. */
  get id(): string | null {
    return this.sessionId;
  }

  get view(): ControllerView {
    return {
      phase: this.phase,
      status: this.summary?.status ?? null,
      turn: this.summary?.turn ?? 0,
      candidateCount: this.summary?.candidate_count ?? null,
      counterSeries: [...this.counterSeries],
      beliefs: this.summary ? [...this.summary.beliefs] : [],
      asked: this.summary ? [...this.summary.asked] : [],
      highlighted:
        this.outstanding?.type === "question"
          ? this.outstanding.attribute
          : null,
      entries: [...this.entries],
      slate:
        this.outstanding?.type === "recommendation"
          ? [...this.outstanding.items]
          : null,
      terminationTurn: this.summary?.termination_turn ?? null,
      error: this.error,
    };
  }

  private get phase(): Phase {
    if (this.busy) return "busy";
    if (this.summary === null) return "idle";
    if (this.summary.status !== "active") return "done";
    if (this.outstanding === null) return "idle";
    return this.outstanding.type === "question" ? "question" : "slate";
  }

  /** Open a session from a liked attribute and fetch the first action. */
  async start(
    openingAttribute: number,
    seed = 0,
    userId: number | null = null,
  ): Promise<void> {
    this.sessionId = null;
    this.summary = null;
    this.outstanding = null;
    this.entries = [];
    this.counterSeries = [];
    this.error = null;
    await this.run(async () => {
      const summary = await this.client.createSession(
        openingAttribute,
        seed,
        userId,
      );
      this.sessionId = summary.session_id;
      this.summary = summary;
      this.entries.push({ kind: "opening", attribute: openingAttribute });
      this.counterSeries.push(summary.candidate_count);
      await this.advance();
    });
  }

  /** Answer the outstanding question; only legal in the question phase. */
  async answer(liked: boolean): Promise<void> {
    if (this.phase !== "question") {
      throw new Error("no outstanding question to answer");
    }
    await this.run(async () => {
      const summary = await this.client.sendFeedback(this.requireSession(), {
        type: "answer",
        liked,
      });
      this.entries.push({ kind: "answer", liked });
      this.applySummary(summary);
      await this.advance();
    });
  }

  /** Accept one slate item or reject them all; only legal in the slate phase. */
  async respondToSlate(verdict: SlateVerdict): Promise<void> {
    if (this.phase !== "slate") {
      throw new Error("no outstanding recommendation to respond to");
    }
    await this.run(async () => {
      const summary = await this.client.sendFeedback(this.requireSession(), {
        type: "recommendation",
        ...(verdict.item !== undefined
          ? { item: verdict.item }
          : { accepted: verdict.accepted ?? false }),
      });
      this.entries.push({
        kind: "verdict",
        accepted: verdict.item !== undefined || verdict.accepted === true,
        ...(verdict.item !== undefined ? { item: verdict.item } : {}),
      });
      this.applySummary(summary);
      await this.advance();
    });
  }

  /** Re-fetch the summary, e.g. after the tab regains focus. */
  async refresh(): Promise<void> {
    await this.run(async () => {
      this.applySummary(await this.client.summary(this.requireSession()), false);
      if (this.summary?.status === "active" && this.outstanding === null) {
        await this.advance();
      }
    });
  }

  /** Rebuild mid-session state from the transcript, e.g. after a reload. */
  async resume(sessionId: string): Promise<void> {
    this.sessionId = sessionId;
    this.summary = null;
    this.outstanding = null;
    this.entries = [];
    this.counterSeries = [];
    this.error = null;
    await this.run(async () => {
      const transcript = await this.client.transcript(sessionId);
      for (const record of transcript.records) {
        if (record.action === "open") {
          this.entries.push({ kind: "opening", attribute: record.attribute! });
        } else if (record.action === "question") {
          this.entries.push({ kind: "question", attribute: record.attribute! });
          this.entries.push({ kind: "answer", liked: record.response === "yes" });
        } else {
          this.entries.push({ kind: "slate", items: [...(record.items ?? [])] });
          this.entries.push({
            kind: "verdict",
            accepted: record.response === "accept",
          });
        }
        this.counterSeries.push(record.candidates_after);
      }
      this.summary = await this.client.summary(sessionId);
      if (this.summary.status === "active") await this.advance();
    });
  }

  private requireSession(): string {
    if (this.sessionId === null) throw new Error("no session started");
    return this.sessionId;
  }

  private applySummary(summary: SessionSummary, recordCount = true): void {
    this.summary = summary;
    this.outstanding = null;
    if (recordCount) this.counterSeries.push(summary.candidate_count);
  }

  private async advance(): Promise<void> {
    if (this.summary === null || this.summary.status !== "active") return;
    const action = await this.client.nextAction(this.requireSession());
    this.outstanding = action;
    if (action.type === "question") {
      this.entries.push({ kind: "question", attribute: action.attribute });
    } else {
      this.entries.push({ kind: "slate", items: [...action.items] });
    }
  }

  private async run(step: () => Promise<void>): Promise<void> {
    this.busy = true;
    this.error = null;
    this.notify();
    try {
      await step();
    } catch (err) {
      this.error =
        err instanceof ServiceError
          ? `${err.code}: ${err.message}`
          : String(err);
    } finally {
      this.busy = false;
      this.notify();
    }
  }

  private notify(): void {
    const view = this.view;
    for (const listener of this.listeners) listener(view);
  }
}
