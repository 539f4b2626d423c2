/** Payload shapes of the session API, mirrored field for field. */

export type SessionStatus = "active" | "succeeded" | "exhausted";

export interface QuestionAction {
  type: "question";
  attribute: number;
}

export interface RecommendationAction {
  type: "recommendation";
  items: number[];
}

export type ActionPayload = QuestionAction | RecommendationAction;

export interface SessionSummary {
  session_id: string;
  status: SessionStatus;
  turn: number;
  candidate_count: number;
  beliefs: number[];
  feedback: number[];
  asked: number[];
  termination_turn: number | null;
  outstanding_action: ActionPayload | null;
}

export interface AttributeInfo {
  id: number;
  label: string;
  item_count: number;
}

export interface AttributeListing {
  attributes: AttributeInfo[];
}

export interface TranscriptRecord {
  turn: number;
  action: "open" | "question" | "recommendation";
  attribute: number | null;
  items: number[] | null;
  response: "yes" | "no" | "accept" | "reject";
  candidates_after: number;
}

export interface Transcript {
  session_id: string;
  status: SessionStatus;
  termination_turn: number | null;
  records: TranscriptRecord[];
}

export interface HealthReport {
  status: string;
  sessions: number;
}

export type AnswerFeedback = { type: "answer"; liked: boolean };

export type SlateFeedback = {
  type: "recommendation";
  accepted?: boolean;
  item?: number;
};

export type FeedbackPayload = AnswerFeedback | SlateFeedback;

export interface ApiErrorBody {
  code: string;
  message: string;
}
