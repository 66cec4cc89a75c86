// Typed client for the study-service HTTP/JSON API. The service is the
// single source of truth; this module only moves JSON back and forth.

export interface SessionInfo {
  session_id: string;
  total_screens: number;
  instructions: string;
}

export interface ScreenItem {
  position: number;
  media_ref: string;
}

export interface Screen {
  screen_index: number;
  caption: string;
  items: ScreenItem[];
}

export type CurrentResponse = Screen | { complete: true };

export interface AnswerResponse {
  accepted: boolean;
  next_screen_index?: number;
  complete?: boolean;
  error?: string;
}

export function isComplete(r: CurrentResponse): r is { complete: true } {
  return (r as { complete?: boolean }).complete === true;
}

export class StudyApi {
  constructor(readonly base: string) {}

  mediaUrl(ref: string): string {
    return this.base + ref;
  }

  async createSession(): Promise<SessionInfo> {
    return this.json("POST", "/sessions");
  }

  async current(sessionId: string): Promise<CurrentResponse> {
    return this.json("GET", `/sessions/${sessionId}/current`);
  }

  /** Submit one answer. 409 responses (duplicate / out-of-order) come back
   *  as `accepted: false` instead of throwing, so retries are harmless. */
  async submit(sessionId: string, screenIndex: number,
               chosenPosition: number): Promise<AnswerResponse> {
    const res = await fetch(`${this.base}/sessions/${sessionId}/answers`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ screen_index: screenIndex, chosen_position: chosenPosition }),
    });
    return (await res.json()) as AnswerResponse;
  }

  async results(): Promise<unknown> {
    return this.json("GET", "/results");
  }

  private async json<T>(method: string, path: string): Promise<T> {
    const res = await fetch(this.base + path, { method });
    if (!res.ok) {
      throw new Error(`${method} ${path} failed: HTTP ${res.status}`);
    }
    return (await res.json()) as T;
  }
}
