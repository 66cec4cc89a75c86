// Session controller: instructions -> worked example -> sequential screens
// -> finish code. The server owns all state; the client only remembers its
// session id (so a refresh resumes at the server cursor) and always
// resynchronizes through GET current when anything looks off.

import { isComplete, StudyApi } from "./api.js";
import type { Screen } from "./api.js";
import { renderError, renderExample, renderFinish, renderInstructions,
         renderScreen } from "./view.js";

const STORAGE_KEY = "discrilab-session";

export function finishCode(sessionId: string): string {
  return `DL-${sessionId.slice(0, 8).toUpperCase()}`;
}

export class SessionController {
  private sessionId: string | null = null;
  private total = 0;
  private instructions = "";
  private submitting = false;

  constructor(private readonly api: StudyApi,
              private readonly root: HTMLElement,
              private readonly storage: Storage) {}

  async start(): Promise<void> {
    const existing = this.storage.getItem(STORAGE_KEY);
    if (existing) {
      const [sid, total] = existing.split("|");
      if (sid && total) {
        this.sessionId = sid;
        this.total = Number(total);
        await this.showCurrent();
        return;
      }
    }
    try {
      const made = await this.api.createSession();
      this.sessionId = made.session_id;
      this.total = made.total_screens;
      this.instructions = made.instructions;
      this.storage.setItem(STORAGE_KEY, `${made.session_id}|${made.total_screens}`);
    } catch (err) {
      renderError(this.root, String(err), () => void this.start());
      return;
    }
    renderInstructions(this.root, this.instructions, () => {
      renderExample(this.root, () => void this.showCurrent());
    });
  }

  private async showCurrent(): Promise<void> {
    if (!this.sessionId) return;
    let current;
    try {
      current = await this.api.current(this.sessionId);
    } catch (err) {
      renderError(this.root, String(err), () => void this.showCurrent());
      return;
    }
    if (isComplete(current)) {
      this.storage.removeItem(STORAGE_KEY);
      renderFinish(this.root, finishCode(this.sessionId));
      return;
    }
    this.renderQuestion(current);
  }

  private renderQuestion(screen: Screen): void {
    renderScreen(this.root, screen, this.total,
                 (ref) => this.api.mediaUrl(ref),
                 { onConfirm: (position) => void this.submit(screen, position) });
  }

  private async submit(screen: Screen, position: number): Promise<void> {
    if (!this.sessionId || this.submitting) return;
    this.submitting = true;
    try {
      const out = await this.api.submit(this.sessionId, screen.screen_index, position);
      this.submitting = false;
      if (!out.accepted) {
        // duplicate or out-of-order: the server state wins, resync
        await this.showCurrent();
        return;
      }
      if (out.complete) {
        this.storage.removeItem(STORAGE_KEY);
        renderFinish(this.root, finishCode(this.sessionId));
        return;
      }
      await this.showCurrent();
    } catch (err) {
      // network failure: re-submission is idempotent (the server rejects
      // duplicates harmlessly and we resync right after)
      this.submitting = false;
      renderError(this.root, `Could not submit your answer (${String(err)}).`,
                  () => void this.submit(screen, position));
    }
  }
}
