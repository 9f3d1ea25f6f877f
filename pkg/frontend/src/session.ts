/**
 * Client-side session controller: tool modes, optimistic pending actions,
 * and the ordering guarantee of at most one in-flight prompt per mask.
 * DOM-free; main.ts binds it to the canvas.
 */

import { AnnotationClient } from "./api.js";
import { OverlayState } from "./overlay.js";
import type { MaskResponse, Prompt } from "./schema.js";
import { dragToBox, ViewTransform, type ViewPoint } from "./transform.js";

export type ToolMode = "positive-point" | "negative-point" | "box" | "select";

export interface PendingAction {
  maskId: number | null; // null while an add-mask is in flight
  prompt: Prompt;
}

export class SessionController {
  overlay: OverlayState;
  transform = new ViewTransform();
  tool: ToolMode = "positive-point";
  readonly pending = new Map<string, PendingAction>();
  private queues = new Map<number, Promise<unknown>>();
  private pendingCounter = 0;
  onchange: () => void = () => {};
  onerror: (message: string) => void = () => {};

  constructor(
    private client: AnnotationClient,
    public sessionId: string,
    height: number,
    width: number,
  ) {
    this.overlay = new OverlayState(height, width);
  }

  private notify(): void {
    this.onchange();
  }

  private track(maskId: number | null, prompt: Prompt): string {
    const key = `p${this.pendingCounter++}`;
    this.pending.set(key, { maskId, prompt });
    this.notify();
    return key;
  }

  private resolve(key: string): void {
    this.pending.delete(key);
    this.notify();
  }

  /** Serialize prompt traffic per mask so history order matches click order. */
  private enqueue<T>(maskId: number, work: () => Promise<T>): Promise<T> {
    const previous = this.queues.get(maskId) ?? Promise.resolve();
    const next = previous.then(work, work);
    this.queues.set(maskId, next.catch(() => undefined));
    return next;
  }

  /** Click or drag in view space; routes to refine or add per selection. */
  async placePrompt(at: ViewPoint, dragEnd?: ViewPoint): Promise<MaskResponse | null> {
    const { height, width } = this.overlay;
    let prompt: Prompt;
    if (this.tool === "box" && dragEnd) {
      prompt = { type: "box", ...dragToBox(at, dragEnd, this.transform, height, width) };
    } else if (this.tool === "positive-point" || this.tool === "negative-point") {
      const pixel = this.transform.viewToImage(at, height, width);
      prompt = {
        type: "point",
        row: pixel.row,
        col: pixel.col,
        positive: this.tool === "positive-point",
      };
    } else if (this.tool === "select") {
      const pixel = this.transform.viewToImage(at, height, width);
      this.overlay.select(this.overlay.maskAt(pixel.row, pixel.col));
      this.notify();
      return null;
    } else {
      return null;
    }

    const selected = this.overlay.selectedId;
    const key = this.track(selected, prompt);
    try {
      let response: MaskResponse;
      if (selected !== null) {
        response = await this.enqueue(selected, () =>
          this.client.refineMask(this.sessionId, selected, prompt),
        );
        this.overlay.apply(response);
      } else {
        response = await this.client.addMask(this.sessionId, prompt);
        this.overlay.apply(response);
        this.overlay.select(response.id);
      }
      return response;
    } catch (err) {
      this.onerror(err instanceof Error ? err.message : String(err));
      return null;
    } finally {
      this.resolve(key); // resolved or rolled back, never duplicated
    }
  }

  async runAuto(): Promise<number> {
    try {
      const masks = await this.client.autoSegment(this.sessionId);
      this.overlay.replaceAutomatic(masks);
      this.notify();
      return masks.length;
    } catch (err) {
      // detector down: manual annotation keeps working
      this.onerror(err instanceof Error ? err.message : String(err));
      return 0;
    }
  }

  canUndo(): boolean {
    const id = this.overlay.selectedId;
    if (id === null) return false;
    const mask = this.overlay.masks.get(id);
    return mask !== undefined && mask.historyLength > 1;
  }

  async undoLast(): Promise<MaskResponse | null> {
    const id = this.overlay.selectedId;
    if (id === null || !this.canUndo()) return null;
    try {
      const response = await this.enqueue(id, () =>
        this.client.undoLastPrompt(this.sessionId, id),
      );
      this.overlay.apply(response);
      this.notify();
      return response;
    } catch (err) {
      this.onerror(err instanceof Error ? err.message : String(err));
      return null;
    }
  }

  async removeSelected(): Promise<void> {
    const id = this.overlay.selectedId;
    if (id === null) return;
    await this.client.removeMask(this.sessionId, id);
    this.overlay.remove(id);
    this.notify();
  }

  /** Download-ready annotation document (schema-validated). */
  exportAnnotations() {
    return this.client.exportSession(this.sessionId);
  }
}
