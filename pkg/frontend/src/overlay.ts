/**
 * Mask overlay state: one decoded bitmap per mask, colored per id, with the
 * selected mask highlighted. Pure data + RGBA compositing; the canvas layer
 * lives in main.ts so everything here runs in plain unit tests.
 */

import { decodeRle, type Rle } from "./rle.js";
import type { MaskResponse } from "./schema.js";

export interface OverlayMask {
  id: number;
  source: "automatic" | "user";
  score: number | null;
  historyLength: number;
  rle: Rle;
  bitmap: Uint8Array; // row-major, 1 = foreground
}

// distinct fill colors cycled per mask id
export const MASK_COLORS: Array<[number, number, number]> = [
  [251, 146, 60],
  [59, 130, 246],
  [34, 197, 94],
  [168, 85, 247],
  [236, 72, 153],
  [6, 182, 212],
  [245, 158, 11],
  [99, 102, 241],
];

export class OverlayState {
  readonly masks = new Map<number, OverlayMask>();
  selectedId: number | null = null;

  constructor(
    public readonly height: number,
    public readonly width: number,
  ) {}

  /** Insert or update a mask from a server response (server is truth). */
  apply(response: MaskResponse): OverlayMask {
    const [h, w] = response.rle.size;
    if (h !== this.height || w !== this.width) {
      throw new Error(`mask ${response.id} is ${h}x${w}, overlay is ${this.height}x${this.width}`);
    }
    const mask: OverlayMask = {
      id: response.id,
      source: response.source,
      score: response.score,
      historyLength: response.history_length,
      rle: response.rle,
      bitmap: decodeRle(response.rle),
    };
    this.masks.set(mask.id, mask);
    return mask;
  }

  /** Replace all automatic masks with a fresh detector run. */
  replaceAutomatic(responses: MaskResponse[]): void {
    for (const [id, mask] of [...this.masks]) {
      if (mask.source === "automatic") this.masks.delete(id);
    }
    for (const r of responses) this.apply(r);
    if (this.selectedId !== null && !this.masks.has(this.selectedId)) {
      this.selectedId = null;
    }
  }

  remove(id: number): void {
    this.masks.delete(id);
    if (this.selectedId === id) this.selectedId = null;
  }

  select(id: number | null): void {
    if (id !== null && !this.masks.has(id)) throw new Error(`no mask ${id}`);
    this.selectedId = id;
  }

  /** Topmost mask under an image pixel (iteration order = insertion). */
  maskAt(row: number, col: number): number | null {
    let hit: number | null = null;
    for (const mask of this.masks.values()) {
      if (mask.bitmap[row * this.width + col]) hit = mask.id;
    }
    return hit;
  }

  /**
   * Composite every mask into one RGBA buffer (premultiplied look, straight
   * alpha). The selected mask renders at higher opacity.
   */
  renderRgba(): Uint8ClampedArray {
    const out = new Uint8ClampedArray(this.height * this.width * 4);
    for (const mask of this.masks.values()) {
      const [r, g, b] = MASK_COLORS[mask.id % MASK_COLORS.length];
      const alpha = mask.id === this.selectedId ? 200 : 110;
      for (let i = 0; i < mask.bitmap.length; i++) {
        if (!mask.bitmap[i]) continue;
        const o = i * 4;
        out[o] = r;
        out[o + 1] = g;
        out[o + 2] = b;
        out[o + 3] = Math.max(out[o + 3], alpha);
      }
    }
    return out;
  }
}
