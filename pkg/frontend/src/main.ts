/**
 * Browser bootstrap: canvas layers, toolbar, and event wiring around the
 * SessionController. Everything testable lives in the other modules.
 */

import { AnnotationClient } from "./api.js";
import { SessionController, type ToolMode } from "./session.js";

const BASE_URL = (window as { PROMPTSEG_API?: string }).PROMPTSEG_API ?? "";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class App {
  private controller: SessionController | null = null;
  private image: HTMLImageElement | null = null;
  private canvas = el<HTMLCanvasElement>("canvas");
  private ctx = this.canvas.getContext("2d")!;
  private overlayCanvas = document.createElement("canvas");
  private status = el<HTMLSpanElement>("status");
  private dragStart: { x: number; y: number } | null = null;

  constructor(private client: AnnotationClient) {
    el<HTMLInputElement>("file").addEventListener("change", (e) => this.onUpload(e));
    el<HTMLButtonElement>("auto").addEventListener("click", () => this.onAuto());
    el<HTMLButtonElement>("undo").addEventListener("click", () => this.onUndo());
    el<HTMLButtonElement>("remove").addEventListener("click", () => this.onRemove());
    el<HTMLButtonElement>("export").addEventListener("click", () => this.onExport());
    for (const tool of ["positive-point", "negative-point", "box", "select"] as ToolMode[]) {
      el<HTMLInputElement>(`tool-${tool}`).addEventListener("change", () => {
        if (this.controller) this.controller.tool = tool;
      });
    }
    this.canvas.addEventListener("mousedown", (e) => this.onMouseDown(e));
    this.canvas.addEventListener("mouseup", (e) => this.onMouseUp(e));
    this.canvas.addEventListener("contextmenu", (e) => e.preventDefault());
    this.canvas.addEventListener("wheel", (e) => this.onWheel(e), { passive: false });
    window.addEventListener("keydown", (e) => {
      if ((e.ctrlKey || e.metaKey) && e.key === "z") this.onUndo();
    });
  }

  private setStatus(text: string): void {
    this.status.textContent = text;
  }

  private async onUpload(event: Event): Promise<void> {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    try {
      const session = await this.client.createSession(file);
      const controller = new SessionController(
        this.client,
        session.session_id,
        session.height,
        session.width,
      );
      controller.onchange = () => this.render();
      controller.onerror = (message) => this.setStatus(`error: ${message}`);
      this.controller = controller;
      this.image = new Image();
      this.image.onload = () => this.render();
      this.image.src = URL.createObjectURL(file);
      this.canvas.width = session.width;
      this.canvas.height = session.height;
      this.overlayCanvas.width = session.width;
      this.overlayCanvas.height = session.height;
      this.setStatus(`session ${session.session_id.slice(0, 8)} (${session.width}x${session.height})`);
    } catch (err) {
      this.setStatus(`upload failed: ${err instanceof Error ? err.message : err}`);
    }
  }

  private async onAuto(): Promise<void> {
    if (!this.controller) return;
    const n = await this.controller.runAuto();
    this.setStatus(n > 0 ? `${n} automatic masks` : "no automatic masks (manual mode still works)");
    this.render();
  }

  private async onUndo(): Promise<void> {
    if (!this.controller) return;
    await this.controller.undoLast();
    this.render();
  }

  private async onRemove(): Promise<void> {
    if (!this.controller) return;
    await this.controller.removeSelected();
    this.render();
  }

  private async onExport(): Promise<void> {
    if (!this.controller) return;
    const doc = await this.controller.exportAnnotations();
    const blob = new Blob([JSON.stringify(doc, null, 2)], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "annotations.json";
    a.click();
  }

  private pointer(e: MouseEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private onMouseDown(e: MouseEvent): void {
    this.dragStart = this.pointer(e);
  }

  private async onMouseUp(e: MouseEvent): Promise<void> {
    if (!this.controller || !this.dragStart) return;
    const start = this.dragStart;
    this.dragStart = null;
    const end = this.pointer(e);
    // right button = negative point regardless of the point tool polarity
    if (e.button === 2 && this.controller.tool !== "box") {
      const saved = this.controller.tool;
      this.controller.tool = "negative-point";
      await this.controller.placePrompt(end);
      this.controller.tool = saved;
    } else if (this.controller.tool === "box") {
      await this.controller.placePrompt(start, end);
    } else {
      await this.controller.placePrompt(end);
    }
    this.render();
  }

  private onWheel(e: WheelEvent): void {
    if (!this.controller) return;
    e.preventDefault();
    const factor = e.deltaY < 0 ? 1.25 : 0.8;
    this.controller.transform = this.controller.transform.zoomAt(factor, this.pointer(e));
    this.render();
  }

  private render(): void {
    if (!this.controller || !this.image) return;
    const { height, width } = this.controller.overlay;
    const t = this.controller.transform;
    this.ctx.setTransform(1, 0, 0, 1, 0, 0);
    this.ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    this.ctx.setTransform(t.zoom, 0, 0, t.zoom, t.panX, t.panY);
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(this.image, 0, 0);
    const rgba = this.controller.overlay.renderRgba();
    const imageData = new ImageData(new Uint8ClampedArray(rgba), width, height);
    this.overlayCanvas.getContext("2d")!.putImageData(imageData, 0, 0);
    this.ctx.drawImage(this.overlayCanvas, 0, 0);
    const undo = el<HTMLButtonElement>("undo");
    undo.disabled = !this.controller.canUndo();
  }
}

new App(new AnnotationClient(BASE_URL));
