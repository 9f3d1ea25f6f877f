/**
 * Typed client for the annotation service. The fetch implementation is
 * injectable so tests can run against a scripted server.
 */

import {
  autoResponseSchema,
  errorResponseSchema,
  exportSchema,
  maskResponseSchema,
  sessionResponseSchema,
  type ExportDocument,
  type MaskResponse,
  type Prompt,
  type SessionResponse,
} from "./schema.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<never> {
  let code = "model_error";
  let message = `HTTP ${response.status}`;
  try {
    const body = errorResponseSchema.parse(await response.json());
    code = body.error.code;
    message = body.error.message;
  } catch {
    // non-JSON error body; keep the defaults
  }
  throw new ApiError(code, message, response.status);
}

export class AnnotationClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
  ) {}

  private async json<T>(url: string, init: RequestInit, parse: (data: unknown) => T): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${url}`, init);
    if (!response.ok) await parseError(response);
    return parse(await response.json());
  }

  createSession(image: Blob | ArrayBuffer): Promise<SessionResponse> {
    return this.json("/sessions", { method: "POST", body: image as BodyInit }, (d) =>
      sessionResponseSchema.parse(d),
    );
  }

  autoSegment(sessionId: string): Promise<MaskResponse[]> {
    return this.json(`/sessions/${sessionId}/auto`, { method: "POST" }, (d) =>
      autoResponseSchema.parse(d).masks,
    );
  }

  addMask(sessionId: string, prompt: Prompt): Promise<MaskResponse> {
    return this.json(
      `/sessions/${sessionId}/masks`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(prompt),
      },
      (d) => maskResponseSchema.parse(d),
    );
  }

  refineMask(sessionId: string, maskId: number, prompt: Prompt): Promise<MaskResponse> {
    return this.json(
      `/sessions/${sessionId}/masks/${maskId}/prompts`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(prompt),
      },
      (d) => maskResponseSchema.parse(d),
    );
  }

  undoLastPrompt(sessionId: string, maskId: number): Promise<MaskResponse> {
    return this.json(
      `/sessions/${sessionId}/masks/${maskId}/prompts/last`,
      { method: "DELETE" },
      (d) => maskResponseSchema.parse(d),
    );
  }

  async removeMask(sessionId: string, maskId: number): Promise<void> {
    const response = await this.fetchImpl(`${this.baseUrl}/sessions/${sessionId}/masks/${maskId}`, {
      method: "DELETE",
    });
    if (!response.ok) await parseError(response);
  }

  exportSession(sessionId: string): Promise<ExportDocument> {
    return this.json(`/sessions/${sessionId}/export`, { method: "GET" }, (d) =>
      exportSchema.parse(d),
    );
  }
}
