/** Runtime validation of the service wire formats. */

import { z } from "zod";

export const rleSchema = z.object({
  size: z.tuple([z.number().int().positive(), z.number().int().positive()]),
  counts: z.array(z.number().int().nonnegative()),
});

export const maskResponseSchema = z.object({
  id: z.number().int().nonnegative(),
  source: z.enum(["automatic", "user"]),
  score: z.number().min(0).max(1).nullable(),
  rle: rleSchema,
  history_length: z.number().int().positive(),
});

export const autoResponseSchema = z.object({
  masks: z.array(maskResponseSchema),
});

export const sessionResponseSchema = z.object({
  session_id: z.string().min(1),
  height: z.number().int().positive(),
  width: z.number().int().positive(),
  created_at: z.string(),
});

export const errorResponseSchema = z.object({
  error: z.object({
    code: z.enum(["bad_request", "not_found", "model_error", "io_error"]),
    message: z.string(),
  }),
});

const promptSchema = z.union([
  z.object({
    type: z.literal("point"),
    row: z.number().int().nonnegative(),
    col: z.number().int().nonnegative(),
    positive: z.boolean(),
  }),
  z.object({
    type: z.literal("box"),
    row_min: z.number().int().nonnegative(),
    col_min: z.number().int().nonnegative(),
    row_max: z.number().int().nonnegative(),
    col_max: z.number().int().nonnegative(),
  }),
]);

/** Annotation export, schema version 1. */
export const exportSchema = z.object({
  schema: z.literal(1),
  image: z.object({
    id: z.string(),
    height: z.number().int().positive(),
    width: z.number().int().positive(),
  }),
  exported_at: z.string(),
  masks: z.array(
    z.object({
      id: z.number().int().nonnegative(),
      source: z.enum(["automatic", "user"]),
      score: z.number().min(0).max(1).nullable(),
      rle: rleSchema,
      prompts: z.array(promptSchema),
      created_at: z.string(),
      updated_at: z.string(),
    }),
  ),
});

export type MaskResponse = z.infer<typeof maskResponseSchema>;
export type SessionResponse = z.infer<typeof sessionResponseSchema>;
export type ExportDocument = z.infer<typeof exportSchema>;
export type Prompt = z.infer<typeof promptSchema>;
