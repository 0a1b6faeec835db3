/**
 * The two-endpoint wire protocol:
 *
 *   GET  /info   -> { model, dim, max_tokens, normalizes, special_tokens }
 *   POST /embed  -> { vectors: number[][] } for { texts, segment_spans? }
 *
 * Vectors come back one per text, order preserved, always unit-norm
 * (normalizes: true). When an auth token is configured, both endpoints
 * require `Authorization: Bearer <token>`; the token value is never logged.
 */

import express, { type Express, type NextFunction, type Request, type Response } from "express";
import { z } from "zod";

import { DOWN_TOKEN, embed, type SegmentSpan, type ToyParams } from "./encoder.js";

export const TOKEN_ENV_VAR = "CORET_PROVIDER_TOKEN";

const spanSchema = z.tuple([
  z.number().int().nonnegative(),
  z.number().int().nonnegative(),
  z.enum(["base", "neighbor"]),
]);

const embedRequestSchema = z.object({
  texts: z.array(z.string()),
  segment_spans: z.array(z.union([z.array(spanSchema), z.null()])).optional(),
});

export interface AppOptions {
  /** Bearer token required on every request; omit to disable auth. */
  token?: string;
}

export function buildApp(params: ToyParams, model: string, options: AppOptions = {}): Express {
  const app = express();
  app.use(express.json({ limit: "32mb" }));

  if (options.token !== undefined && options.token !== "") {
    const expected = `Bearer ${options.token}`;
    app.use((req: Request, res: Response, next: NextFunction) => {
      if (req.headers.authorization !== expected) {
        res.status(401).json({ error: "unauthorized" });
        return;
      }
      next();
    });
  }

  app.get("/info", (_req: Request, res: Response) => {
    res.json({
      model,
      dim: params.dim,
      max_tokens: params.maxTokens,
      normalizes: true,
      special_tokens: [DOWN_TOKEN],
    });
  });

  app.post("/embed", (req: Request, res: Response) => {
    const parsed = embedRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ error: `bad request: ${parsed.error.issues[0]?.message ?? "invalid body"}` });
      return;
    }
    const { texts, segment_spans: spans } = parsed.data;
    if (spans !== undefined && spans.length !== texts.length) {
      res.status(400).json({
        error: `segment_spans length ${spans.length} does not match texts length ${texts.length}`,
      });
      return;
    }
    const vectors: number[][] = [];
    for (let i = 0; i < texts.length; i++) {
      const textSpans = (spans?.[i] ?? null) as SegmentSpan[] | null;
      try {
        vectors.push(embed(params, texts[i], textSpans));
      } catch (err) {
        res.status(400).json({ error: `text ${i}: ${err instanceof Error ? err.message : String(err)}` });
        return;
      }
    }
    res.json({ vectors });
  });

  return app;
}
