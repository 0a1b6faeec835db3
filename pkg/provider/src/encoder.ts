/**
 * Embedding model served by the provider: mean of (token-projection row +
 * segment offset), l2-normalized. Weights load from a `coret-toy-params`
 * file (one JSON header line, then the raw little-endian float64 projection
 * and segment-offset matrices) or fall back to deterministic seeded
 * initialization so the service runs without any artifact.
 */

import { DOWN_TOKEN, hashToken, tokenizeWithOffsets } from "./tokenizer.js";

export const SEGMENT_KINDS = ["base", "neighbor"] as const;
export type SegmentKind = (typeof SEGMENT_KINDS)[number];

/** [charStart, charEnd, kind] — the wire form of one segment span. */
export type SegmentSpan = [number, number, SegmentKind];

export interface ToyParams {
  vocabSize: number;
  dim: number;
  maxTokens: number;
  seed: number;
  /** (vocabSize + 1) x dim row-major; the extra row is `[DOWN]`. */
  projection: Float64Array;
  /** 2 x dim row-major: base offset row, neighbor offset row. */
  segmentOffsets: Float64Array;
}

const PARAMS_FORMAT = "coret-toy-params";

export function loadParams(blob: Buffer): ToyParams {
  const newline = blob.indexOf(0x0a);
  if (newline < 0) {
    throw new Error("not a toy params file: missing header line");
  }
  let header: Record<string, unknown>;
  try {
    header = JSON.parse(blob.subarray(0, newline).toString("utf-8"));
  } catch {
    throw new Error("not a toy params file: header is not JSON");
  }
  if (header.format !== PARAMS_FORMAT) {
    throw new Error(`unexpected params format: ${String(header.format)}`);
  }
  const vocabSize = Number(header.vocab_size);
  const dim = Number(header.dim);
  const maxTokens = Number(header.max_tokens);
  const seed = Number(header.seed);
  if (!Number.isInteger(vocabSize) || !Number.isInteger(dim) || vocabSize < 1 || dim < 1) {
    throw new Error("params header has invalid vocab_size/dim");
  }
  const projectionCount = (vocabSize + 1) * dim;
  const offsetsCount = 2 * dim;
  const body = blob.subarray(newline + 1);
  if (body.length !== (projectionCount + offsetsCount) * 8) {
    throw new Error(
      `params payload is ${body.length} bytes, expected ${(projectionCount + offsetsCount) * 8}`,
    );
  }
  // Copy into fresh ArrayBuffers: Buffer views may be 8-byte misaligned.
  const raw = body.buffer.slice(body.byteOffset, body.byteOffset + body.length);
  return {
    vocabSize,
    dim,
    maxTokens,
    seed,
    projection: new Float64Array(raw, 0, projectionCount),
    segmentOffsets: new Float64Array(raw.slice(projectionCount * 8), 0, offsetsCount),
  };
}

// --- deterministic fallback initialization ---------------------------------

const SPLITMIX_GAMMA = 0x9e3779b97f4a7c15n;
const M1 = 0xbf58476d1ce4e5b9n;
const M2 = 0x94d049bb133111ebn;
const MASK64 = (1n << 64n) - 1n;

function splitmix64(state: bigint): bigint {
  let z = (state + SPLITMIX_GAMMA) & MASK64;
  z = ((z ^ (z >> 30n)) * M1) & MASK64;
  z = ((z ^ (z >> 27n)) * M2) & MASK64;
  return z ^ (z >> 31n);
}

/** Uniform in [0, 1) from the cell's (seed, index) pair. */
function cellUniform(seed: number, index: number): number {
  let state = BigInt.asUintN(64, BigInt(seed)) & MASK64;
  state = splitmix64((state << 1n) & MASK64);
  const z = splitmix64((state + BigInt(index)) & MASK64);
  return Number(z >> 11n) / 2 ** 53;
}

/**
 * Seeded weights for running without a params file: projection cells
 * uniform in [-1/sqrt(dim), 1/sqrt(dim)] (the `[DOWN]` row included, as the
 * model's default new-token initialization), segment offsets zero.
 */
export function fallbackParams(
  vocabSize = 32768,
  dim = 64,
  maxTokens = 1024,
  seed = 0,
): ToyParams {
  const bound = 1 / Math.sqrt(dim);
  const projection = new Float64Array((vocabSize + 1) * dim);
  for (let i = 0; i < projection.length; i++) {
    projection[i] = (2 * cellUniform(seed, i) - 1) * bound;
  }
  return {
    vocabSize,
    dim,
    maxTokens,
    seed,
    projection,
    segmentOffsets: new Float64Array(2 * dim),
  };
}

// --- encoding and embedding -------------------------------------------------

export function encode(
  text: string,
  vocabSize: number,
  spans: SegmentSpan[] | null,
  maxTokens: number,
): { ids: number[]; kinds: number[] } {
  const resolved: Array<[number, number, number]> = [];
  for (const [s, e, kind] of spans ?? []) {
    const kindIndex = SEGMENT_KINDS.indexOf(kind);
    if (kindIndex < 0) {
      throw new Error(`unknown segment kind: ${kind}`);
    }
    if (s > e) {
      throw new Error(`segment span start ${s} > end ${e}`);
    }
    resolved.push([s, e, kindIndex]);
  }
  const ids: number[] = [];
  const kinds: number[] = [];
  for (const { token, start } of tokenizeWithOffsets(text)) {
    let kind = 0;
    for (const [s, e, k] of resolved) {
      if (s <= start && start < e) {
        kind = k;
        break;
      }
    }
    ids.push(hashToken(token, vocabSize));
    kinds.push(kind);
    if (ids.length === maxTokens) {
      break;
    }
  }
  return { ids, kinds };
}

/** Unit-norm embedding; throws on token-free or degenerate input. */
export function embed(params: ToyParams, text: string, spans: SegmentSpan[] | null): number[] {
  const { ids, kinds } = encode(text, params.vocabSize, spans, params.maxTokens);
  if (ids.length === 0) {
    throw new Error("empty input: text has no tokens");
  }
  const { dim, projection, segmentOffsets } = params;
  const pooled = new Float64Array(dim);
  for (let t = 0; t < ids.length; t++) {
    const row = ids[t] * dim;
    const offset = kinds[t] * dim;
    for (let d = 0; d < dim; d++) {
      pooled[d] += projection[row + d] + segmentOffsets[offset + d];
    }
  }
  let squares = 0;
  for (let d = 0; d < dim; d++) {
    pooled[d] /= ids.length;
    squares += pooled[d] * pooled[d];
  }
  const norm = Math.sqrt(squares);
  if (norm < 1e-12) {
    throw new Error("degenerate embedding: zero vector before normalization");
  }
  return Array.from(pooled, (v) => v / norm);
}

export { DOWN_TOKEN };
