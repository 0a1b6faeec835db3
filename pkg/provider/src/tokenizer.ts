/**
 * Tokenizer shared with the Python retrieval package, replicated exactly:
 * words are maximal runs of Unicode letters/digits/underscore, the `[DOWN]`
 * separator passes through as a single token, words split on underscores
 * and camelCase humps, and every subtoken is lowercased. Token ids hash the
 * UTF-8 bytes with 64-bit FNV-1a into [0, vocabSize); `[DOWN]` gets the
 * reserved id vocabSize.
 */

export const DOWN_TOKEN = "[DOWN]";

// Python's \w (Unicode) is letters + digits + underscore.
const WORD_RE = /\[DOWN\]|[\p{L}\p{N}_]+/gu;
// CamelCase humps, acronym runs, and digit runs within a word piece.
const HUMP_RE = /[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+/g;

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = (1n << 64n) - 1n;

const utf8 = new TextEncoder();

export function fnv1a64(text: string): bigint {
  let hash = FNV_OFFSET;
  for (const byte of utf8.encode(text)) {
    hash ^= BigInt(byte);
    hash = (hash * FNV_PRIME) & MASK64;
  }
  return hash;
}

export interface TokenAt {
  token: string;
  /** Offset of the source word in Unicode code points (not UTF-16 units),
   * matching how segment spans are produced on the Python side. */
  start: number;
}

/** Maps UTF-16 indices to code-point indices; identity for BMP-only text. */
function codePointIndexer(text: string): (utf16Index: number) => number {
  if (!/[\uD800-\uDFFF]/.test(text)) {
    return (i) => i;
  }
  const map = new Map<number, number>();
  let codePoint = 0;
  let i = 0;
  while (i < text.length) {
    map.set(i, codePoint);
    const cp = text.codePointAt(i)!;
    i += cp > 0xffff ? 2 : 1;
    codePoint += 1;
  }
  map.set(text.length, codePoint);
  return (idx) => map.get(idx) ?? codePoint;
}

export function tokenizeWithOffsets(text: string): TokenAt[] {
  const toCodePoint = codePointIndexer(text);
  const out: TokenAt[] = [];
  for (const match of text.matchAll(WORD_RE)) {
    const word = match[0];
    const start = toCodePoint(match.index!);
    if (word === DOWN_TOKEN) {
      out.push({ token: DOWN_TOKEN, start });
      continue;
    }
    for (const piece of word.split("_")) {
      if (!piece) {
        continue;
      }
      const humps = piece.match(HUMP_RE);
      if (!humps) {
        out.push({ token: piece.toLowerCase(), start });
        continue;
      }
      for (const hump of humps) {
        out.push({ token: hump.toLowerCase(), start });
      }
    }
  }
  return out;
}

export function splitTokens(text: string): string[] {
  return tokenizeWithOffsets(text).map((t) => t.token);
}

export function hashToken(token: string, vocabSize: number): number {
  if (token === DOWN_TOKEN) {
    return vocabSize;
  }
  return Number(fnv1a64(token) % BigInt(vocabSize));
}
