import { readFileSync } from "node:fs";

import { describe, expect, it } from "vitest";

import { DOWN_TOKEN, fnv1a64, hashToken, splitTokens, tokenizeWithOffsets } from "../src/tokenizer.js";

const golden = JSON.parse(
  readFileSync(new URL("./fixtures/golden.json", import.meta.url), "utf-8"),
);

describe("fnv1a64", () => {
  it("matches the reference hashes byte for byte", () => {
    for (const [token, decimal] of Object.entries<string>(golden.fnv1a_64)) {
      expect(fnv1a64(token).toString()).toBe(decimal);
    }
  });
});

describe("tokenizeWithOffsets", () => {
  it("reproduces the reference tokens and word offsets on every case", () => {
    for (const c of golden.cases) {
      const got = tokenizeWithOffsets(c.text);
      expect(got.map((t) => t.token)).toEqual(c.tokens);
      expect(got.map((t) => t.start)).toEqual(c.offsets);
    }
  });

  it("keeps the separator atomic between words", () => {
    expect(splitTokens(`alpha${DOWN_TOKEN}beta`)).toEqual(["alpha", DOWN_TOKEN, "beta"]);
    expect(splitTokens(DOWN_TOKEN)).toEqual([DOWN_TOKEN]);
    expect(splitTokens(`${DOWN_TOKEN}${DOWN_TOKEN}`)).toEqual([DOWN_TOKEN, DOWN_TOKEN]);
  });

  it("splits underscores, camel humps, acronyms and digit runs", () => {
    expect(splitTokens("parseHTTPResponse2")).toEqual(["parse", "http", "response", "2"]);
    expect(splitTokens("snake_case __dunder__")).toEqual(["snake", "case", "dunder"]);
    expect(splitTokens("x + y * 12")).toEqual(["x", "y", "12"]);
    expect(splitTokens("...")).toEqual([]);
  });

  it("reports offsets in code points for astral-plane text", () => {
    // "𝕏" is one code point but two UTF-16 units.
    const tokens = tokenizeWithOffsets("\u{1D54F} abc");
    expect(tokens.map((t) => [t.token, t.start])).toEqual([["\u{1D54F}".toLowerCase(), 0], ["abc", 2]]);
  });
});

describe("hashToken", () => {
  it("maps the separator to the reserved id and everything else below it", () => {
    const vocab = golden.vocab_size as number;
    expect(hashToken(DOWN_TOKEN, vocab)).toBe(vocab);
    for (const token of ["run", "helper", "x"]) {
      const id = hashToken(token, vocab);
      expect(id).toBeGreaterThanOrEqual(0);
      expect(id).toBeLessThan(vocab);
      expect(id).toBe(Number(BigInt(golden.fnv1a_64[token]) % BigInt(vocab)));
    }
  });
});
