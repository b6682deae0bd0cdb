/**
 * Binary mask run-length decoding, matching the service wire format:
 * row-major alternating run lengths starting with a zero-run (first entry
 * is 0 when the mask begins with foreground). Runs must sum to h*w.
 */

export function decodeRle(runs: number[], h: number, w: number): Uint8Array {
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== h * w) {
    throw new Error(`run lengths sum to ${total}, expected ${h * w}`);
  }
  const out = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const run of runs) {
    if (run < 0) throw new Error("run lengths must be non-negative");
    if (value) out.fill(1, pos, pos + run);
    pos += run;
    value ^= 1;
  }
  return out;
}

/** Inverse of decodeRle; used by tests and the export path. */
export function encodeRle(mask: Uint8Array): number[] {
  const runs: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 1 : 0;
    if (v === value) {
      run++;
    } else {
      runs.push(run);
      value = v;
      run = 1;
    }
  }
  if (mask.length > 0) runs.push(run);
  return runs;
}
