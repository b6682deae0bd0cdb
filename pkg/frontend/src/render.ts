/**
 * Pure rendering helpers: mask overlay RGBA buffers and point colors.
 * Kept DOM-free so tests can compare pixel buffers directly.
 */

import { Point } from "./api.js";

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

export const MASK_FILL: Rgba = { r: 26, g: 140, b: 242, a: 255 };

// polarity colors: green positive, red negative; artery-vein uses the
// red/cyan vessel palette with yellow background negatives
export const POSITIVE_GREEN = "#1ac21a";
export const NEGATIVE_RED = "#e03030";
export const ARTERY_RED = "#e03030";
export const VEIN_CYAN = "#20c8d0";
export const BACKGROUND_YELLOW = "#e8d024";

export function pointColor(task: string, polarity: 0 | 1): string {
  if (task === "artery" || task === "vein") {
    if (polarity === 1) return task === "artery" ? ARTERY_RED : VEIN_CYAN;
    return BACKGROUND_YELLOW;
  }
  return polarity === 1 ? POSITIVE_GREEN : NEGATIVE_RED;
}

/**
 * Binary mask -> RGBA buffer (length 4*w*h) with the given fill color and
 * opacity in [0, 1]; background pixels are fully transparent.
 */
export function overlayRgba(
  mask: Uint8Array,
  w: number,
  h: number,
  opacity: number,
  fill: Rgba = MASK_FILL
): Uint8ClampedArray<ArrayBuffer> {
  if (mask.length !== w * h) {
    throw new Error(`mask length ${mask.length} != ${w}x${h}`);
  }
  const out = new Uint8ClampedArray(new ArrayBuffer(4 * w * h));
  const alpha = Math.round(255 * Math.max(0, Math.min(1, opacity)));
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      out[4 * i] = fill.r;
      out[4 * i + 1] = fill.g;
      out[4 * i + 2] = fill.b;
      out[4 * i + 3] = alpha;
    }
  }
  return out;
}

/** Grayscale PNG-ready buffer of the binary mask (0 or 255 per pixel). */
export function maskToGrayRgba(mask: Uint8Array, w: number, h: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(4 * w * h));
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 255 : 0;
    out[4 * i] = v;
    out[4 * i + 1] = v;
    out[4 * i + 2] = v;
    out[4 * i + 3] = 255;
  }
  return out;
}

export function exportFilename(sessionId: string): string {
  return `mask-${sessionId}.png`;
}

export interface RenderedPoint extends Point {
  color: string;
}

export function renderPoints(points: Point[], task: string): RenderedPoint[] {
  return points.map((p) => ({ ...p, color: pointColor(task, p.polarity) }));
}
