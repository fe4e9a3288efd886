/** Saliency overlay rendering as pure pixel-buffer operations.
 *
 * Buffers use the ImageData layout (RGBA, row-major, Uint8ClampedArray) so
 * they can be put straight onto a canvas, but nothing here touches the DOM.
 * applyOverlay never mutates its input; restoring the original display is
 * done by painting the untouched base buffer again.
 */

export interface PixelBuffer {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}

export function makeBuffer(width: number, height: number): PixelBuffer {
  return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

export function cloneBuffer(buffer: PixelBuffer): PixelBuffer {
  return {
    width: buffer.width,
    height: buffer.height,
    data: new Uint8ClampedArray(buffer.data),
  };
}

export function buffersEqual(a: PixelBuffer, b: PixelBuffer): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  if (a.data.length !== b.data.length) return false;
  for (let i = 0; i < a.data.length; i++) {
    if (a.data[i] !== b.data[i]) return false;
  }
  return true;
}

/** Min-max normalize to [0, 1]; a constant map becomes all zeros. */
export function normalizeSaliency(values: number[][]): number[][] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const row of values) {
    for (const v of row) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }
  const span = hi - lo;
  if (!(span > 0)) {
    return values.map((row) => row.map(() => 0));
  }
  return values.map((row) => row.map((v) => (v - lo) / span));
}

/** Diverging blue-white-red ramp: 0 maps to blue, 0.5 to white, 1 to red. */
export function redBlueColor(t: number): [number, number, number] {
  const clamped = Math.min(1, Math.max(0, t));
  if (clamped <= 0.5) {
    const u = clamped * 2;
    return [Math.round(255 * u), Math.round(255 * u), 255];
  }
  const u = (clamped - 0.5) * 2;
  return [255, Math.round(255 * (1 - u)), Math.round(255 * (1 - u))];
}

/** Bilinear sample of a saliency grid at fractional coordinates. */
function sampleBilinear(
  grid: number[][],
  y: number,
  x: number,
): number {
  const rows = grid.length;
  const cols = grid[0].length;
  const y0 = Math.min(rows - 1, Math.max(0, Math.floor(y)));
  const x0 = Math.min(cols - 1, Math.max(0, Math.floor(x)));
  const y1 = Math.min(rows - 1, y0 + 1);
  const x1 = Math.min(cols - 1, x0 + 1);
  const fy = Math.min(1, Math.max(0, y - y0));
  const fx = Math.min(1, Math.max(0, x - x0));
  const top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx;
  const bottom = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx;
  return top * (1 - fy) + bottom * fy;
}

/** Resample a saliency grid to the target pixel dimensions. */
export function resizeSaliency(
  saliency: number[][],
  width: number,
  height: number,
): number[][] {
  const rows = saliency.length;
  const cols = saliency[0].length;
  const out: number[][] = [];
  for (let y = 0; y < height; y++) {
    const row: number[] = [];
    const sy = height > 1 ? (y * (rows - 1)) / (height - 1) : 0;
    for (let x = 0; x < width; x++) {
      const sx = width > 1 ? (x * (cols - 1)) / (width - 1) : 0;
      row.push(sampleBilinear(saliency, sy, sx));
    }
    out.push(row);
  }
  return out;
}

export const OVERLAY_ALPHA = 0.45;

/** Blend a normalized saliency map over a base render.
 *
 * Returns a new buffer; the base is left untouched so toggling the overlay
 * off can restore the exact original bytes.
 */
export function applyOverlay(
  base: PixelBuffer,
  saliency: number[][],
  alpha: number = OVERLAY_ALPHA,
): PixelBuffer {
  const normalized = normalizeSaliency(saliency);
  const resized =
    normalized.length === base.height && normalized[0].length === base.width
      ? normalized
      : resizeSaliency(normalized, base.width, base.height);
  const out = cloneBuffer(base);
  for (let y = 0; y < base.height; y++) {
    for (let x = 0; x < base.width; x++) {
      const [r, g, b] = redBlueColor(resized[y][x]);
      const i = (y * base.width + x) * 4;
      out.data[i] = Math.round(base.data[i] * (1 - alpha) + r * alpha);
      out.data[i + 1] = Math.round(base.data[i + 1] * (1 - alpha) + g * alpha);
      out.data[i + 2] = Math.round(base.data[i + 2] * (1 - alpha) + b * alpha);
      out.data[i + 3] = 255;
    }
  }
  return out;
}
