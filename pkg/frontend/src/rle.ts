/**
 * Column-major run-length masks, matching the service wire format:
 * counts alternate background/foreground and always start with background.
 */

export interface Rle {
  size: [number, number]; // [height, width]
  counts: number[];
}

/** Decode to a row-major Uint8Array (1 = foreground). */
export function decodeRle(rle: Rle): Uint8Array {
  const [height, width] = rle.size;
  if (height < 1 || width < 1) {
    throw new Error(`invalid RLE size ${rle.size}`);
  }
  const total = height * width;
  let sum = 0;
  for (const c of rle.counts) {
    if (c < 0 || !Number.isInteger(c)) throw new Error(`invalid run length ${c}`);
    sum += c;
  }
  if (sum !== total) {
    throw new Error(`run lengths sum to ${sum}, expected ${total}`);
  }
  const out = new Uint8Array(total);
  let pos = 0; // position in column-major order
  let value = 0;
  for (const count of rle.counts) {
    if (value === 1) {
      for (let i = pos; i < pos + count; i++) {
        const row = i % height;
        const col = (i - row) / height;
        out[row * width + col] = 1;
      }
    }
    pos += count;
    value = 1 - value;
  }
  return out;
}

/** Encode a row-major bitmap back to the wire format. */
export function encodeRle(mask: Uint8Array, height: number, width: number): Rle {
  if (mask.length !== height * width) {
    throw new Error(`mask length ${mask.length} != ${height}x${width}`);
  }
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (let col = 0; col < width; col++) {
    for (let row = 0; row < height; row++) {
      const v = mask[row * width + col] ? 1 : 0;
      if (v === current) {
        run += 1;
      } else {
        counts.push(run);
        current = v;
        run = 1;
      }
    }
  }
  counts.push(run);
  return { size: [height, width], counts };
}

export function maskArea(rle: Rle): number {
  let area = 0;
  for (let i = 1; i < rle.counts.length; i += 2) area += rle.counts[i];
  return area;
}
