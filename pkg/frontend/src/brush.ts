// Brush mask model: paint circles onto a binary grid sized to the frame,
// then serialize to the same RLE document the server-side schema accepts.

import { rleDecode, rleEncode } from "./rle.js";
import type { MaskDoc } from "./types.js";

export class BrushMask {
  readonly bits: Uint8Array;

  constructor(
    public readonly height: number,
    public readonly width: number,
    bits?: Uint8Array,
  ) {
    this.bits = bits ?? new Uint8Array(height * width);
  }

  static fromDoc(doc: MaskDoc): BrushMask {
    const [h, w] = doc.size;
    return new BrushMask(h, w, rleDecode(doc.rle, [h, w]));
  }

  paint(row: number, col: number, radius: number, value: 0 | 1 = 1): void {
    const r2 = radius * radius;
    const r0 = Math.max(0, Math.floor(row - radius));
    const r1 = Math.min(this.height - 1, Math.ceil(row + radius));
    const c0 = Math.max(0, Math.floor(col - radius));
    const c1 = Math.min(this.width - 1, Math.ceil(col + radius));
    for (let r = r0; r <= r1; r++) {
      for (let c = c0; c <= c1; c++) {
        if ((r - row) ** 2 + (c - col) ** 2 <= r2) {
          this.bits[r * this.width + c] = value;
        }
      }
    }
  }

  clear(): void {
    this.bits.fill(0);
  }

  count(): number {
    let n = 0;
    for (const b of this.bits) n += b;
    return n;
  }

  isEmpty(): boolean {
    return this.count() === 0;
  }

  toDoc(): MaskDoc {
    return { size: [this.height, this.width], rle: rleEncode(this.bits) };
  }
}
