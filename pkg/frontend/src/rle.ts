// Run-length mask codec matching the server's graph-document schema:
// space-separated run lengths over the row-major raster, alternating value
// 0/1 and always starting with the zero run (possibly "0").

export function rleEncode(bits: ArrayLike<number>): string {
  const n = bits.length;
  if (n === 0) return "";
  const runs: number[] = [];
  let current = 0;
  let length = 0;
  if (bits[0] === 1) runs.push(0), (current = 1);
  for (let i = 0; i < n; i++) {
    const v = bits[i] === 1 ? 1 : 0;
    if (v === current) {
      length++;
    } else {
      runs.push(length);
      current = v;
      length = 1;
    }
  }
  runs.push(length);
  return runs.join(" ");
}

export function rleDecode(rle: string, size: [number, number]): Uint8Array {
  const total = size[0] * size[1];
  const out = new Uint8Array(total);
  if (rle.trim() === "") {
    if (total !== 0) throw new Error("empty run-length string for nonempty mask");
    return out;
  }
  let pos = 0;
  let value = 0;
  for (const token of rle.trim().split(/\s+/)) {
    const run = Number(token);
    if (!Number.isInteger(run) || run < 0) throw new Error(`bad run length ${token}`);
    if (value === 1) out.fill(1, pos, pos + run);
    pos += run;
    value ^= 1;
  }
  if (pos !== total) throw new Error(`run lengths sum to ${pos}, expected ${total}`);
  return out;
}
