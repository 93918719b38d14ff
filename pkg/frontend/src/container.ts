/**
 * FPQT tensor container (binary, little-endian).
 *
 * Layout: magic "FPQT", u32 version = 1, u64 tensor count; per tensor:
 * u32 name byte length, UTF-8 name, u8 dtype (0 = float32), u8 rank,
 * rank x u64 dims, row-major float32 payload.
 */

export const MAGIC = "FPQT";
export const VERSION = 1;

export interface NamedTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

export function tensorBytes(t: NamedTensor): number {
  const nameLen = Buffer.byteLength(t.name, "utf8");
  return 4 + nameLen + 2 + 8 * t.shape.length + 4 * t.data.length;
}

export function encodeContainer(tensors: NamedTensor[]): Buffer {
  let total = 4 + 4 + 8;
  for (const t of tensors) {
    const count = t.shape.reduce((a, b) => a * b, 1);
    if (count !== t.data.length) {
      throw new Error(
        `tensor ${t.name}: shape product ${count} != data length ${t.data.length}`,
      );
    }
    total += tensorBytes(t);
  }
  const buf = Buffer.alloc(total);
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let off = 0;
  buf.write(MAGIC, off, "ascii");
  off += 4;
  view.setUint32(off, VERSION, true);
  off += 4;
  view.setBigUint64(off, BigInt(tensors.length), true);
  off += 8;
  for (const t of tensors) {
    const nameBuf = Buffer.from(t.name, "utf8");
    view.setUint32(off, nameBuf.length, true);
    off += 4;
    nameBuf.copy(buf, off);
    off += nameBuf.length;
    view.setUint8(off, 0); // dtype float32
    off += 1;
    view.setUint8(off, t.shape.length);
    off += 1;
    for (const dim of t.shape) {
      view.setBigUint64(off, BigInt(dim), true);
      off += 8;
    }
    for (let i = 0; i < t.data.length; i++) {
      view.setFloat32(off, t.data[i], true);
      off += 4;
    }
  }
  return buf;
}

export function decodeContainer(buf: Buffer): NamedTensor[] {
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  let off = 0;
  const need = (n: number) => {
    if (off + n > buf.length) {
      throw new Error(`container truncated at offset ${off}`);
    }
  };
  need(4);
  if (buf.toString("ascii", 0, 4) !== MAGIC) throw new Error("bad magic");
  off = 4;
  need(4);
  const version = view.getUint32(off, true);
  off += 4;
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  need(8);
  const count = Number(view.getBigUint64(off, true));
  off += 8;
  const out: NamedTensor[] = [];
  for (let i = 0; i < count; i++) {
    need(4);
    const nameLen = view.getUint32(off, true);
    off += 4;
    need(nameLen);
    const name = buf.toString("utf8", off, off + nameLen);
    off += nameLen;
    need(2);
    const dtype = view.getUint8(off);
    off += 1;
    if (dtype !== 0) throw new Error(`tensor ${name}: unsupported dtype ${dtype}`);
    const rank = view.getUint8(off);
    off += 1;
    const shape: number[] = [];
    let n = 1;
    for (let d = 0; d < rank; d++) {
      need(8);
      const dim = Number(view.getBigUint64(off, true));
      off += 8;
      shape.push(dim);
      n *= dim;
    }
    need(4 * n);
    const data = new Float32Array(n);
    for (let j = 0; j < n; j++) {
      data[j] = view.getFloat32(off, true);
      off += 4;
    }
    out.push({ name, shape, data });
  }
  if (off !== buf.length) {
    throw new Error(`${buf.length - off} trailing bytes after last tensor`);
  }
  return out;
}
