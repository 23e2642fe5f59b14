"""Data pipeline: planar YUV 4:2:0 files, overlapping-patch decomposition
and reassembly, x24 augmentation, the block-DCT codec proxy that stands in
for encoder-degraded inputs, and the on-disk patch-triple dataset.

Dataset layout (one directory per QP under the dataset root):

    qp<NN>/current.tiles    degraded current patches
    qp<NN>/reference.tiles  degraded co-located previous-frame patches
    qp<NN>/truth.tiles      ground-truth patches
    qp<NN>/manifest.tsv     one line per patch: id, source, frame, origin,
                            qp, augmentation tuple

A .tiles file is a small binary header (magic, version, count, tile h/w)
followed by raw 8-bit tiles. Reference policy: frame t pairs with frame
t-1 of the degraded sequence; frame 0 and still images pair with
themselves.
"""

import os
import re
from dataclasses import dataclass

import numpy as np

from .backend import kernels

TILE_MAGIC = b"PTIL"
ROTATIONS = (0, 90, 180)
SCALES = (1.0, 0.75, 0.5, 0.25)
FLIPS = (False, True)


# ---------------------------------------------------------------------------
# YUV 4:2:0 files

@dataclass
class YuvSequence:
    width: int
    height: int
    frames: list  # [(y, cb, cr)] uint8 planes

    @property
    def frame_count(self):
        return len(self.frames)


def _frame_bytes(width, height):
    return width * height * 3 // 2


def read_yuv(path, width, height):
    if width % 2 or height % 2:
        raise ValueError(f"YUV 4:2:0 needs even dimensions, got {width}x{height}")
    raw = np.fromfile(path, np.uint8)
    fb = _frame_bytes(width, height)
    if raw.size == 0 or raw.size % fb:
        raise ValueError(
            f"{path}: {raw.size} bytes is not a whole number of "
            f"{width}x{height} 4:2:0 frames ({fb} bytes each)")
    frames = []
    cw, ch = width // 2, height // 2
    for i in range(raw.size // fb):
        off = i * fb
        y = raw[off : off + width * height].reshape(height, width)
        off += width * height
        cb = raw[off : off + cw * ch].reshape(ch, cw)
        off += cw * ch
        cr = raw[off : off + cw * ch].reshape(ch, cw)
        frames.append((y.copy(), cb.copy(), cr.copy()))
    return YuvSequence(width, height, frames)


def write_yuv(seq, path):
    with open(path, "wb") as fh:
        for y, cb, cr in seq.frames:
            fh.write(np.ascontiguousarray(y, np.uint8).tobytes())
            fh.write(np.ascontiguousarray(cb, np.uint8).tobytes())
            fh.write(np.ascontiguousarray(cr, np.uint8).tobytes())


def gray_to_yuv(planes):
    """Wrap grayscale planes as a YUV sequence with neutral chroma."""
    h, w = planes[0].shape
    cb = np.full((h // 2, w // 2), 128, np.uint8)
    frames = [(np.ascontiguousarray(p, np.uint8), cb.copy(), cb.copy()) for p in planes]
    return YuvSequence(w, h, frames)


# ---------------------------------------------------------------------------
# PGM images (binary P5), used as still-image sources

def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[m.end():], np.uint8, count=w * h)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


def write_pgm(plane, path):
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(plane, np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Overlapping patches

def _axis_origins(size, patch, stride):
    if size < patch:
        raise ValueError(f"plane side {size} smaller than patch {patch}")
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)  # clamp so the last patch touches the border
    return origins


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_size: int = 128
    stride: int = 10

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be positive")
        _axis_origins(self.height, self.patch_size, self.stride)
        _axis_origins(self.width, self.patch_size, self.stride)

    @property
    def origins(self):
        ys = _axis_origins(self.height, self.patch_size, self.stride)
        xs = _axis_origins(self.width, self.patch_size, self.stride)
        return [(y, x) for y in ys for x in xs]


def extract_patches(plane, grid):
    if plane.shape != (grid.height, grid.width):
        raise ValueError(f"plane shape {plane.shape} does not match grid "
                         f"{(grid.height, grid.width)}")
    p = grid.patch_size
    return [plane[y : y + p, x : x + p].copy() for y, x in grid.origins]


def reassemble(patches, grid):
    """Average overlapping contributions (uniform weights).

    Accumulates in float64 so consistent overlaps reproduce the source
    exactly; output keeps the patches' dtype (uint8 values are rounded).
    """
    origins = grid.origins
    if len(patches) != len(origins):
        raise ValueError(f"{len(patches)} patches for {len(origins)} grid origins")
    p = grid.patch_size
    acc = np.zeros((grid.height, grid.width), np.float64)
    cnt = np.zeros((grid.height, grid.width), np.float64)
    for patch, (y, x) in zip(patches, origins):
        acc[y : y + p, x : x + p] += patch
        cnt[y : y + p, x : x + p] += 1.0
    out = acc / cnt
    dtype = patches[0].dtype
    if np.issubdtype(dtype, np.integer):
        return np.rint(out).clip(0, 255).astype(dtype)
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# Augmentation: rotations x scales x flips = 3 * 4 * 2 = 24 variants

def bilinear_resize(plane, out_h, out_w):
    """Half-pixel-centre bilinear resampling, edges clamped."""
    h, w = plane.shape
    src = plane.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(plane.dtype, np.integer):
        return np.rint(out).clip(0, 255).astype(plane.dtype)
    return out.astype(plane.dtype)


def _even(n):
    return max(2, int(2 * round(n / 2)))


def augment(plane):
    """All 24 variants with their (rotation, scale, flip) tuples, ordered
    rotation-major, then scale, then flip. The identity member is the
    input itself (no resampling at scale 1.0)."""
    if plane.size == 0:
        raise ValueError("cannot augment an empty image")
    out = []
    for rot in ROTATIONS:
        rotated = np.rot90(plane, rot // 90).copy()
        for scale in SCALES:
            if scale == 1.0:
                scaled = rotated
            else:
                scaled = bilinear_resize(rotated, _even(rotated.shape[0] * scale),
                                         _even(rotated.shape[1] * scale))
            for flip in FLIPS:
                variant = np.fliplr(scaled).copy() if flip else scaled.copy()
                out.append((variant, (rot, scale, flip)))
    return out


# ---------------------------------------------------------------------------
# Codec proxy: 8x8 orthonormal DCT + uniform quantization

def _dct_basis():
    k = np.arange(8)
    basis = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16)
    basis[0] *= np.sqrt(1.0 / 8)
    basis[1:] *= np.sqrt(2.0 / 8)
    return np.ascontiguousarray(basis)


DCT_BASIS = _dct_basis()


@dataclass(frozen=True)
class CodecProxyConfig:
    qp: int
    block: int = 8

    def __post_init__(self):
        if self.qp < 0:
            raise ValueError(f"qp must be >= 0, got {self.qp}")
        if self.block != 8:
            raise ValueError("only 8x8 transform blocks are supported")

    @property
    def qstep(self):
        return 2.0 ** ((self.qp - 4) / 6.0)


def codec_proxy(plane, cfg):
    """Deterministic degradation: blockwise DCT, uniform quantization with
    step 2^((qp-4)/6), inverse transform, clamp, round to 8 bits. Planes
    whose sides are not multiples of 8 are reflect-padded and cropped."""
    h, w = plane.shape
    ph = (-h) % 8
    pw = (-w) % 8
    work = plane.astype(np.float64)
    if ph or pw:
        work = np.pad(work, ((0, ph), (0, pw)), mode="reflect")
    rec = kernels().dct8_roundtrip(work, cfg.qstep, DCT_BASIS)
    if ph or pw:
        rec = rec[:h, :w]
    return np.rint(rec).astype(np.uint8)


def quantize(coef, qstep):
    """Uniform quantization map; idempotent by construction."""
    return np.rint(coef / qstep) * qstep


# ---------------------------------------------------------------------------
# Normalization

def normalize(plane, dtype=np.float32):
    """8-bit plane -> [0,1] reals."""
    return (plane.astype(np.float64) / 255.0).astype(dtype)


def denormalize(arr):
    """[0,1] reals -> 8-bit plane; out-of-range values are clamped."""
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Sources and the triple store

def load_sources(source_dir):
    """Deterministically ordered (name, [frames]) list from a directory of
    .pgm images and <name>_<W>x<H>.yuv sequences."""
    entries = []
    names = sorted(os.listdir(source_dir))
    for name in names:
        path = os.path.join(source_dir, name)
        if name.lower().endswith(".pgm"):
            entries.append((name, [read_pgm(path)]))
        elif name.lower().endswith(".yuv"):
            m = re.search(r"_(\d+)x(\d+)\.yuv$", name)
            if not m:
                raise ValueError(f"{name}: YUV sources must be named <name>_<W>x<H>.yuv")
            seq = read_yuv(path, int(m.group(1)), int(m.group(2)))
            entries.append((name, [f[0] for f in seq.frames]))  # luma only
    if not entries:
        raise ValueError(f"no .pgm or .yuv sources found in {source_dir}")
    return entries


def write_tiles(path, tiles):
    h, w = tiles[0].shape if tiles else (0, 0)
    with open(path, "wb") as fh:
        fh.write(TILE_MAGIC)
        fh.write(np.uint16(1).tobytes())
        fh.write(np.uint32(len(tiles)).tobytes())
        fh.write(np.uint16(h).tobytes())
        fh.write(np.uint16(w).tobytes())
        for t in tiles:
            fh.write(np.ascontiguousarray(t, np.uint8).tobytes())


def read_tiles(path):
    with open(path, "rb") as fh:
        head = fh.read(4 + 2 + 4 + 2 + 2)
        if head[:4] != TILE_MAGIC:
            raise ValueError(f"{path}: not a tile file")
        count = int(np.frombuffer(head[6:10], np.uint32)[0])
        h = int(np.frombuffer(head[10:12], np.uint16)[0])
        w = int(np.frombuffer(head[12:14], np.uint16)[0])
        data = np.fromfile(fh, np.uint8)
    if data.size != count * h * w:
        raise ValueError(f"{path}: truncated tile data")
    return data.reshape(count, h, w)


def build_dataset(source_dir, qps, out_dir, patch_size=128, stride=10,
                  augment_enabled=False):
    """Build the per-QP triple store from a source directory.

    Deterministic: sources sorted by name, frames in order, augmentation
    variants in their fixed order, patches row-major. Returns per-QP
    patch counts.
    """
    sources = load_sources(source_dir)
    os.makedirs(out_dir, exist_ok=True)
    counts = {}
    for qp in qps:
        cfg = CodecProxyConfig(qp)
        cur_tiles, ref_tiles, gt_tiles, lines = [], [], [], []
        pid = 0
        for name, frames in sources:
            variants = [("r0_s1.0_f0", frames)]
            if augment_enabled:
                # augment each frame consistently; sequences keep frame pairing
                variants = []
                per_frame = [augment(f) for f in frames]
                for vi in range(24):
                    rot, scale, flip = per_frame[0][vi][1]
                    tag = f"r{rot}_s{scale}_f{int(flip)}"
                    variants.append((tag, [pf[vi][0] for pf in per_frame]))
            for tag, var_frames in variants:
                if var_frames[0].shape[0] < patch_size or var_frames[0].shape[1] < patch_size:
                    continue  # scaled-down variants can fall below one patch
                degraded = [codec_proxy(f, cfg) for f in var_frames]
                for fi, frame in enumerate(var_frames):
                    grid = PatchGrid(frame.shape[0], frame.shape[1], patch_size, stride)
                    ref_plane = degraded[fi - 1] if fi > 0 else degraded[fi]
                    cur_p = extract_patches(degraded[fi], grid)
                    ref_p = extract_patches(ref_plane, grid)
                    gt_p = extract_patches(frame, grid)
                    for (oy, ox), cp, rp, gp in zip(grid.origins, cur_p, ref_p, gt_p):
                        cur_tiles.append(cp)
                        ref_tiles.append(rp)
                        gt_tiles.append(gp)
                        lines.append(f"{pid}\t{name}\t{fi}\t{oy}\t{ox}\t{qp}\t{tag}")
                        pid += 1
        if not cur_tiles:
            raise ValueError("no patches produced; sources smaller than the patch size?")
        qdir = os.path.join(out_dir, f"qp{qp}")
        os.makedirs(qdir, exist_ok=True)
        write_tiles(os.path.join(qdir, "current.tiles"), cur_tiles)
        write_tiles(os.path.join(qdir, "reference.tiles"), ref_tiles)
        write_tiles(os.path.join(qdir, "truth.tiles"), gt_tiles)
        with open(os.path.join(qdir, "manifest.tsv"), "w", newline="\n") as fh:
            fh.write("id\tsource\tframe\torigin_y\torigin_x\tqp\taugmentation\n")
            fh.write("\n".join(lines) + "\n")
        counts[qp] = pid
    return counts


class PatchDataset:
    """Loader for one QP directory of the triple store."""

    def __init__(self, dataset_dir, qp):
        qdir = os.path.join(dataset_dir, f"qp{qp}")
        if not os.path.isdir(qdir):
            raise FileNotFoundError(f"no dataset for qp {qp} under {dataset_dir}")
        self.current = read_tiles(os.path.join(qdir, "current.tiles"))
        self.reference = read_tiles(os.path.join(qdir, "reference.tiles"))
        self.truth = read_tiles(os.path.join(qdir, "truth.tiles"))
        if not (len(self.current) == len(self.reference) == len(self.truth)):
            raise ValueError(f"{qdir}: tile files disagree on patch count")
        self.qp = qp

    @property
    def count(self):
        return len(self.current)

    def load_batch(self, indices, dtype=np.float32):
        """Normalized (current, reference, truth) tensors for the indices."""
        cur = normalize(self.current[indices], dtype)[:, None]
        ref = normalize(self.reference[indices], dtype)[:, None]
        gt = normalize(self.truth[indices], dtype)[:, None]
        return cur, ref, gt
