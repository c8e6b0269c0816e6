"""On-disk formats: clip tensors, checkpoints, GIF/panel exports, configs.

Both binary formats are self-describing (magic + version) and carry CRC32
checksums so corruption is detected at load time. All tensor payloads are
little-endian; float32 everywhere except gradient-check tooling, which may
store float64. Writes go through a temp-file-then-rename so a crashed run
never leaves a half-written file behind.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core

CLIP_MAGIC = b"FTCL"
CHECKPOINT_MAGIC = b"FTCK"
CLIP_VERSION = 1
CHECKPOINT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FileFormatError(ValueError):
    """The file is not one of ours, or its header is malformed/truncated."""


class VersionError(FileFormatError):
    """The file's format version is not supported."""


class IntegrityError(ValueError):
    """Stored checksum does not match the payload."""


class UnknownTensorError(KeyError):
    """A checkpoint tensor does not match the target network's parameters."""


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Clip files: magic, version, dtype, label, T/H/W/C, checksummed payload.
# ---------------------------------------------------------------------------

_CLIP_HEADER = struct.Struct("<4sHBBiIIIIQI")


def save_clip(path, tensor: np.ndarray, label=None):
    tensor = np.asarray(tensor)
    if tensor.ndim != 4:
        raise core.ShapeError(f"clip tensor must be 4-D [T, H, W, C], got {tensor.shape}")
    code = 1 if tensor.dtype == np.float64 else 0
    payload = np.ascontiguousarray(tensor, dtype=_DTYPES[code]).tobytes()
    header = _CLIP_HEADER.pack(
        CLIP_MAGIC, CLIP_VERSION, code,
        1 if label is not None else 0, int(label) if label is not None else 0,
        *tensor.shape, len(payload), zlib.crc32(payload),
    )
    atomic_write_bytes(path, header + payload)


def load_clip(path):
    """Read a clip file back as (tensor [T, H, W, C], label or None)."""
    data = Path(path).read_bytes()
    if len(data) < _CLIP_HEADER.size:
        raise FileFormatError(f"{path}: too short to hold a clip header")
    (magic, version, dtype_code, has_label, label,
     t, h, w, c, nbytes, crc) = _CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, not a clip file")
    if version != CLIP_VERSION:
        raise VersionError(f"{path}: clip version {version} unsupported (expected {CLIP_VERSION})")
    if dtype_code not in _DTYPES:
        raise FileFormatError(f"{path}: unknown dtype code {dtype_code}")
    payload = data[_CLIP_HEADER.size:]
    if len(payload) != nbytes:
        raise FileFormatError(f"{path}: payload is {len(payload)} bytes, header declares {nbytes}")
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype_code]).reshape(t, h, w, c)
    return arr.copy(), (int(label) if has_label else None)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + flat binary tensor archive in one file.
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sHQ")


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict  # name -> np.ndarray

    @property
    def stage(self):
        return self.manifest.get("stage")


def save_checkpoint(path, tensors: dict, *, stage, iteration, seed, arch: dict,
                    extra: dict | None = None):
    """Write named tensors plus a manifest describing them.

    Tensor order in the archive is sorted by name, so identical contents
    always produce identical bytes.
    """
    arrays = {}
    for name in sorted(tensors):
        a = tensors[name]
        a = a.detach().cpu().numpy() if hasattr(a, "detach") else np.asarray(a)
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        arrays[name] = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))

    table = []
    offset = 0
    blobs = []
    for name, a in arrays.items():
        blob = a.tobytes()
        table.append({
            "name": name,
            "dtype": "f8" if a.dtype == np.float64 else "f4",
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "schema_version": CHECKPOINT_VERSION,
        "stage": stage,
        "iteration": int(iteration),
        "seed": int(seed),
        "arch": arch,
        "tensors": table,
    }
    if extra:
        manifest["extra"] = extra
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest_bytes))
    atomic_write_bytes(path, header + manifest_bytes + b"".join(blobs))
    return Path(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FileFormatError(f"{path}: too short to hold a checkpoint header")
    magic, version, manifest_len = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if len(data) < _CKPT_HEADER.size + manifest_len:
        raise FileFormatError(f"{path}: truncated manifest")
    manifest = json.loads(data[_CKPT_HEADER.size:_CKPT_HEADER.size + manifest_len].decode("utf-8"))
    payload = data[_CKPT_HEADER.size + manifest_len:]

    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        blob = payload[start:start + nbytes]
        if len(blob) != nbytes:
            raise FileFormatError(f"{path}: truncated archive at tensor {entry['name']!r}")
        if zlib.crc32(blob) != entry["crc32"]:
            raise IntegrityError(f"{path}: checksum mismatch in tensor {entry['name']!r}")
        dtype = np.dtype("<f8") if entry["dtype"] == "f8" else np.dtype("<f4")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(manifest=manifest, tensors=tensors)


# ---------------------------------------------------------------------------
# Visual exports.
# ---------------------------------------------------------------------------

def video_to_uint8(video: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] video linearly onto [0, 255]."""
    v = np.clip(np.asarray(video, dtype=np.float64), -1.0, 1.0)
    return np.round((v + 1.0) * 127.5).astype(np.uint8)


def _gif_palette(frames8: np.ndarray):
    """(palette [n, 3], per-frame index arrays). Videos with at most 256
    distinct colors are encoded exactly; anything richer is mapped to the
    nearest entry of an adaptive 256-color palette."""
    from PIL import Image

    t, h, w, _ = frames8.shape
    flat = frames8.reshape(-1, 3)
    colors = np.unique(flat, axis=0)
    if len(colors) <= 256:
        palette = colors
    else:
        strip = Image.fromarray(frames8.transpose(1, 0, 2, 3).reshape(h, t * w, 3), "RGB")
        quant = strip.quantize(colors=256)
        palette = np.array(quant.getpalette()[: 256 * 3], dtype=np.uint8).reshape(-1, 3)
    dists = ((flat[:, None, :].astype(np.int32) - palette[None, :, :].astype(np.int32)) ** 2).sum(axis=2)
    indices = dists.argmin(axis=1).astype(np.uint8).reshape(t, h * w)
    return palette, indices


def _lzw_encode(indices, code_bits: int) -> bytes:
    clear = 1 << code_bits
    eoi = clear + 1
    out = bytearray()
    acc = nacc = 0

    def emit(code, size):
        nonlocal acc, nacc
        acc |= code << nacc
        nacc += size
        while nacc >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nacc -= 8

    table = {bytes([i]): i for i in range(clear)}
    next_code = eoi + 1
    size = code_bits + 1
    emit(clear, size)
    w = b""
    for k in indices:
        wk = w + bytes([k])
        if wk in table:
            w = wk
            continue
        emit(table[w], size)
        table[wk] = next_code
        next_code += 1
        if next_code > (1 << size) and size < 12:
            size += 1
        elif next_code >= 4096:
            emit(clear, size)
            table = {bytes([i]): i for i in range(clear)}
            next_code = eoi + 1
            size = code_bits + 1
        w = bytes([k])
    if w:
        emit(table[w], size)
    emit(eoi, size)
    if nacc:
        out.append(acc & 0xFF)
    return bytes(out)


def export_gif(video: np.ndarray, path, fps: int = 16):
    """Write a video as an animated, looping GIF; frame count is preserved
    even for static clips (no frame coalescing). Output bytes depend only on
    the pixel data and fps."""
    frames8 = video_to_uint8(video)
    if frames8.ndim != 4 or frames8.shape[3] != 3:
        raise core.ShapeError(f"video must be [T, H, W, 3], got {video.shape}")
    t, h, w, _ = frames8.shape
    palette, indices = _gif_palette(frames8)
    pal_bits = max(1, int(np.ceil(np.log2(max(len(palette), 2)))))
    pal = np.zeros((1 << pal_bits, 3), dtype=np.uint8)
    pal[: len(palette)] = palette
    delay_cs = max(1, round(100.0 / fps))

    blob = bytearray()
    blob += b"GIF89a"
    blob += struct.pack("<HHBBB", w, h, 0x80 | ((pal_bits - 1) << 4) | (pal_bits - 1), 0, 0)
    blob += pal.tobytes()
    blob += b"\x21\xff\x0bNETSCAPE2.0\x03\x01\x00\x00\x00"  # loop forever
    code_bits = max(2, pal_bits)
    for frame in indices:
        blob += struct.pack("<BBHB", 0x21, 0xF9, 4, 0x04)  # graphic control
        blob += struct.pack("<HBB", delay_cs, 0, 0)
        blob += struct.pack("<BHHHHB", 0x2C, 0, 0, w, h, 0)  # image descriptor
        blob.append(code_bits)
        data = _lzw_encode(frame.tobytes(), code_bits)
        for off in range(0, len(data), 255):
            chunk = data[off:off + 255]
            blob.append(len(chunk))
            blob += chunk
        blob.append(0)
    blob += b"\x3b"
    atomic_write_bytes(path, bytes(blob))
    return Path(path)


PANEL_GUTTER = 2  # px between the flow row and the video row


def panel_column_indices(t_total: int, columns: int = 8):
    """Evenly strided frame indices used for a panel, starting at frame 0."""
    if t_total < columns:
        return list(range(t_total))
    step = t_total // columns
    return [i * step for i in range(columns)]


def export_panel(video: np.ndarray, flow: np.ndarray, path, columns: int = 8,
                 max_magnitude: float = core.FLOW_SCALE):
    """Write a PNG grid: a flow-color row above the matching video row."""
    from PIL import Image

    if video.shape[0] != flow.shape[0]:
        raise core.ShapeError(f"video has {video.shape[0]} frames, flow has {flow.shape[0]}")
    cols = panel_column_indices(video.shape[0], columns)
    flow_rgb = core.flow_to_color(flow[cols], max_magnitude)
    video8 = video_to_uint8(video[cols])
    flow8 = video_to_uint8(flow_rgb)
    h, w = video.shape[1:3]
    grid = np.full((2 * h + PANEL_GUTTER, len(cols) * w, 3), 255, dtype=np.uint8)
    for k in range(len(cols)):
        grid[:h, k * w:(k + 1) * w] = flow8[k]
        grid[h + PANEL_GUTTER:, k * w:(k + 1) * w] = video8[k]
    Image.fromarray(grid, mode="RGB").save(Path(path))
    return Path(path)


# ---------------------------------------------------------------------------
# Config / run-manifest helpers.
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid config file: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object with flat keys")
    return cfg


def write_run_manifest(out_dir, command: str, effective_config: dict):
    """Record the fully resolved configuration of a run for exact replay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": effective_config}
    path = out_dir / "run_manifest.json"
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
