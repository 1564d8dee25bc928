"""Binary/file formats and attention-map rendering.

All binary formats are little-endian and round-trip exactly at their stored
precision.  Writes go through a temp file + rename so interrupted runs never
leave a half-written artifact.  Heatmaps are plain PGM (P5) / PPM (P6) so
tests can parse them without an imaging dependency.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .decoder import AttentionTrace, DecoderConfig, DecoderParams, _param_shapes
from .features import FeatureMap
from .tensor import ShapeMismatch, Tensor
from .tokenizer import CANONICAL_REASONS, Vocabulary

FEATURE_MAGIC = b"RIAF"
CHECKPOINT_MAGIC = b"RIAC"
FORMAT_VERSION = 1


class BadMagic(ValueError):
    pass


class VersionUnsupported(ValueError):
    pass


class TruncatedPayload(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


class MissingParameter(ValueError):
    pass


class EmptyTrace(ValueError):
    pass


class BadAnnotation(ValueError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_feature_file(path, x_map: FeatureMap) -> None:
    """RIAF: magic, u16 version, u32 h/w/f, float32 payload (row, col, channel)."""
    if not np.isfinite(x_map.data).all():
        raise ValueError("refusing to write non-finite features")
    header = FEATURE_MAGIC + struct.pack("<HIII", FORMAT_VERSION, x_map.h, x_map.w, x_map.f)
    payload = x_map.to_grid().astype("<f4").tobytes(order="C")
    _atomic_write(path, header + payload)


def read_feature_file(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: not a feature file")
    if len(blob) < 18:
        raise TruncatedPayload(f"{path}: header incomplete")
    version, h, w, f = struct.unpack("<HIII", blob[4:18])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: version {version}")
    expected = h * w * f * 4
    if len(blob) - 18 != expected:
        raise TruncatedPayload(f"{path}: payload {len(blob) - 18} bytes, expected {expected}")
    grid = np.frombuffer(blob, dtype="<f4", offset=18).reshape(h, w, f)
    return FeatureMap.from_grid(grid)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _config_echo(cfg: DecoderConfig) -> bytes:
    return struct.pack(
        "<IIIIIIB", cfg.h, cfg.w, cfg.f, cfg.d, cfg.vocab_size, cfg.t_max, int(cfg.gate_enabled)
    )


def save_checkpoint(path, params: DecoderParams) -> str:
    """RIAC: magic, version, config echo, named float64 blocks, trailing CRC32.

    Returns the checkpoint id (hex CRC32 of the file body).
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", FORMAT_VERSION), _config_echo(params.cfg)]
    named = params.named()
    parts.append(struct.pack("<H", len(named)))
    for name, t in named:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(t.data.astype("<f8").tobytes(order="C"))
    body = b"".join(parts)
    checksum = zlib.crc32(body) & 0xFFFFFFFF
    _atomic_write(path, body + struct.pack("<I", checksum))
    return f"{checksum:08x}"


def load_checkpoint(path) -> DecoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if len(blob) < 4 + 2 + 25 + 2 + 4:
        raise TruncatedPayload(f"{path}: too short")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    off = 4
    (version,) = struct.unpack_from("<H", blob, off)
    off += 2
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: version {version}")
    h, w, f, d, v, t_max, gate = struct.unpack_from("<IIIIIIB", blob, off)
    off += 25
    cfg = DecoderConfig(h=h, w=w, f=f, d=d, vocab_size=v, t_max=t_max, gate_enabled=bool(gate))
    (count,) = struct.unpack_from("<H", blob, off)
    off += 2
    tensors = {}
    end = len(blob) - 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n_bytes = int(np.prod(dims)) * 8
        if off + n_bytes > end:
            raise TruncatedPayload(f"{path}: block {name} runs past the payload")
        data = np.frombuffer(blob, dtype="<f8", count=int(np.prod(dims)), offset=off).reshape(dims)
        off += n_bytes
        if name in tensors:
            raise MissingParameter(f"{path}: parameter {name} appears twice")
        tensors[name] = Tensor(data.copy())
    if off != end:
        raise TruncatedPayload(f"{path}: {end - off} unread bytes before checksum")
    expected_names = [name for name, _ in _param_shapes(cfg)]
    for name in expected_names:
        if name not in tensors:
            raise MissingParameter(f"{path}: parameter {name} missing")
    for name, shape in _param_shapes(cfg):
        if tensors[name].shape != shape:
            raise ShapeMismatch(f"{path}: {name} stored as {tensors[name].shape}, config implies {shape}")
    return DecoderParams(cfg, tensors)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    id: str
    reasons: tuple
    image_path: Optional[str] = None


def write_annotations(path, records: Sequence[AnnotationRecord]) -> None:
    lines = []
    for rec in records:
        obj = {"id": rec.id, "reasons": list(rec.reasons)}
        if rec.image_path is not None:
            obj["image_path"] = rec.image_path
        lines.append(json.dumps(obj, sort_keys=True))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_annotations(path) -> list:
    records = []
    seen = set()
    canonical = set(CANONICAL_REASONS)
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            rid = obj.get("id")
            reasons = obj.get("reasons")
            if not isinstance(rid, str) or not isinstance(reasons, list):
                raise BadAnnotation(f"{path}:{line_no}: id and reasons are required")
            if rid in seen:
                raise BadAnnotation(f"{path}:{line_no}: duplicate id {rid!r}")
            seen.add(rid)
            for r in reasons:
                if r not in canonical:
                    raise BadAnnotation(f"{path}:{line_no}: unknown reason {r!r}")
            records.append(AnnotationRecord(id=rid, reasons=tuple(reasons), image_path=obj.get("image_path")))
    return records


# ---------------------------------------------------------------------------
# attention traces and heatmap rendering
# ---------------------------------------------------------------------------


def write_trace(path, trace: AttentionTrace, vocab: Vocabulary) -> None:
    obj = {
        "h": trace.h,
        "w": trace.w,
        "maps": [m.tolist() for m in trace.maps],
        "emitted_ids": list(trace.emitted_ids),
        "words": [vocab.word_of(i) for i in trace.emitted_ids],
    }
    _atomic_write(path, json.dumps(obj).encode("utf-8"))


def read_trace(path) -> tuple:
    """Returns (AttentionTrace, words list)."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    trace = AttentionTrace(h=int(obj["h"]), w=int(obj["w"]))
    trace.maps = [np.asarray(m, dtype=np.float64) for m in obj["maps"]]
    trace.emitted_ids = [int(i) for i in obj["emitted_ids"]]
    return trace, list(obj["words"])


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit."""
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {gray.shape}")
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + gray.astype(np.uint8).tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, off = _read_pnm_header(blob, b"P5", path)
    w, h, maxval = fields
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=off)
    return data.reshape(h, w)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + rgb.astype(np.uint8).tobytes(order="C"))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, off = _read_pnm_header(blob, b"P6", path)
    w, h, maxval = fields
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3)


def _read_pnm_header(blob: bytes, magic: bytes, path) -> tuple:
    if blob[:2] != magic:
        raise BadMagic(f"{path}: expected {magic.decode()} image")
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if blob[off : off + 1] == b"#":
            while off < len(blob) and blob[off : off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        fields.append(int(blob[start:off]))
    off += 1  # single whitespace after maxval
    n_channels = 1 if magic == b"P5" else 3
    if len(blob) - off < fields[0] * fields[1] * n_channels:
        raise TruncatedPayload(f"{path}: pixel data incomplete")
    return (fields[0], fields[1], fields[2]), off


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = (np.arange(out_h) * img.shape[0] // out_h).clip(0, img.shape[0] - 1)
    cols = (np.arange(out_w) * img.shape[1] // out_w).clip(0, img.shape[1] - 1)
    return img[rows][:, cols]


def render_attention(
    trace: AttentionTrace,
    out_dir,
    vocab: Vocabulary,
    scale: int = 32,
    overlay_image: Optional[str] = None,
) -> dict:
    """Write one heatmap per timestep plus a manifest; returns the manifest.

    Each map is reshaped to h x w, normalized to [0, 255] by its own maximum
    (an all-zero map renders black) and nearest-neighbor upscaled.  With
    ``overlay_image`` (a P6 PPM) an additional 0.5-alpha blend at the source
    resolution is written per timestep.
    """
    if len(trace) == 0:
        raise EmptyTrace("attention trace has no maps")
    os.makedirs(out_dir, exist_ok=True)
    source = read_ppm(overlay_image) if overlay_image is not None else None
    entries = []
    for k, flat in enumerate(trace.maps):
        grid = np.asarray(flat, dtype=np.float64).reshape(trace.h, trace.w)
        peak = grid.max()
        gray = np.zeros_like(grid) if peak <= 0 else grid / peak * 255.0
        gray = np.rint(gray).clip(0, 255).astype(np.uint8)
        filename = f"t{k:03d}.pgm"
        write_pgm(os.path.join(out_dir, filename), _upscale(gray, scale))
        entry = {
            "timestep": k,
            "word": vocab.word_of(trace.emitted_ids[k]),
            "file": filename,
        }
        if source is not None:
            heat = _resize_nearest(gray, source.shape[0], source.shape[1])
            blend = (0.5 * source + 0.5 * heat[:, :, None]).astype(np.uint8)
            overlay_name = f"t{k:03d}_overlay.ppm"
            write_ppm(os.path.join(out_dir, overlay_name), blend)
            entry["overlay_file"] = overlay_name
        entries.append(entry)
    manifest = {"h": trace.h, "w": trace.w, "scale": scale, "entries": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
