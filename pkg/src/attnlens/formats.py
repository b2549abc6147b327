"""On-disk formats: weight container, PGM/PPM images, CSV heatmaps, datasets.

Weight container layout::

    u64 little-endian   header length in bytes
    header              UTF-8 JSON {name: {"shape": [...], "offset": int, "length": int}}
    payload             contiguous little-endian float32

``offset`` is a byte offset into the payload and ``length`` an element
count equal to the product of ``shape``.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import LabeledSample

_F32 = np.dtype("<f4")
_PREFIX = struct.Struct("<Q")


# --- weights ----------------------------------------------------------------

def save_weights(path, weights: dict):
    header, chunks, offset = {}, [], 0
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype=_F32)
        header[name] = {"shape": list(arr.shape), "offset": offset, "length": int(arr.size)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_weights(path, config=None) -> dict:
    """Read a weight container; with ``config``, check names and shapes too."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file shorter than the 8-byte header prefix (byte 0)")
    (hlen,) = _PREFIX.unpack_from(raw, 0)
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise FormatError(f"{path}: header of {hlen} bytes runs past end of file at byte {len(raw)}")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header at byte {_PREFIX.size}: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header at byte {_PREFIX.size} is not a JSON object")

    payload = raw[start:]
    spans, out = [], {}
    for name, entry in header.items():
        try:
            shape = [int(s) for s in entry["shape"]]
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: tensor {name!r} has a malformed header entry") from None
        if any(s < 1 for s in shape) or length != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: tensor {name!r} length {length} does not match shape {shape}")
        end = offset + 4 * length
        if offset < 0 or end > len(payload):
            raise FormatError(
                f"{path}: tensor {name!r} spans payload bytes {offset}..{end} "
                f"(file byte {start + offset}) but payload has {len(payload)} bytes")
        spans.append((offset, end, name))
        out[name] = np.frombuffer(payload, dtype=_F32, count=length, offset=offset) \
            .reshape(shape).astype(np.float32)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"{path}: tensors {n0!r} and {n1!r} overlap at payload byte {s1}")
    if config is not None:
        from .models import validate_weights
        validate_weights(config, out)
    return out


# --- PGM / PPM --------------------------------------------------------------

def _pnm_tokens(raw, count):
    """Read ``count`` whitespace-separated header tokens; return them and the data offset."""
    tokens, pos = [], 2
    while len(tokens) < count:
        if pos >= len(raw):
            raise FormatError(f"truncated image header at byte {pos}")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            begin = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            try:
                tokens.append(int(raw[begin:pos]))
            except ValueError:
                raise FormatError(f"bad image header token at byte {begin}") from None
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_image(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit, as ``[H, W, C]`` floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic number {magic!r}")
    (width, height, maxval), pos = _pnm_tokens(raw, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    data = raw[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: raster truncated at byte {pos + len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float32) / 255.0


def to_bytes(values) -> np.ndarray:
    """[0, 1] floats to 0..255 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(path, image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise FormatError(f"cannot write {c}-channel image")
    magic = "P5" if c == 1 else "P6"
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(image).tobytes())


def save_heatmap(path_stem, pixel_map):
    """Write ``<stem>.pgm`` (quantised) and ``<stem>.csv`` (raw floats)."""
    stem = Path(path_stem)
    save_image(stem.with_suffix(".pgm"), pixel_map)
    save_csv_matrix(stem.with_suffix(".csv"), pixel_map)
    return stem.with_suffix(".pgm"), stem.with_suffix(".csv")


def save_csv_matrix(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        for row in matrix:
            fh.write(",".join(f"{float(v):.9g}" for v in row) + "\n")


def load_csv_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


# --- datasets ---------------------------------------------------------------

MANIFEST = "manifest.csv"


def save_dataset(directory, samples):
    """Images and masks as PGM/PPM plus ``manifest.csv`` (image,label,mask)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if samples[0].image.shape[-1] == 1 else ".ppm"
    with open(directory / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "label", "mask"])
        for i, s in enumerate(samples):
            img_name = f"img_{i:04d}{ext}"
            save_image(directory / img_name, s.image)
            mask_name = ""
            if s.mask is not None:
                mask_name = f"mask_{i:04d}.pgm"
                save_image(directory / mask_name, s.mask.astype(np.float32))
            writer.writerow([img_name, s.label, mask_name])


def load_dataset(directory) -> list:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FormatError(f"{directory}: no {MANIFEST}")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                image = load_image(directory / row["image"])
                label = int(row["label"])
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{manifest}: bad row {row}: {exc}") from None
            mask = None
            if row.get("mask"):
                mask = load_image(directory / row["mask"])[:, :, 0] > 0.5
            out.append(LabeledSample(image=image, label=label, mask=mask))
    return out
