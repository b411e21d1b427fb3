"""Frame and animation writers: PPM (P6), PNG via Pillow, and a GIF89a encoder."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError

GIF_DELAY_CS = 12


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to bytes via round(255 * (x + 1) / 2), rounding halves up."""
    x = np.clip(np.asarray(frames, dtype=np.float64), -1.0, 1.0)
    return np.floor(255.0 * (x + 1.0) / 2.0 + 0.5).astype(np.uint8)


def chw_to_hwc(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    return frame.transpose(1, 2, 0) if frame.ndim == 3 and frame.shape[0] == 3 else frame


# -- PPM -------------------------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an [H, W, 3] byte image, got shape {image.shape}")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise FormatError("not a binary PPM (P6) file", 0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("malformed PPM header", 0) from None
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}", 0)
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"PPM pixel data truncated: need {need} bytes", pos)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    _write(path, encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- PNG / generic ------------------------------------------------------------------------

def write_frame(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] byte image; the suffix picks PPM or PNG."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
    else:
        try:
            Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), "RGB").save(path, format="PNG")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from None


def read_frame(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def write_depth_png(path, depth: np.ndarray) -> None:
    """Depth in [0, 1] stored as 16-bit grayscale."""
    q = np.floor(np.clip(depth, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    try:
        Image.fromarray(q).save(Path(path), format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def read_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read depth map {path}: {exc}") from None
    if arr.ndim == 3:
        arr = arr[..., 0]
    scale = 65535.0 if arr.dtype != np.uint8 else 255.0
    return arr.astype(np.float64) / scale


def _write(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


# -- GIF ---------------------------------------------------------------------------------------

def uniform_palette() -> np.ndarray:
    """256 colours: 3 bits red, 3 bits green, 2 bits blue."""
    idx = np.arange(256)
    r = np.floor((idx >> 5) * 255 / 7 + 0.5)
    g = np.floor(((idx >> 2) & 7) * 255 / 7 + 0.5)
    b = np.floor((idx & 3) * 255 / 3 + 0.5)
    return np.stack([r, g, b], axis=1).astype(np.uint8)


def palette_indices(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.int64)
    r = (img[..., 0] * 7 + 127) // 255
    g = (img[..., 1] * 7 + 127) // 255
    b = (img[..., 2] * 3 + 127) // 255
    return ((r << 5) | (g << 2) | b).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """The colours a GIF written from ``image`` decodes to."""
    return uniform_palette()[palette_indices(image)]


def lzw_encode(indices: bytes, min_code_size: int = 8) -> bytes:
    clear = 1 << min_code_size
    eoi = clear + 1
    out = bytearray()
    acc = nbits = 0

    def emit(code, size):
        nonlocal acc, nbits
        acc |= code << nbits
        nbits += size
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8

    size = min_code_size + 1
    table: dict = {}
    nxt = eoi + 1
    emit(clear, size)
    if indices:
        prefix = indices[0]
        for c in indices[1:]:
            key = (prefix, c)
            code = table.get(key)
            if code is not None:
                prefix = code
                continue
            emit(prefix, size)
            if nxt < 4096:
                table[key] = nxt
                nxt += 1
                if nxt > (1 << size) and size < 12:
                    size += 1
            else:
                emit(clear, size)
                table.clear()
                size = min_code_size + 1
                nxt = eoi + 1
            prefix = c
        emit(prefix, size)
    emit(eoi, size)
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def _sub_blocks(data: bytes) -> bytes:
    out = bytearray()
    for i in range(0, len(data), 255):
        chunk = data[i:i + 255]
        out.append(len(chunk))
        out += chunk
    out.append(0)
    return bytes(out)


def encode_gif(frames, delay_cs: int = GIF_DELAY_CS, loop: int = 0) -> bytes:
    """Animated GIF89a from [H, W, 3] byte frames, using the uniform palette."""
    frames = [np.asarray(f, dtype=np.uint8) for f in frames]
    if not frames:
        raise FormatError("GIF needs at least one frame")
    h, w = frames[0].shape[:2]
    out = bytearray(b"GIF89a")
    out += struct.pack("<HHBBB", w, h, 0xF7, 0, 0)
    out += uniform_palette().tobytes()
    out += b"\x21\xFF\x0BNETSCAPE2.0\x03\x01" + struct.pack("<H", loop) + b"\x00"
    for frame in frames:
        if frame.shape[:2] != (h, w):
            raise FormatError("all GIF frames must share one size")
        out += b"\x21\xF9\x04\x04" + struct.pack("<H", delay_cs) + b"\x00\x00"
        out += b"\x2C" + struct.pack("<HHHHB", 0, 0, w, h, 0)
        out += b"\x08" + _sub_blocks(lzw_encode(palette_indices(frame).tobytes()))
    out += b"\x3B"
    return bytes(out)


def gif_delays(buf: bytes) -> list[int]:
    """Delay field of every graphic control extension, read straight from the bytes."""
    delays, pos = [], 13 + 3 * 256
    while pos < len(buf):
        tag = buf[pos]
        if tag == 0x3B:
            break
        if tag == 0x21:
            label = buf[pos + 1]
            if label == 0xF9:
                delays.append(struct.unpack_from("<H", buf, pos + 4)[0])
            pos += 2
        elif tag == 0x2C:
            pos += 10 + 1
        else:
            raise FormatError(f"unexpected GIF block 0x{tag:02x}", pos)
        while buf[pos]:
            pos += buf[pos] + 1
        pos += 1
    return delays


def write_gif(path, frames, delay_cs: int = GIF_DELAY_CS) -> None:
    _write(path, encode_gif(frames, delay_cs))


def write_clip(out_dir, frames: np.ndarray, stem: str = "frame", fmt: str = "ppm", gif: bool = True) -> list[Path]:
    """Write tensor frames ``[F, 3, H, W]`` in [-1, 1] as numbered files plus ``clip.gif``."""
    out = Path(out_dir)
    images = [chw_to_hwc(to_uint8(f)) for f in frames]
    paths = []
    for i, img in enumerate(images):
        p = out / f"{stem}_{i:02d}.{fmt}"
        out.mkdir(parents=True, exist_ok=True)
        write_frame(p, img)
        paths.append(p)
    if gif:
        gp = out / "clip.gif"
        write_gif(gp, images)
        paths.append(gp)
    return paths
