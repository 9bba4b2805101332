"""
OsC toolkit - image and mask files
Binary PGM (P5) is the lossless interchange format; 8-bit grayscale PNG is
read and written through Pillow. Signed distance fields use a 16-bit PGM
variant marked by a header comment; masks carry their class count the same
way (a PGM comment or a PNG text chunk).
"""

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from PIL.PngImagePlugin import PngInfo

from errors import CorruptFile, IoFailure, UnsupportedFormat
from geometry import SignedDistanceField
from grid import LabelMask, ScalarField

logger = logging.getLogger(__name__)

PGM_MAGIC = b"P5"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
SDF_TAG = "osc-sdf"
MASK_TAG = "osc-mask"
SDF_SCALE = 256
SDF_OFFSET = 32768

PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_bytes(path: PathLike, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _parse_pgm(data: bytes, path: str) -> Tuple[np.ndarray, int, List[str]]:
    """Pixels, maxval and header comments of a binary PGM"""
    pos = len(PGM_MAGIC)
    comments: List[str] = []
    header: List[int] = []
    while len(header) < 3:
        if pos >= len(data):
            raise CorruptFile(path, pos, "header ends early")
        byte = data[pos:pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise CorruptFile(path, len(data), "unterminated header comment")
            comments.append(data[pos + 1:end].decode("ascii", errors="replace").strip())
            pos = end + 1
        elif byte.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            header.append(int(data[start:pos]))
        else:
            raise CorruptFile(path, pos, f"unexpected byte {byte!r} in header")

    width, height, maxval = header
    if width < 1 or height < 1:
        raise CorruptFile(path, pos, f"invalid size {width}x{height}")
    if not 0 < maxval < 65536:
        raise CorruptFile(path, pos, f"invalid maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CorruptFile(path, pos, "missing separator before pixel data")
    pos += 1

    sample_bytes = 1 if maxval < 256 else 2
    expected = width * height * sample_bytes
    if len(data) - pos < expected:
        raise CorruptFile(path, len(data), f"truncated pixel data, expected {expected} bytes from offset {pos}")
    dtype = np.uint8 if sample_bytes == 1 else np.dtype(">u2")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    if int(pixels.max()) > maxval:
        raise CorruptFile(path, pos, f"pixel value above maxval {maxval}")
    return pixels.astype(np.int64), maxval, comments


def _pgm_bytes(pixels: np.ndarray, maxval: int, comments: Tuple[str, ...] = ()) -> bytes:
    height, width = pixels.shape
    lines = [b"P5"] + [f"# {c}".encode("ascii") for c in comments]
    lines.append(f"{width} {height}".encode("ascii"))
    lines.append(str(maxval).encode("ascii"))
    header = b"\n".join(lines) + b"\n"
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return header + pixels.astype(dtype).tobytes()


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def _parse_png(data: bytes, path: str) -> Tuple[np.ndarray, Dict[str, str]]:
    """Pixels and text chunks of an 8-bit grayscale PNG"""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            text = {k: str(v) for k, v in getattr(img, "text", {}).items()}
            if img.mode == "1":
                img = img.convert("L")
            if img.mode != "L":
                raise UnsupportedFormat(f"{path}: PNG mode {img.mode} is not 8-bit grayscale")
            return np.asarray(img, dtype=np.int64), text
    except UnsupportedFormat:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as e:
        raise CorruptFile(path, len(data), f"PNG decoding failed: {e}") from e


def _encode(pixels: np.ndarray, path: PathLike, tags: Optional[Dict[str, str]] = None) -> bytes:
    """PNG or PGM by suffix; tags become PNG text chunks or PGM header comments"""
    tags = tags or {}
    if Path(path).suffix.lower() == ".png":
        info = PngInfo()
        for key, value in tags.items():
            info.add_text(key, value)
        buffer = io.BytesIO()
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(buffer, format="PNG", pnginfo=info)
        return buffer.getvalue()
    return _pgm_bytes(pixels, 255, tuple(f"{key} {value}" for key, value in tags.items()))


def _read_tagged(path: PathLike) -> Tuple[np.ndarray, int, Dict[str, str]]:
    data = _read_bytes(path)
    name = str(path)
    if data.startswith(PGM_MAGIC):
        pixels, maxval, comments = _parse_pgm(data, name)
        if maxval > 255:
            raise UnsupportedFormat(f"{name}: 16-bit PGM is only read by load_sdf")
        tags = {}
        for comment in comments:
            key, _, value = comment.partition(" ")
            tags.setdefault(key, value.strip())
        return pixels, maxval, tags
    if data.startswith(PNG_MAGIC):
        pixels, text = _parse_png(data, name)
        return pixels, 255, text
    raise UnsupportedFormat(f"{name}: not a binary PGM (P5) or PNG file")


def read_gray(path: PathLike) -> Tuple[np.ndarray, int]:
    """8-bit gray levels and the maximum level of a PGM or PNG file"""
    pixels, maxval, _ = _read_tagged(path)
    return pixels, maxval


def load_image(path: PathLike) -> ScalarField:
    """Gray levels mapped to [0, 1]"""
    pixels, maxval = read_gray(path)
    return ScalarField(pixels / float(maxval))


def _tagged_class_count(value: str, path: PathLike) -> int:
    fields = dict(part.split("=", 1) for part in value.split() if "=" in part)
    try:
        num_classes = int(fields["classes"])
    except (KeyError, ValueError) as e:
        raise CorruptFile(str(path), 0, f"bad '{MASK_TAG}' tag: {value}") from e
    if num_classes < 2:
        raise CorruptFile(str(path), 0, f"'{MASK_TAG}' tag needs at least 2 classes: {value}")
    return num_classes


def load_mask(path: PathLike) -> LabelMask:
    """Class labels of a mask file.

    Files written by save_mask carry their class count K and map gray level v
    back to class round(v (K - 1) / maxval). Untagged files number their
    distinct gray levels, in ascending order, as class 0, 1, ...
    """
    pixels, maxval, tags = _read_tagged(path)
    if MASK_TAG in tags:
        num_classes = _tagged_class_count(tags[MASK_TAG], path)
        labels = np.round(pixels * ((num_classes - 1) / float(maxval))).astype(np.int64)
        expected = np.round(labels * (maxval / float(num_classes - 1)))
        if not np.array_equal(expected, pixels):
            raise CorruptFile(str(path), 0, f"gray levels do not match {num_classes} classes")
        return LabelMask(labels, num_classes)
    levels, labels = np.unique(pixels, return_inverse=True)
    return LabelMask(labels.reshape(pixels.shape), max(2, len(levels)))


def save_field(field: ScalarField, path: PathLike) -> None:
    """8-bit quantisation of values clipped to [0, 1]"""
    pixels = np.round(np.clip(field.values, 0.0, 1.0) * 255.0)
    _write_bytes(path, _encode(pixels, path))


def save_mask(mask: LabelMask, path: PathLike) -> None:
    """Class k is written as gray level round(255 k / (K - 1)), tagged with K"""
    pixels = np.round(mask.labels * (255.0 / (mask.num_classes - 1)))
    _write_bytes(path, _encode(pixels, path, {MASK_TAG: f"classes={mask.num_classes}"}))


def save_sdf(sdf: Union[SignedDistanceField, ScalarField], path: PathLike) -> None:
    """Fixed point phi * 256 + 32768 in a 16-bit PGM"""
    values = sdf.values
    quantised = np.round(values * SDF_SCALE) + SDF_OFFSET
    if quantised.min() < 0 or quantised.max() > 65535:
        raise IoFailure(f"signed distances beyond +/-{SDF_OFFSET / SDF_SCALE:.0f} px cannot be stored")
    comment = f"{SDF_TAG} scale={SDF_SCALE} offset={SDF_OFFSET}"
    _write_bytes(path, _pgm_bytes(quantised, 65535, (comment,)))


def load_sdf(path: PathLike) -> ScalarField:
    data = _read_bytes(path)
    name = str(path)
    if not data.startswith(PGM_MAGIC):
        raise UnsupportedFormat(f"{name}: signed distance files are 16-bit PGM")
    pixels, maxval, comments = _parse_pgm(data, name)
    tagged = [c for c in comments if c.startswith(SDF_TAG)]
    if maxval != 65535 or not tagged:
        raise UnsupportedFormat(f"{name}: missing '{SDF_TAG}' header")
    fields = dict(part.split("=", 1) for part in tagged[0].split()[1:] if "=" in part)
    try:
        scale = float(fields.get("scale", SDF_SCALE))
        offset = float(fields.get("offset", SDF_OFFSET))
    except ValueError as e:
        raise CorruptFile(name, 0, f"bad '{SDF_TAG}' header: {tagged[0]}") from e
    return ScalarField((pixels - offset) / scale)
