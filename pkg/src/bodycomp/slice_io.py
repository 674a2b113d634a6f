"""On-disk formats: raw HU slices with JSON sidecars, graymap label maps, reports.

Slice format: `<name>.raw` holds little-endian int16 HU values, row-major;
`<name>.json` holds {width, height, spacing_x, spacing_y, subject_id, scan_date}.
Label maps are 8-bit portable graymaps with codes stored directly; they are
written as binary P5 and read from P5 or plain P2.
"""

import io
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from .core_model import CtSlice, LabelMap
from .errors import LabelMapFormatError, SliceFormatError

HU_DTYPE = np.dtype("<i2")

# Six significant digits keep CSV output byte-stable
CSV_FLOAT_FORMAT = "%.6g"

GRAYMAP_MAGIC = (b"P5", b"P2")
# Header token, skipping whitespace and comments
_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*)*([^\s#]+)")


class SliceSidecar(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    spacing_x: float = Field(gt=0.0)
    spacing_y: float = Field(gt=0.0)
    subject_id: str
    scan_date: str


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, data: Any) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    atomic_write_text(path, text)


def read_slice(path: Path) -> CtSlice:
    """Read a slice payload and its JSON sidecar.

    Args:
        path: The `.raw` payload; the sidecar sits next to it with `.json`.

    Returns:
        The validated CtSlice.
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    try:
        sidecar = SliceSidecar.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SliceFormatError(f"{meta_path}: sidecar not found") from exc
    except ValidationError as exc:
        raise SliceFormatError(f"{meta_path}: malformed header: {exc}") from exc

    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise SliceFormatError(f"{path}: payload not found") from exc
    expected = sidecar.width * sidecar.height * HU_DTYPE.itemsize
    if len(payload) != expected:
        raise SliceFormatError(
            f"{path}: expected {expected} bytes for {sidecar.width}x{sidecar.height}, "
            f"got {len(payload)}"
        )

    hu = np.frombuffer(payload, dtype=HU_DTYPE).reshape(sidecar.height, sidecar.width)
    try:
        return CtSlice(
            hu=hu,
            spacing_x=sidecar.spacing_x,
            spacing_y=sidecar.spacing_y,
            subject_id=sidecar.subject_id,
            scan_date=sidecar.scan_date,
        )
    except ValidationError as exc:
        raise SliceFormatError(f"{path}: invalid slice: {exc}") from exc


def write_slice(ct_slice: CtSlice, path: Path) -> None:
    path = Path(path)
    sidecar = SliceSidecar(
        width=ct_slice.width,
        height=ct_slice.height,
        spacing_x=ct_slice.spacing_x,
        spacing_y=ct_slice.spacing_y,
        subject_id=ct_slice.subject_id,
        scan_date=ct_slice.scan_date.isoformat(),
    )
    atomic_write_bytes(path, ct_slice.hu.astype(HU_DTYPE).tobytes())
    atomic_write_text(sidecar_path(path), sidecar.model_dump_json(indent=2) + "\n")


def _header_tokens(path: Path, data: bytes) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        match = _PNM_TOKEN.match(data, pos)
        if match is None:
            raise LabelMapFormatError(f"{path}: truncated graymap header")
        tokens.append(match.group(1))
        pos = match.end()
    # Exactly one whitespace byte separates the header from the samples
    if pos < len(data) and not data[pos : pos + 1].isspace():
        raise LabelMapFormatError(f"{path}: malformed graymap header")
    return tokens, pos + 1


def _read_graymap(path: Path) -> np.ndarray:
    """Decode a P5/P2 graymap keeping the stored sample values.

    Pillow rescales samples to [0, 255] when maxval is not 255, which would
    corrupt label codes, so the header is parsed here.
    """
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise LabelMapFormatError(f"{path}: file not found") from exc
    magic = data[:2]
    if magic not in GRAYMAP_MAGIC:
        raise LabelMapFormatError(f"{path}: expected a P5 or P2 graymap, got {magic!r}")
    tokens, start = _header_tokens(path, data)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise LabelMapFormatError(f"{path}: malformed graymap header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise LabelMapFormatError(f"{path}: invalid size {width}x{height}")
    if not 0 < maxval <= 255:
        raise LabelMapFormatError(f"{path}: maxval must lie in [1, 255] for 8-bit maps, got {maxval}")

    count = width * height
    if magic == b"P5":
        payload = data[start:]
        if len(payload) < count:
            raise LabelMapFormatError(f"{path}: expected {count} samples, got {len(payload)}")
        samples = np.frombuffer(payload, dtype=np.uint8, count=count)
    else:
        text = re.sub(rb"#[^\n]*", b"", data[start:]).split()
        if len(text) < count:
            raise LabelMapFormatError(f"{path}: expected {count} samples, got {len(text)}")
        try:
            samples = np.array([int(t) for t in text[:count]], dtype=np.int64)
        except ValueError as exc:
            raise LabelMapFormatError(f"{path}: non-numeric sample: {exc}") from exc
    if samples.size and (samples.min() < 0 or samples.max() > maxval):
        raise LabelMapFormatError(f"{path}: sample values exceed maxval {maxval}")
    return samples.astype(np.uint8).reshape(height, width)


def _encode_graymap(grid: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(grid, dtype=np.uint8)).save(buffer, format="PPM")
    return buffer.getvalue()


def read_label_map(path: Path) -> LabelMap:
    grid = _read_graymap(Path(path))
    try:
        return LabelMap(labels=grid)
    except ValidationError as exc:
        raise LabelMapFormatError(f"{path}: {exc.errors()[0]['msg']}") from exc


def write_label_map(label_map: LabelMap, path: Path) -> None:
    atomic_write_bytes(Path(path), _encode_graymap(label_map.labels))


def write_preview(display: np.ndarray, path: Path) -> None:
    """Write a windowed [0, 255] grid as an 8-bit graymap."""
    atomic_write_bytes(Path(path), _encode_graymap(display))
