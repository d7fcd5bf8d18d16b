"""Binary PPM (P6) images and labelled image directories."""
from __future__ import annotations

import csv
import io
import os
import re

import numpy as np

from .exceptions import ConfigurationError, IngestionError
from .models import atomic_write_bytes

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding to the nearest level."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / np.float32(255)).astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) image in [0, 1] (or uint8) to P6 bytes."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigurationError(f"P6 needs a (3, H, W) image, got {arr.shape}")
    pixels = arr if arr.dtype == np.uint8 else quantize(arr)
    _, h, w = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes()


def decode_ppm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """P6 bytes to a (3, H, W) float32 image in [0, 1]."""
    m = _HEADER.match(raw)
    if m is None:
        raise IngestionError(f"{source}: not a binary P6 portable pixmap")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise IngestionError(f"{source}: only 8-bit P6 images are supported (maxval {maxval})")
    body = raw[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise IngestionError(f"{source}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return dequantize(pixels)


def write_ppm(path, image) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc.strerror}") from exc
    return decode_ppm(raw, os.fspath(path))


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_labels(path) -> list:
    """Rows of ``labels.csv`` as (filename, class_index) pairs."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read labels file {path}: {exc.strerror}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["filename", "class_index"]:
        raise IngestionError(f"{path}: expected header 'filename,class_index'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise IngestionError(f"{path}:{lineno}: expected two columns")
        try:
            out.append((row[0].strip(), int(row[1])))
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: class_index {row[1]!r} is not an integer") from None
    return out


def write_labels(path, rows) -> None:
    buf = io.StringIO()
    buf.write("filename,class_index\n")
    for name, label in rows:
        buf.write(f"{name},{int(label)}\n")
    write_text(path, buf.getvalue())


def read_image_directory(directory, image_shape=None, num_classes=None):
    """Load every image listed in ``directory/labels.csv``.

    Returns (images, labels, filenames). All images must share one size.
    Class indices must be dense in [0, k), or lie in [0, num_classes) when
    the label space is given.
    """
    directory = os.fspath(directory)
    rows = read_labels(os.path.join(directory, "labels.csv"))
    if not rows:
        raise ConfigurationError(f"{directory}/labels.csv lists no images")
    images, labels, names = [], [], []
    for name, label in rows:
        img = read_ppm(os.path.join(directory, name))
        if image_shape is not None and tuple(img.shape) != tuple(image_shape):
            raise IngestionError(f"{directory}/{name}: image shape {img.shape} differs from {tuple(image_shape)}")
        if images and img.shape != images[0].shape:
            raise IngestionError(f"{directory}/{name}: image shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(label)
        names.append(name)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is not None:
        # a subset of a known label space need not contain every class
        if labels.min() < 0 or labels.max() >= num_classes:
            raise IngestionError(f"{directory}/labels.csv: class indices outside [0, {num_classes})")
    else:
        k = int(labels.max()) + 1
        if labels.min() < 0 or set(labels.tolist()) != set(range(k)):
            raise IngestionError(f"{directory}/labels.csv: class indices must be dense in [0, {k})")
    return np.stack(images), labels, names


def write_image_directory(directory, images, labels, prefix: str = "img") -> list:
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"{prefix}{i:05d}.ppm"
        write_ppm(os.path.join(directory, name), img)
        names.append(name)
    write_labels(os.path.join(directory, "labels.csv"), zip(names, labels))
    return names
