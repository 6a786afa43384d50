"""Dataset ingestion and the synthetic cluttered-digit task.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Sizes may
vary freely within a dataset — only the fixed-grid paths require a resize.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .patchify import resize_bilinear

__all__ = [
    "LabeledDataset",
    "IdxFormatError",
    "PpmFormatError",
    "load_idx",
    "save_idx",
    "load_ppm",
    "write_ppm",
    "load_manifest",
    "render_digit",
    "make_digit_dataset",
    "synth_cluttered",
    "make_cluttered_dataset",
    "one_hot",
    "mixup",
    "epoch_order",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class PpmFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and not (
            (self.labels >= 0).all() and (self.labels < self.num_classes).all()
        ):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.images)

    def stacked(self) -> np.ndarray:
        """(N, H, W, 3) array; raises if image sizes are heterogeneous."""
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"dataset has heterogeneous image sizes: {sorted(shapes)}")
        return np.stack(self.images)


# -- IDX ------------------------------------------------------------------------


def _read_exact(f, n: int, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(
            f"truncated file: wanted {n} bytes at offset {offset}, got {len(buf)}"
        )
    return buf


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Parse the big-endian IDX pair (u8 images + u8 labels) into [0,1] RGB."""
    with open(images_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad image magic 0x{magic:08x} at offset 0 (want 0x{IDX_IMAGES_MAGIC:08x})"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, 4))
        raw = _read_exact(f, count * rows * cols, 16)
        extra = f.read(1)
        if extra:
            raise IdxFormatError(f"trailing bytes at offset {16 + count * rows * cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0))[0]
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"bad label magic 0x{magic:08x} at offset 0 (want 0x{IDX_LABELS_MAGIC:08x})"
            )
        n_labels = struct.unpack(">I", _read_exact(f, 4, 4))[0]
        if n_labels != count:
            raise IdxFormatError(
                f"label count {n_labels} != image count {count}"
            )
        labels = np.frombuffer(_read_exact(f, n_labels, 8), dtype=np.uint8)

    gray = pixels.astype(np.float32) / 255.0
    images = [np.repeat(im[:, :, None], 3, axis=2) for im in gray]
    return LabeledDataset(images=images, labels=labels.astype(np.int64),
                          num_classes=int(labels.max()) + 1 if len(labels) else 0)


def save_idx(dataset: LabeledDataset, images_path: str, labels_path: str):
    """Inverse of load_idx; parsing then saving reproduces the source bytes."""
    stacked = dataset.stacked()
    u8 = np.rint(stacked[:, :, :, 0] * 255.0).astype(np.uint8)
    n, rows, cols = u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# -- PPM ------------------------------------------------------------------------


def _ppm_tokens(buf: bytes, n: int):
    """First n whitespace-separated header tokens (with # comments) + body offset."""
    tokens = []
    i = 0
    while len(tokens) < n:
        if i >= len(buf):
            raise PpmFormatError("truncated header")
        ch = buf[i:i + 1]
        if ch == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    (kind, w_tok, h_tok, maxval_tok), body = _ppm_tokens(buf, 4)
    if kind != b"P6":
        raise PpmFormatError(f"unsupported PPM kind {kind!r}; only binary P6 is handled")
    w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    if maxval != 255:
        raise PpmFormatError(f"unsupported maxval {maxval}; only 255 is handled")
    raster = buf[body:body + w * h * 3]
    if len(raster) != w * h * 3:
        raise PpmFormatError(
            f"truncated raster: wanted {w * h * 3} bytes at offset {body}, got {len(raster)}"
        )
    u8 = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return u8.astype(np.float32) / 255.0


def write_ppm(path: str, image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {image.shape}")
    h, w, _ = image.shape
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(u8.tobytes())


def load_manifest(path: str, num_classes: int | None = None) -> LabeledDataset:
    """Plain-text manifest: one `ppm_path label` pair per line (# comments ok)."""
    import os

    base = os.path.dirname(os.path.abspath(path))
    images, labels = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rel, label = line.rsplit(maxsplit=1)
            images.append(load_ppm(os.path.join(base, rel)))
            labels.append(int(label))
    k = num_classes if num_classes is not None else (max(labels) + 1 if labels else 0)
    return LabeledDataset(images=images, labels=np.array(labels), num_classes=k)


# -- synthetic digits -------------------------------------------------------------

# 5x7 seven-segment-style glyph masks for the ten digit classes.
_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]

_GLYPH_MASKS = np.array(
    [[[float(c) for c in row] for row in glyph] for glyph in _GLYPHS], dtype=np.float32
)


def render_digit(rng: np.random.Generator, digit: int, side: int = 28) -> np.ndarray:
    """Render one digit glyph with scale/offset/intensity jitter -> (side, side, 3)."""
    if not 0 <= digit <= 9:
        raise ValueError(f"digit must be in [0, 9], got {digit}")
    mask = _GLYPH_MASKS[digit][:, :, None].repeat(3, axis=2)
    scale = rng.uniform(0.70, 0.95)
    gh = max(2, int(round(side * scale)))
    gw = max(2, int(round(gh * 5.0 / 7.0)))
    glyph = resize_bilinear(mask, gh, gw)
    intensity = rng.uniform(0.75, 1.0)
    canvas = np.zeros((side, side, 3), dtype=np.float32)
    oy = rng.integers(0, side - gh + 1)
    ox = rng.integers(0, side - gw + 1)
    canvas[oy:oy + gh, ox:ox + gw] = np.clip(glyph * intensity, 0.0, 1.0)
    return canvas


def make_digit_dataset(rng: np.random.Generator, count: int, side: int = 28,
                       split: str = "train") -> LabeledDataset:
    labels = rng.integers(0, 10, size=count)
    images = [render_digit(rng, int(lab), side) for lab in labels]
    return LabeledDataset(images=images, labels=labels, num_classes=10, split=split)


def synth_cluttered(rng: np.random.Generator, canvas: int, source: LabeledDataset,
                    distractors: int = 4) -> tuple[np.ndarray, int]:
    """One cluttered sample: a full digit at a random spot plus digit-fragment noise.

    The true digit is pasted whole at a uniform-random position; `distractors`
    random 8x8 crops of other source digits land at positions that do not
    overlap it. Labels come from the pasted digit, so gaze location matters.
    """
    idx = int(rng.integers(0, len(source)))
    digit = source.images[idx]
    side = digit.shape[0]
    if canvas < side:
        raise ValueError(f"canvas {canvas} smaller than digit side {side}")
    out = np.zeros((canvas, canvas, 3), dtype=np.float32)
    dy = int(rng.integers(0, canvas - side + 1))
    dx = int(rng.integers(0, canvas - side + 1))
    out[dy:dy + side, dx:dx + side] = digit

    frag = 8
    placed = 0
    attempts = 0
    while placed < distractors and attempts < 200:
        attempts += 1
        other = int(rng.integers(0, len(source)))
        src = source.images[other]
        sy = int(rng.integers(0, src.shape[0] - frag + 1))
        sx = int(rng.integers(0, src.shape[1] - frag + 1))
        fy = int(rng.integers(0, canvas - frag + 1))
        fx = int(rng.integers(0, canvas - frag + 1))
        # keep the true digit intact
        if fy + frag > dy and fy < dy + side and fx + frag > dx and fx < dx + side:
            continue
        crop = src[sy:sy + frag, sx:sx + frag]
        out[fy:fy + frag, fx:fx + frag] = np.maximum(out[fy:fy + frag, fx:fx + frag], crop)
        placed += 1
    return out, int(source.labels[idx])


def make_cluttered_dataset(rng: np.random.Generator, count: int, canvas: int,
                           source: LabeledDataset, distractors: int = 4,
                           split: str = "train") -> LabeledDataset:
    images, labels = [], []
    for _ in range(count):
        im, lab = synth_cluttered(rng, canvas, source, distractors)
        images.append(im)
        labels.append(lab)
    return LabeledDataset(images=images, labels=np.array(labels), num_classes=10,
                          split=split)


# -- augmentation -----------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(images: np.ndarray, targets: np.ndarray, alpha: float,
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pixel/target mixing with one Beta(alpha, alpha) draw per batch."""
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be > 0, got {alpha}")
    if len(images) < 2:
        raise ValueError("mixup needs a batch of at least 2")
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    mixed_images = lam * images + (1.0 - lam) * images[perm]
    mixed_targets = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_images.astype(images.dtype), mixed_targets.astype(targets.dtype)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle: a pure function of (seed, epoch)."""
    return np.random.default_rng((seed, epoch)).permutation(n)
