"""Manifests, splits, pixel decoding, preprocessing and the synthetic corpus.

Manifest file (UTF-8)::

    #labels: city00,city01,...
    <id>\t<pixel path>\t<label name>\t<x1,y1,x2,y2 | ->

Pixel paths are relative to the manifest's directory and point at binary
P6 PPM files or 3 x H x W GSTN tensors. Bounding boxes are half-open pixel
ranges. Split file rows are ``<id>\t<train|val|test>``.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, MissingAnnotationError, ParseError, UsageError

IMAGE_BASED = "image_based"
HUMAN_BASED = "human_based"
PARTITIONS = ("train", "val", "test")
SIGNALS = ("foreground", "background", "both")


def pooling_mode(name: str) -> str:
    """Normalize ``image``/``human`` (CLI spelling) to the canonical mode names."""
    aliases = {"image": IMAGE_BASED, IMAGE_BASED: IMAGE_BASED, "human": HUMAN_BASED, HUMAN_BASED: HUMAN_BASED}
    try:
        return aliases[name]
    except KeyError:
        raise UsageError(f"unknown pooling mode {name!r}; use image or human") from None


@dataclass(frozen=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def check(self, width: int, height: int) -> None:
        if not (0 <= self.x1 < self.x2 <= width and 0 <= self.y1 < self.y2 <= height):
            raise UsageError(f"bbox {self.format()} outside {width}x{height} image")

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def format(self) -> str:
        return f"{self.x1},{self.y1},{self.x2},{self.y2}"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: int
    bbox: BBox | None = None


@dataclass
class Manifest:
    records: list
    label_names: list
    root: Path = Path(".")

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}

    def subset(self, ids) -> list:
        lookup = self.by_id()
        return [lookup[i] for i in ids]


# ---------------------------------------------------------------------------
# manifest / split files

_BBOX_RE = re.compile(r"^\[?\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]?$")


def load_manifest(path, check_images: bool = True) -> Manifest:
    """Parse and validate a manifest; every offending row is reported at once."""
    path = Path(path)
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    offenders = []
    label_names = None
    records, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#labels:"):
                names = [n.strip() for n in line[len("#labels:"):].split(",") if n.strip()]
                if len(set(names)) != len(names):
                    offenders.append((lineno, "duplicate label names"))
                label_names = names
            continue
        if label_names is None:
            offenders.append((lineno, "record before '#labels:' header"))
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            offenders.append((lineno, f"expected 4 tab-separated fields, got {len(fields)}"))
            continue
        rid, pix, label_name, bbox_field = fields
        if not rid:
            offenders.append((lineno, "empty id"))
            continue
        if rid in seen:
            offenders.append((lineno, f"duplicate id {rid!r}"))
            continue
        seen.add(rid)
        if label_name not in label_names:
            offenders.append((lineno, f"unknown label {label_name!r}"))
            continue
        bbox = None
        if bbox_field.strip() != "-":
            m = _BBOX_RE.match(bbox_field.strip())
            if not m:
                offenders.append((lineno, f"malformed bbox {bbox_field!r}"))
                continue
            x1, y1, x2, y2 = map(int, m.groups())
            if x1 < 0 or y1 < 0 or x2 <= x1 or y2 <= y1:
                offenders.append((lineno, f"malformed bbox {bbox_field!r}: need 0 <= x1 < x2, 0 <= y1 < y2"))
                continue
            bbox = BBox(x1, y1, x2, y2)
        record = ImageRecord(rid, pix, label_names.index(label_name), bbox)
        if check_images:
            try:
                _, h, w = image_shape(root / pix if not Path(pix).is_absolute() else Path(pix))
            except (OSError, FormatError) as exc:
                offenders.append((lineno, f"pixel source not decodable: {exc}"))
                continue
            if bbox is not None and not (bbox.x2 <= w and bbox.y2 <= h):
                offenders.append((lineno, f"bbox {bbox.format()} exceeds {w}x{h} image"))
                continue
        records.append(record)
    if label_names is None and not offenders:
        offenders.append((1, "missing '#labels:' header"))
    if offenders:
        raise ParseError(path, offenders)
    return Manifest(records, label_names, root)


def write_manifest(manifest: Manifest, path) -> None:
    lines = ["#labels: " + ",".join(manifest.label_names)]
    for r in manifest.records:
        bbox = r.bbox.format() if r.bbox else "-"
        lines.append(f"{r.id}\t{r.path}\t{manifest.label_names[r.label]}\t{bbox}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split(manifest: Manifest, seed: int = 0) -> dict:
    """Stratified 70/15/15 assignment ``{record id: partition}`` in manifest order.

    Per class, val and test get ``floor(0.15 n)`` records each and train
    ``floor(0.7 n)``; the (at most two) left-over records go to train, then val.
    """
    rng = np.random.default_rng(seed)
    tags = {}
    for c in range(manifest.num_classes):
        ids = [r.id for r in manifest.records if r.label == c]
        n = len(ids)
        n_train, n_val, n_test = n * 70 // 100, n * 15 // 100, n * 15 // 100
        rest = n - n_train - n_val - n_test
        if rest:
            n_train += 1
            rest -= 1
        n_val += rest
        order = rng.permutation(n)
        for pos, i in enumerate(order):
            tags[ids[i]] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
    return {r.id: tags[r.id] for r in manifest.records if r.id in tags}


def write_split(assignment: dict, path) -> None:
    Path(path).write_text("".join(f"{rid}\t{tag}\n" for rid, tag in assignment.items()), encoding="utf-8")


def load_split(path) -> dict:
    path = Path(path)
    out, offenders = {}, []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2 or fields[1] not in PARTITIONS:
            offenders.append((lineno, f"expected '<id>\\t<train|val|test>', got {line!r}"))
        elif fields[0] in out:
            offenders.append((lineno, f"duplicate id {fields[0]!r}"))
        else:
            out[fields[0]] = fields[1]
    if offenders:
        raise ParseError(path, offenders)
    return out


def partition(manifest: Manifest, assignment: dict, tag: str) -> list:
    return [r for r in manifest.records if assignment.get(r.id) == tag]


# ---------------------------------------------------------------------------
# pixels


def _ppm_header(data: bytes, path) -> tuple:
    """Return ``(width, height, maxval, payload offset)`` of a binary PPM."""
    if data[:2] != b"P6":
        raise FormatError(f"{path}: not a binary P6 PPM")
    tokens, pos = [], 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace() and data[end : end + 1] != b"#":
                end += 1
            tok = data[pos:end]
            if not tok.isdigit():
                raise FormatError(f"{path}: bad PPM header token {tok!r}")
            tokens.append(int(tok))
            pos = end
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: truncated PPM header")
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: empty image")
    return width, height, maxval, pos + 1


def decode_ppm(path) -> np.ndarray:
    """Binary P6 PPM -> float32 tensor 3 x H x W in [0, 1], RGB order."""
    data = Path(path).read_bytes()
    width, height, _, offset = _ppm_header(data, path)
    n = width * height * 3
    if len(data) - offset < n:
        raise FormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset).reshape(height, width, 3)
    return (px.transpose(2, 0, 1).astype(T.DTYPE) / T.DTYPE(255)).astype(T.DTYPE)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """3 x H x W float image -> H x W x 3 uint8 (round to nearest, clipped)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"encode_ppm needs a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    with open(path, "wb") as fp:
        fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fp.write(np.ascontiguousarray(to_bytes(image)).tobytes())


def image_shape(path) -> tuple:
    """``(C, H, W)`` from the file header only."""
    path = Path(path)
    with open(path, "rb") as fp:
        head = fp.read(512)
    if head[:4] == T.TENSOR_MAGIC:
        if len(head) < 6 or len(head) < 6 + 4 * head[5]:
            raise FormatError(f"{path}: truncated tensor header")
        rank = head[5]
        dims = struct.unpack(f"<{rank}I", head[6 : 6 + 4 * rank])
        if rank != 3 or dims[0] != 3:
            raise FormatError(f"{path}: expected a 3 x H x W tensor, got {dims}")
        return tuple(dims)
    width, height, _, _ = _ppm_header(head, path)
    return (3, height, width)


def load_image(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fp:
        magic = fp.read(4)
    if magic == T.TENSOR_MAGIC:
        x = T.load_tensor(path)
        if x.ndim != 3 or x.shape[0] != 3:
            raise FormatError(f"{path}: expected a 3 x H x W tensor, got {x.shape}")
        return x
    return decode_ppm(path)


def crop_bbox(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Exact sub-tensor ``image[:, y1:y2, x1:x2]``."""
    _, h, w = image.shape
    bbox.check(w, h)
    return image[:, bbox.y1 : bbox.y2, bbox.x1 : bbox.x2].copy()


def preprocess(record: ImageRecord, mode: str, target, mean, root=None, strict: bool = True,
               image: np.ndarray | None = None) -> np.ndarray:
    """Optional person crop, bilinear resize to ``target`` (H, W), mean subtraction.

    In ``human_based`` mode a record without a bbox raises
    :class:`MissingAnnotationError` unless ``strict`` is False, in which case
    the whole image is used.
    """
    mode = pooling_mode(mode)
    if image is None:
        p = Path(record.path)
        image = load_image(p if root is None or p.is_absolute() else Path(root) / p)
    if mode == HUMAN_BASED:
        if record.bbox is not None:
            image = crop_bbox(image, record.bbox)
        elif strict:
            raise MissingAnnotationError(f"record {record.id!r} has no bounding box (human-based pooling)")
    out = T.resize_bilinear(image, int(target[0]), int(target[1]))
    return (out - np.asarray(mean, dtype=T.DTYPE).reshape(-1, 1, 1)).astype(T.DTYPE)


def load_batch(manifest: Manifest, records, mode: str, target, mean, strict: bool = True) -> np.ndarray:
    out = np.empty((len(records), 3, int(target[0]), int(target[1])), dtype=T.DTYPE)
    for i, r in enumerate(records):
        out[i] = preprocess(r, mode, target, mean, root=manifest.root, strict=strict)
    return out


def channel_mean(manifest: Manifest, records, mode: str, target, strict: bool = True) -> tuple:
    """Per-channel mean of the preprocessed (un-centered) images, in float64."""
    if not records:
        return (0.0, 0.0, 0.0)
    acc = np.zeros(3, dtype=np.float64)
    for r in records:
        acc += preprocess(r, mode, target, (0.0, 0.0, 0.0), root=manifest.root, strict=strict).mean(axis=(1, 2),
                                                                                                dtype=np.float64)
    return tuple(float(round(v, 6)) for v in acc / len(records))


# ---------------------------------------------------------------------------
# synthetic corpus

_U = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
_V = np.array([1.0, 1.0, -2.0]) / math.sqrt(6)


def palette(m: int, offset: float = 0.0, radius: float = 0.3) -> np.ndarray:
    """``m`` colors on a circle around mid-gray, orthogonal to the gray axis.

    Every color is a vertex of the circle's convex hull, so one-vs-rest linear
    separation of mean colors is always possible.
    """
    theta = 2 * math.pi * np.arange(m) / m + offset
    return 0.5 + radius * (np.cos(theta)[:, None] * _U + np.sin(theta)[:, None] * _V)


def _neutral(rng, h, w, level):
    """Gray region with a random stripe texture; carries no class information."""
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, math.pi)
    freq = rng.uniform(0.15, 0.5)
    stripes = 0.08 * np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + rng.uniform(0, 2 * math.pi))
    return np.broadcast_to(level + stripes, (3, h, w))


def _colored(rng, h, w, color):
    return np.broadcast_to(np.asarray(color).reshape(3, 1, 1) + rng.uniform(-0.05, 0.05), (3, h, w))


def synth_image(rng, label: int, k: int, signal: str, size: int = 64, offset: float = 0.0):
    """One synthetic image and its person box for class ``label``."""
    bw = int(rng.integers(int(0.35 * size), int(0.55 * size) + 1))
    bh = int(rng.integers(int(0.55 * size), int(0.85 * size) + 1))
    x1 = int(rng.integers(0, size - bw + 1))
    y1 = int(rng.integers(0, size - bh + 1))
    box = BBox(x1, y1, x1 + bw, y1 + bh)
    if signal == "foreground":
        bg = _neutral(rng, size, size, rng.uniform(0.25, 0.75))
        fg = _colored(rng, bh, bw, palette(k, offset)[label])
    elif signal == "background":
        bg = _colored(rng, size, size, palette(k, offset)[label])
        fg = _neutral(rng, bh, bw, rng.uniform(0.25, 0.75))
    elif signal == "both":
        # person color encodes label // 2, background lightness encodes label % 2
        fg = _colored(rng, bh, bw, palette((k + 1) // 2, offset)[label // 2])
        bg = _neutral(rng, size, size, (0.2, 0.8)[label % 2])
    else:
        raise UsageError(f"unknown signal {signal!r}; choose from {SIGNALS}")
    img = np.array(bg, dtype=np.float64)
    img[:, box.y1 : box.y2, box.x1 : box.x2] = fg
    img += rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0, 1), box


def make_synthetic_dataset(out_dir, k: int, n_per_class: int, signal: str = "foreground", seed: int = 0,
                           size: int = 64, offset: float = 0.0, prefix: str = "city") -> Manifest:
    """Write ``k * n_per_class`` PPM images plus ``manifest.tsv`` into ``out_dir``.

    ``foreground``: a class color fills the person box, background is neutral
    texture. ``background``: the reverse. ``both``: the box color carries
    ``label // 2`` and background lightness ``label % 2``.
    """
    if k < 2:
        raise UsageError(f"need at least 2 classes, got {k}")
    if signal not in SIGNALS:
        raise UsageError(f"unknown signal {signal!r}; choose from {SIGNALS}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = [f"{prefix}{c:02d}" for c in range(k)]
    records = []
    for c in range(k):
        for i in range(n_per_class):
            img, box = synth_image(rng, c, k, signal, size, offset)
            rid = f"{names[c]}_{i:04d}"
            rel = f"images/{rid}.ppm"
            encode_ppm(out / rel, img)
            records.append(ImageRecord(rid, rel, c, box))
    manifest = Manifest(records, names, out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
