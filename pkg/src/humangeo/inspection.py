"""Foreground/background attribution of last-conv filters.

For each image with a person box, every filter's post-ReLU map from the last
conv layer is upsampled to the image size and the fraction of its activation
mass inside the box is recorded. Per-filter histograms of those fractions,
a ranking of filters by mean fraction, and heatmap overlays make up the
report.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import convnet
from . import tensor as T
from .dataset import BBox, IMAGE_BASED, image_shape, load_batch, pooling_mode
from .errors import UsageError

MASS_EPS = 1e-12
FOREGROUND_THRESHOLD = 0.8
BACKGROUND_THRESHOLD = 0.2


@dataclass
class ActivationStack:
    record_id: str
    activations: np.ndarray  # F x h x w, post-ReLU
    image_hw: tuple  # (H, W) of the original image

    @property
    def num_filters(self) -> int:
        return self.activations.shape[0]


@dataclass(frozen=True)
class ProportionSample:
    record_id: str
    filter: int
    proportion: float


@dataclass
class FilterDensity:
    filter: int
    masses: np.ndarray  # per-bin probability mass over [0, 1]
    count: int
    mean: float


def capture_activations(spec, weights, manifest, records, pooling: str = IMAGE_BASED, strict: bool = True,
                        chunk: int = 64) -> list:
    """Post-ReLU last-conv activations (eval mode) for each record."""
    tap = convnet.last_conv_name(spec)
    pooling = pooling_mode(pooling)
    stacks = []
    for i in range(0, len(records), chunk):
        part = records[i : i + chunk]
        batch = load_batch(manifest, part, pooling, spec.input_shape[1:], spec.mean, strict)
        _, captured = convnet.forward(spec, weights, batch, taps=(tap,))
        for r, acts in zip(part, captured[tap]):
            _, h, w = image_shape(manifest.resolve(r))
            stacks.append(ActivationStack(r.id, np.ascontiguousarray(acts), (h, w)))
    return stacks


def heatmap(stack: ActivationStack, filter_index: int) -> np.ndarray:
    """One filter's map bilinearly upsampled to the original image size."""
    if not 0 <= filter_index < stack.num_filters:
        raise UsageError(f"filter index {filter_index} outside [0, {stack.num_filters})")
    return T.bilinear_upsample(stack.activations[filter_index], *stack.image_hw)


def heatmaps(stack: ActivationStack) -> np.ndarray:
    """All filters at once: F x H x W."""
    h, w = stack.activations.shape[1:]
    H, W = stack.image_hw
    if H < h or W < w:
        raise UsageError(f"image {H}x{W} smaller than activation map {h}x{w}")
    return T.resize_bilinear(stack.activations, H, W)


def bbox_proportion(hmap: np.ndarray, bbox: BBox):
    """Share of heatmap mass inside ``bbox``; ``None`` when the total mass is ~0."""
    H, W = hmap.shape
    bbox.check(W, H)
    inside, outside = _split_mass(hmap[None].astype(np.float64), bbox)
    return _ratio(inside[0], outside[0])


def _split_mass(maps: np.ndarray, bbox: BBox):
    """Per-map mass inside and outside ``bbox``, summed separately so that a
    map with no mass outside yields a proportion of exactly 1."""
    inside_mask = np.zeros(maps.shape[1:], dtype=bool)
    inside_mask[bbox.y1 : bbox.y2, bbox.x1 : bbox.x2] = True
    inside = maps[:, inside_mask].sum(axis=1)
    outside = maps[:, ~inside_mask].sum(axis=1)
    return inside, outside


def _ratio(inside: float, outside: float):
    total = float(inside) + float(outside)
    if total <= MASS_EPS:
        return None
    return min(max(float(inside) / total, 0.0), 1.0)


def stack_proportions(stack: ActivationStack, bbox: BBox) -> list:
    H, W = stack.image_hw
    bbox.check(W, H)
    inside, outside = _split_mass(heatmaps(stack).astype(np.float64), bbox)
    out = []
    for f in range(stack.num_filters):
        p = _ratio(inside[f], outside[f])
        if p is not None:
            out.append(ProportionSample(stack.record_id, f, p))
    return out


def collect_proportions(spec, weights, manifest, records, chunk: int = 64):
    """Samples for every (record, filter) with positive mass.

    Records without a bbox are skipped; returns ``(samples, n_skipped)``.
    """
    boxed = [r for r in records if r.bbox is not None]
    samples = []
    for i in range(0, len(boxed), chunk):
        part = boxed[i : i + chunk]
        for r, stack in zip(part, capture_activations(spec, weights, manifest, part, chunk=chunk)):
            samples.extend(stack_proportions(stack, r.bbox))
    return samples, len(records) - len(boxed)


def filter_density(samples, num_filters: int | None = None, bins: int = 50) -> list:
    """Per-filter normalized histogram over [0, 1]; 1.0 lands in the last bin."""
    if bins < 2:
        raise UsageError(f"need at least 2 bins, got {bins}")
    if num_filters is None:
        num_filters = max((s.filter for s in samples), default=-1) + 1
    values = [[] for _ in range(num_filters)]
    for s in samples:
        values[s.filter].append(s.proportion)
    out = []
    for f, vals in enumerate(values):
        v = np.asarray(vals, dtype=np.float64)
        if v.size == 0:
            out.append(FilterDensity(f, np.zeros(bins), 0, float("nan")))
            continue
        idx = np.minimum((v * bins).astype(np.intp), bins - 1)
        counts = np.bincount(idx, minlength=bins)
        out.append(FilterDensity(f, counts / v.size, int(v.size), float(np.sort(v).sum() / v.size)))
    return out


def sort_filters(densities, include_empty: bool = False) -> list:
    """Filter indices by descending mean proportion, lower index first on ties.

    Filters without samples are dropped, or appended in index order with
    ``include_empty``.
    """
    full = [d for d in densities if d.count > 0]
    order = [d.filter for d in sorted(full, key=lambda d: (-d.mean, d.filter))]
    if include_empty:
        order += [d.filter for d in densities if d.count == 0]
    return order


def group_filters(densities, fg: float = FOREGROUND_THRESHOLD, bg: float = BACKGROUND_THRESHOLD) -> dict:
    groups = {"foreground": [], "shared": [], "background": []}
    means = {d.filter: d.mean for d in densities}
    for f in sort_filters(densities):
        m = means[f]
        key = "foreground" if m > fg else "background" if m < bg else "shared"
        groups[key].append(f)
    return groups


def quartile_gap(densities) -> float:
    """Mean proportion of the top quarter of ranked filters minus the bottom quarter."""
    order = sort_filters(densities)
    if len(order) < 4:
        raise UsageError("need at least 4 non-empty filters")
    means = {d.filter: d.mean for d in densities}
    q = len(order) // 4
    return float(np.mean([means[f] for f in order[:q]]) - np.mean([means[f] for f in order[-q:]]))


def _fmt(x: float) -> str:
    return f"{x:.8g}"


def export_inspection_report(densities, order, overlays: dict, out_dir, fg: float = FOREGROUND_THRESHOLD,
                             bg: float = BACKGROUND_THRESHOLD) -> dict:
    """Write ``density.csv``, ``overlay_<id>_<filter>.gstn`` files and ``summary.txt``.

    ``overlays`` maps ``(record_id, filter)`` to an H x W heatmap. Returns the
    filter groups.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_filter = {d.filter: d for d in densities}
    bins = len(densities[0].masses) if densities else 0
    with open(out / "density.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["filter"] + [f"bin_{i}" for i in range(bins)] + ["mean", "count"])
        for f in order:
            d = by_filter[f]
            w.writerow([f] + [_fmt(m) for m in d.masses] + [_fmt(d.mean), d.count])
    for (rid, f), hmap in sorted(overlays.items()):
        T.save_tensor(out / f"overlay_{rid}_{f}.gstn", hmap)
    groups = group_filters(densities, fg, bg)
    n_samples = sum(d.count for d in densities)
    lines = [
        "# filter origin summary",
        "# density: per-filter normalized histogram of in-bbox activation proportion",
        f"# bins={bins} samples={n_samples} filters={len(order)} fg_threshold={fg} bg_threshold={bg}",
    ]
    for key in ("foreground", "shared", "background"):
        members = groups[key]
        lines.append(f"{key} ({len(members)}): " + " ".join(str(f) for f in members))
    if len(order) >= 4:
        lines.append(f"quartile_gap: {_fmt(quartile_gap(densities))}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return groups
