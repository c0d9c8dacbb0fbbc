import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from humangeo import convnet as C
from humangeo import dataset as D
from humangeo import inspection as I
from humangeo import tensor as T
from humangeo.errors import UsageError


def stack_of(maps, hw, rid="r"):
    return I.ActivationStack(rid, np.asarray(maps, np.float32), hw)


def samples_for(filter_values):
    out = []
    for f, vals in enumerate(filter_values):
        out += [I.ProportionSample(f"r{i}", f, v) for i, v in enumerate(vals)]
    return out


def dens_with_means(means):
    return [I.FilterDensity(f, np.zeros(4), 1, m) for f, m in enumerate(means)]


# ---------------------------------------------------------------- capture


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("insp")
    m = D.make_synthetic_dataset(root, 3, 4, "foreground", seed=1)
    spec = C.desk_spec(3, mean=(0.5, 0.5, 0.5))
    w = C.build_network(spec, init="he", seed=2)
    return m, spec, w


def test_capture_activations(small_run):
    m, spec, w = small_run
    stacks = I.capture_activations(spec, w, m, m.records[:5], chunk=2)
    assert [s.record_id for s in stacks] == [r.id for r in m.records[:5]]
    for s in stacks:
        assert s.activations.shape == (64, 16, 16) and s.image_hw == (64, 64)
        assert (s.activations >= 0).all()
    again = I.capture_activations(spec, w, m, m.records[:1])
    assert again[0].activations.tobytes() == stacks[0].activations.tobytes()


def test_capture_vggf_filter_count(small_run):
    m, _, _ = small_run
    spec = C.vggf_spec(3)
    w = C.build_network(spec, init="gaussian", sigma=0.01, seed=0)
    (s,) = I.capture_activations(spec, w, m, m.records[:1])
    assert s.num_filters == 256 and s.activations.shape == (256, 13, 13)


# ---------------------------------------------------------------- heatmaps


def test_heatmap_examples():
    s = stack_of(np.full((2, 3, 3), 0.4), (9, 12))
    assert np.all(I.heatmap(s, 1) == np.float32(0.4))
    m = np.random.default_rng(0).random((1, 5, 6))
    assert np.array_equal(I.heatmap(stack_of(m, (5, 6)), 0), m[0].astype(np.float32))
    two = stack_of([[[1, 2], [3, 4]]], (4, 4))
    assert np.array_equal(I.heatmap(two, 0), T.bilinear_upsample(np.array([[1, 2], [3, 4]], np.float32), 4, 4))
    assert I.heatmap(two, 0)[1].tolist() == [1.5, 1.75, 2.25, 2.5]
    with pytest.raises(UsageError):
        I.heatmap(two, 1)
    assert np.array_equal(I.heatmaps(stack_of(m, (10, 12)))[0], I.heatmap(stack_of(m, (10, 12)), 0))


# ---------------------------------------------------------------- proportions


def test_bbox_proportion_examples():
    u = np.ones((8, 8))
    assert I.bbox_proportion(u, D.BBox(0, 0, 4, 4)) == 0.25
    h = np.zeros((8, 8))
    h[2:4, 3:5] = 1.0
    assert I.bbox_proportion(h, D.BBox(3, 2, 5, 4)) == 1.0
    assert I.bbox_proportion(h, D.BBox(5, 5, 8, 8)) == 0.0
    assert I.bbox_proportion(np.zeros((8, 8)), D.BBox(0, 0, 2, 2)) is None
    with pytest.raises(UsageError):
        I.bbox_proportion(u, D.BBox(0, 0, 9, 2))


heat = hnp.arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.floats(0.001, 100))


@st.composite
def heat_and_box(draw):
    h = draw(heat)
    H, W = h.shape
    x1 = draw(st.integers(0, W - 1))
    y1 = draw(st.integers(0, H - 1))
    return h, D.BBox(x1, y1, draw(st.integers(x1 + 1, W)), draw(st.integers(y1 + 1, H)))


@settings(max_examples=300, deadline=None)
@given(heat_and_box(), st.floats(1e-3, 1e3))
def test_proportion_scale_invariance_and_complementarity(hb, scale):
    h, box = hb
    p = I.bbox_proportion(h, box)
    assert 0.0 <= p <= 1.0
    assert abs(I.bbox_proportion(h * scale, box) - p) <= 1e-12
    mask = np.ones(h.shape, bool)
    mask[box.y1 : box.y2, box.x1 : box.x2] = False
    assert abs(p + h[mask].sum() / h.sum() - 1.0) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(heat_and_box())
def test_support_inside_bbox_gives_one(hb):
    h, box = hb
    inside = np.zeros_like(h)
    inside[box.y1 : box.y2, box.x1 : box.x2] = h[box.y1 : box.y2, box.x1 : box.x2]
    assert I.bbox_proportion(inside, box) == 1.0


def test_stack_proportions_known_masses():
    maps = np.zeros((3, 4, 4), np.float32)
    maps[0, 0, 0] = 3.0
    maps[0, 3, 3] = 1.0
    maps[1] = 1.0
    s = stack_of(maps, (4, 4), "rec")
    out = I.stack_proportions(s, D.BBox(0, 0, 2, 2))
    assert [(o.filter, o.proportion) for o in out] == [(0, 0.75), (1, 0.25)]
    assert all(o.record_id == "rec" for o in out)


def test_collect_proportions(small_run):
    m, spec, w = small_run
    recs = list(m.records[:6]) + [D.ImageRecord("nobox", m.records[0].path, 0)]
    samples, skipped = I.collect_proportions(spec, w, m, recs, chunk=4)
    assert skipped == 1
    assert 0 < len(samples) <= 6 * 64
    assert all(0.0 <= s.proportion <= 1.0 for s in samples)
    by_stack = []
    for r, st_ in zip(m.records[:6], I.capture_activations(spec, w, m, m.records[:6])):
        by_stack += I.stack_proportions(st_, r.bbox)
    assert samples == by_stack


# ---------------------------------------------------------------- densities / ranking


def test_filter_density_examples():
    d = I.filter_density(samples_for([[0.5] * 7, [], [1.0, 0.0]]), 3, bins=50)
    assert d[0].masses[25] == 1.0 and d[0].masses.sum() == 1.0 and d[0].count == 7
    assert d[1].count == 0 and d[1].masses.sum() == 0
    assert d[2].masses[49] == 0.5 and d[2].masses[0] == 0.5
    with pytest.raises(UsageError):
        I.filter_density([], 1, bins=1)


def test_filter_density_uniform_statistics():
    n, bins = 20000, 50
    vals = np.random.default_rng(0).random(n).tolist()
    (d,) = I.filter_density(samples_for([vals]), 1, bins)
    assert np.all(np.abs(d.masses - 1 / bins) <= 3 / np.sqrt(n))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), max_size=30), min_size=1, max_size=6), st.integers(2, 60))
def test_density_normalized(values, bins):
    for d in I.filter_density(samples_for(values), len(values), bins):
        if d.count:
            assert abs(d.masses.sum() - 1.0) <= 1e-6
            assert 0 <= d.mean <= 1


def test_sort_filters_examples():
    assert I.sort_filters(dens_with_means([0.9, 0.1, 0.5])) == [0, 2, 1]
    assert I.sort_filters(dens_with_means([0.3] * 4)) == [0, 1, 2, 3]
    dens = dens_with_means([0.2, 0.7, 0.4])
    dens.insert(1, I.FilterDensity(1, np.zeros(4), 0, float("nan")))
    dens = [I.FilterDensity(i, d.masses, d.count, d.mean) for i, d in enumerate(dens)]
    assert I.sort_filters(dens) == [2, 3, 0]
    assert I.sort_filters(dens, include_empty=True) == [2, 3, 0, 1]


def test_sort_filters_fg_before_bg():
    rng = np.random.default_rng(1)
    fg = [rng.uniform(0.8, 1.0, 20).tolist() for _ in range(5)]
    bg = [rng.uniform(0.0, 0.2, 20).tolist() for _ in range(5)]
    values = [v for pair in zip(bg, fg) for v in pair]  # interleave bg, fg
    order = I.sort_filters(I.filter_density(samples_for(values), 10))
    assert set(order[:5]) == {1, 3, 5, 7, 9} and set(order[5:]) == {0, 2, 4, 6, 8}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), max_size=5), max_size=8))
def test_sort_filters_is_permutation_of_nonempty(values):
    dens = I.filter_density(samples_for(values), len(values))
    assert sorted(I.sort_filters(dens)) == [d.filter for d in dens if d.count > 0]


def test_groups_and_quartile_gap():
    dens = dens_with_means([0.95, 0.5, 0.05, 0.85, 0.1, 0.3, 0.6, 0.15])
    g = I.group_filters(dens)
    assert g == {"foreground": [0, 3], "shared": [6, 1, 5], "background": [7, 4, 2]}
    assert I.quartile_gap(dens) == pytest.approx((0.95 + 0.85) / 2 - (0.1 + 0.05) / 2)
    with pytest.raises(UsageError):
        I.quartile_gap(dens[:3])


# ---------------------------------------------------------------- export


def test_export_report(tmp_path):
    rng = np.random.default_rng(3)
    values = [rng.random(10).tolist() for _ in range(5)] + [[]]
    dens = I.filter_density(samples_for(values), 6, bins=10)
    order = I.sort_filters(dens)
    overlays = {("img1", order[0]): rng.random((6, 6)).astype(np.float32)}
    I.export_inspection_report(dens, order, overlays, tmp_path / "a")
    I.export_inspection_report(dens, order, overlays, tmp_path / "b")
    rows = (tmp_path / "a" / "density.csv").read_text().splitlines()
    assert rows[0] == "filter," + ",".join(f"bin_{i}" for i in range(10)) + ",mean,count"
    assert len(rows) - 1 == 5
    for row in rows[1:]:
        cells = row.split(",")
        assert abs(sum(float(c) for c in cells[1:11]) - 1.0) <= 1e-6
    assert [int(r.split(",")[0]) for r in rows[1:]] == order
    ov = tmp_path / "a" / f"overlay_img1_{order[0]}.gstn"
    assert ov.read_bytes()[:4] == b"GSTN"
    assert np.array_equal(T.load_tensor(ov), overlays[("img1", order[0])])
    summary = (tmp_path / "a" / "summary.txt").read_text()
    assert "per-filter normalized" in summary and "quartile_gap" in summary
    for name in ("density.csv", "summary.txt", ov.name):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
