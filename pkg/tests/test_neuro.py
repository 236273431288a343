import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaffoldkit.neuro import (
    HARVARD_OXFORD_CORTICAL,
    N_REGIONS,
    AtlasLabelMap,
    DimensionMismatchError,
    NeuroError,
    OutOfBoundsError,
    ProbabilisticAtlas,
    RegionVolumeReport,
    VolumeGrid,
    load_volume,
    parcellate,
    parcellation_rows,
    pick_swap_image,
    plan_slice_render,
    render_slices,
    save_volume,
    serialize_parcellation,
)


def probs_of(shape, assignments):
    probs = np.zeros(shape + (N_REGIONS,))
    for idx, regions in assignments.items():
        for r, p in regions.items():
            probs[idx + (r,)] = p
    return probs


def test_uniform_hard_labeling():
    grid = VolumeGrid(np.zeros((2, 2, 2)))
    atlas = AtlasLabelMap(np.full((2, 2, 2), 3))
    rep = parcellate(grid, atlas)
    assert rep.volumes[3] == 8.0
    assert sum(rep.volumes) == 8.0 and rep.background_count == 0


def test_threshold_hand_enumeration():
    grid = VolumeGrid(np.zeros((2, 1, 1)), voxel_size=(2, 1, 1))
    atlas = ProbabilisticAtlas(probs_of((2, 1, 1), {(0, 0, 0): {0: 0.9}, (1, 0, 0): {1: 0.4}}))
    rep = parcellate(grid, atlas, threshold=0.5)
    assert rep.volumes[0] == 2.0
    assert rep.volumes[1] == 0.0
    assert rep.background_count == 1


def test_threshold_zero_keeps_every_positive_voxel():
    rng = np.random.default_rng(0)
    atlas = ProbabilisticAtlas(rng.dirichlet(np.ones(N_REGIONS), size=(3, 3, 3)))
    rep = parcellate(VolumeGrid(np.zeros((3, 3, 3))), atlas, threshold=0.0)
    assert rep.background_count == 0


def test_all_background_warns():
    atlas = ProbabilisticAtlas(np.zeros((2, 2, 2, N_REGIONS)))
    with pytest.warns(RuntimeWarning):
        rep = parcellate(VolumeGrid(np.zeros((2, 2, 2))), atlas)
    assert rep.all_background


def test_dim_mismatch_and_resampling():
    grid = VolumeGrid(np.zeros((4, 4, 4)))
    atlas = AtlasLabelMap(np.zeros((2, 2, 2), dtype=int))
    with pytest.raises(DimensionMismatchError):
        parcellate(grid, atlas)
    rep = parcellate(grid, atlas, resample=True)
    assert rep.volumes[0] == 64.0


def test_invalid_grids():
    with pytest.raises(NeuroError):
        VolumeGrid(np.zeros((2, 2)))
    with pytest.raises(NeuroError):
        VolumeGrid(np.zeros((2, 2, 2)), voxel_size=(1, 0, 1))
    with pytest.raises(NeuroError):
        AtlasLabelMap(np.zeros((2, 2, 2)), region_names=HARVARD_OXFORD_CORTICAL[:10])


@st.composite
def prob_fixture(draw):
    dims = tuple(draw(st.integers(1, 4)) for _ in range(3))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(N_REGIONS, 0.3), size=dims)
    probs *= rng.uniform(0, 1, size=dims + (1,))
    vs = tuple(draw(st.floats(0.5, 3.0)) for _ in range(3))
    return VolumeGrid(np.zeros(dims), voxel_size=vs), ProbabilisticAtlas(probs)


@settings(max_examples=60, deadline=None)
@given(prob_fixture(), st.floats(0, 1), st.floats(0, 1))
def test_conservation_and_monotonicity(fixture, t1, t2):
    grid, atlas = fixture
    lo, hi = sorted((t1, t2))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r_lo = parcellate(grid, atlas, threshold=lo)
        r_hi = parcellate(grid, atlas, threshold=hi)
    n = int(np.prod(grid.dims))
    assert sum(r_lo.voxel_counts) + r_lo.background_count == n
    assert all(a >= b for a, b in zip(r_lo.voxel_counts, r_hi.voxel_counts))
    assert r_lo.total_volume >= r_hi.total_volume


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_hard_atlas_threshold_independent(seed, t):
    rng = np.random.default_rng(seed)
    assignment = rng.integers(-1, N_REGIONS, size=(3, 4, 2))
    grid = VolumeGrid(np.zeros((3, 4, 2)))
    atlas = AtlasLabelMap(assignment)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert parcellate(grid, atlas, threshold=t) == parcellate(grid, atlas, threshold=0.25)


def _report(counts):
    return RegionVolumeReport(tuple(HARVARD_OXFORD_CORTICAL), tuple(counts), 1.0, 0, False)


def test_serialize_single_line():
    counts = [0] * N_REGIONS
    idx = HARVARD_OXFORD_CORTICAL.index("Insular Cortex")
    counts[idx] = 8
    lines = serialize_parcellation(_report(counts)).splitlines()
    assert lines[idx] == "Insular Cortex: 8.0 mm³"


def test_serialize_empty_brain():
    lines = serialize_parcellation(_report([0] * N_REGIONS)).splitlines()
    assert len(lines) == 48 and all(l.endswith("0.0 mm³") for l in lines)


def test_serialize_preserves_atlas_order():
    counts = list(range(100, 100 + N_REGIONS))[::-1]
    lines = serialize_parcellation(_report(counts)).splitlines()
    assert [l.split(":")[0] for l in lines] == list(HARVARD_OXFORD_CORTICAL)
    # an independent sort by volume would reverse the order
    assert sorted(lines, key=lambda l: float(l.split(": ")[1].split()[0])) == lines[::-1]
    rows = parcellation_rows(_report(counts)).splitlines()
    assert rows[0] == "region,volume_mm3" and len(rows) == 49


def test_slice_plan_origin_and_default():
    grid = VolumeGrid(np.zeros((10, 10, 10)), voxel_size=(2, 2, 2), origin=(-10, -10, -10))
    plan = plan_slice_render(grid, (0, 0, 0))
    assert plan.cut_coords == (0.0, 0.0, 0.0)
    assert [s.plane for s in plan.slices] == ["sagittal", "coronal", "axial"]
    assert plan.crosshairs and plan.zero_anchored_colormap
    grid2 = VolumeGrid(np.zeros((4, 6, 8)), voxel_size=(1, 2, 3), origin=(5, 0, -2))
    lo, hi = grid2.bounds
    assert plan_slice_render(grid2).cut_coords == pytest.approx(tuple((lo + hi) / 2))


def test_slice_out_of_bounds_names_axis():
    grid = VolumeGrid(np.zeros((10, 10, 10)), origin=(-5, -5, -5))
    with pytest.raises(OutOfBoundsError) as exc:
        plan_slice_render(grid, (99, 0, 0))
    assert exc.value.plane == "sagittal"
    assert "sagittal" in str(exc.value)


def test_render_slices_writes_file(tmp_path):
    pytest.importorskip("matplotlib")
    grid = VolumeGrid(np.random.default_rng(0).normal(size=(6, 6, 6)))
    path = render_slices(grid, plan_slice_render(grid), tmp_path / "s.png", atlas=AtlasLabelMap(np.zeros((6, 6, 6), dtype=int)))
    assert path.stat().st_size > 0


def test_swap_selection():
    assert pick_swap_image(123, ["only"]) == "only"
    assert pick_swap_image(5, ["a", "b"]) == pick_swap_image(5, ["a", "b"])
    assert {pick_swap_image(s, ["a", "b"]) for s in range(10)} == {"a", "b"}
    with pytest.raises(NeuroError):
        pick_swap_image(0, [])


def test_raw_volume_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    save_volume(tmp_path / "v", arr, voxel_size=(1, 2, 3), origin=(4, 5, 6))
    grid = load_volume(tmp_path / "v")
    np.testing.assert_array_equal(grid.values, arr)
    assert grid.voxel_size == (1.0, 2.0, 3.0) and grid.origin == (4.0, 5.0, 6.0)
