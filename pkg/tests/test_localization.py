import numpy as np
import pytest

from stvad.errors import DataError
from stvad.localization import (
    LocalizeConfig,
    PatchGrid,
    SpatialHeatMap,
    extract_boxes,
    fuse_scales,
    grid_shape,
    localize_video,
    pool_grid,
    retrieve,
    save_heatmap_png,
    upsample,
)
from stvad.prompts import QuerySet

from oracles import connected_components_oracle, retrieve_oracle


def _queries(rng, n_norm=2, n_ab=2, d=6):
    return QuerySet(rng.standard_normal((n_norm, d)), rng.standard_normal((n_ab, d)), [], [])


def test_grid_shape_default_scales():
    assert grid_shape((224, 224), 32, 32) == (7, 7)
    assert grid_shape((224, 224), 80, 48) == (4, 4)
    with pytest.raises(DataError, match="exceeds"):
        grid_shape((64, 64), 80, 48)


def test_retrieve_symmetric_case():
    q = QuerySet(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [], [])
    grid = PatchGrid(np.array([[[1.0, 1.0]]]), 32, 32)  # equidistant from both queries
    heat = retrieve(grid, q, 0.5)
    assert np.allclose(heat.values, 0.5, atol=1e-12)


def test_retrieve_prototype_patch_saturates():
    proto = np.array([0.0, 1.0, 0.0])
    q = QuerySet(np.array([[1.0, 0.0, 0.0]]), proto[None, :], [], [])
    grid = PatchGrid(proto.reshape(1, 1, 3), 32, 32)
    heat = retrieve(grid, q, 0.07)
    assert heat.values[0, 0] > 1.0 - 1e-6


def test_retrieve_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(8):
        d = int(rng.integers(3, 7))
        grid = PatchGrid(rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(1, 5)), d)), 32, 32)
        q = _queries(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), d)
        tau = float(rng.uniform(0.05, 1.0))
        got = retrieve(grid, q, tau)
        want = retrieve_oracle(grid.features, q.normal, q.abnormal, tau)
        assert np.allclose(got.values, want, atol=1e-6)
        assert ((got.values > 0) & (got.values < 1)).all()


def test_retrieve_mass_splits_to_one():
    rng = np.random.default_rng(1)
    grid = PatchGrid(rng.standard_normal((3, 3, 5)), 32, 32)
    qn = rng.standard_normal((2, 5))
    qa = rng.standard_normal((3, 5))
    ab = retrieve(grid, QuerySet(qn, qa, [], []), 0.3).values
    # swapping the groups gives the complementary mass
    norm = retrieve(grid, QuerySet(qa, qn, [], []), 0.3).values
    assert np.allclose(ab + norm, 1.0, atol=1e-6)


def test_retrieve_monotone_in_duplicated_abnormal_query():
    rng = np.random.default_rng(2)
    grid = PatchGrid(rng.standard_normal((2, 2, 4)), 32, 32)
    qn = rng.standard_normal((2, 4))
    qa = rng.standard_normal((1, 4))
    base = retrieve(grid, QuerySet(qn, qa, [], []), 0.2).values
    doubled = retrieve(grid, QuerySet(qn, np.vstack([qa, qa]), [], []), 0.2).values
    assert (doubled > base).all()


def test_retrieve_rejects_bad_inputs():
    rng = np.random.default_rng(3)
    grid = PatchGrid(rng.standard_normal((2, 2, 4)), 32, 32)
    q = _queries(rng, d=4)
    with pytest.raises(DataError, match="tau"):
        retrieve(grid, q, 0.0)
    with pytest.raises(DataError, match="dimension mismatch"):
        retrieve(grid, _queries(rng, d=5), 0.07)


def test_upsample_preserves_range_and_cell_centers():
    rng = np.random.default_rng(4)
    values = rng.uniform(0.0, 1.0, (7, 7))
    heat = upsample(SpatialHeatMap(values, 32, 32), (224, 224))
    assert heat.upsampled.shape == (224, 224)
    assert heat.upsampled.min() >= values.min() - 1e-12
    assert heat.upsampled.max() <= values.max() + 1e-12
    # window centers carry the cell value (up to the half-pixel sampling offset)
    for i in (0, 3, 6):
        for j in (0, 3, 6):
            cy = int(32 * i + 16)
            cx = int(32 * j + 16)
            assert abs(heat.upsampled[cy, cx] - values[i, j]) < 0.03


def test_fusion_identities_and_arithmetic():
    rng = np.random.default_rng(5)
    a = upsample(SpatialHeatMap(rng.uniform(0, 1, (7, 7)), 32, 32), (224, 224))
    b = upsample(SpatialHeatMap(rng.uniform(0, 1, (7, 7)), 32, 32), (224, 224))
    assert np.array_equal(fuse_scales(a, b, 1.0).upsampled, a.upsampled)
    assert np.allclose(fuse_scales(a, a, 0.5).upsampled, a.upsampled, atol=1e-12)
    fused = fuse_scales(
        SpatialHeatMap(np.full((2, 2), 0.2), 32, 32, upsampled=np.full((4, 4), 0.2)),
        SpatialHeatMap(np.full((2, 2), 0.6), 32, 32, upsampled=np.full((4, 4), 0.6)),
        0.5,
    )
    assert np.allclose(fused.upsampled, 0.4, atol=1e-12)
    with pytest.raises(DataError, match="upsampled"):
        fuse_scales(SpatialHeatMap(np.zeros((2, 2)), 32, 32), a, 0.5)
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        fuse_scales(a, b, 1.5)


def test_extract_boxes_empty_and_solid():
    empty = SpatialHeatMap(np.zeros((10, 10)), 32, 32, upsampled=np.zeros((10, 10)))
    assert extract_boxes(empty, 0.6) == []
    solid = np.zeros((12, 12))
    solid[3:7, 2:9] = 1.0
    heat = SpatialHeatMap(solid, 32, 32, upsampled=solid)
    boxes = extract_boxes(heat, 0.6)
    assert len(boxes) == 1
    assert boxes[0].as_tuple() == (2, 3, 7, 4)
    assert boxes[0].confidence == 1.0


def test_extract_boxes_two_blobs_match_oracle():
    heat = np.zeros((9, 9))
    heat[1:3, 1:3] = 0.9
    heat[6:8, 5:9] = 0.8
    hm = SpatialHeatMap(heat, 32, 32, upsampled=heat)
    boxes = extract_boxes(hm, 0.5)
    oracle = connected_components_oracle(heat > 0.5)
    assert len(boxes) == len(oracle) == 2
    got = sorted(b.as_tuple() for b in boxes)
    want = sorted(o[:4] for o in oracle)
    assert got == want


def test_extract_boxes_matches_oracle_on_random_masks():
    rng = np.random.default_rng(6)
    for _ in range(10):
        size = int(rng.integers(4, 65))
        heat = (rng.uniform(0, 1, (size, size)) > 0.7).astype(float)
        hm = SpatialHeatMap(heat, 32, 32, upsampled=heat)
        boxes = extract_boxes(hm, 0.5)
        oracle = connected_components_oracle(heat > 0.5)
        assert sorted(b.as_tuple() for b in boxes) == sorted(o[:4] for o in oracle)
        # the area floor must count component pixels, never bbox or intruders
        floor = 3
        kept = {b.as_tuple() for b in extract_boxes(hm, 0.5, min_area=floor)}
        expected = {o[:4] for o in oracle if o[4] >= floor}
        assert kept == expected


def test_extract_boxes_ignores_intruding_component_pixels():
    # the hook-shaped component's bbox contains the bright lone pixel; its
    # area and confidence must come from its own pixels only
    heat = np.array([
        [0.7, 0.7, 0.7],
        [0.7, 0.0, 0.0],
        [0.7, 0.0, 0.9],
    ])
    hm = SpatialHeatMap(heat, 32, 32, upsampled=heat)
    boxes = {b.as_tuple(): b for b in extract_boxes(hm, 0.5)}
    assert set(boxes) == {(0, 0, 3, 3), (2, 2, 1, 1)}
    assert boxes[(0, 0, 3, 3)].confidence == 0.7
    assert boxes[(2, 2, 1, 1)].confidence == 0.9
    # floor of 2 keeps only the 5-pixel hook, not the lone pixel
    kept = extract_boxes(hm, 0.5, min_area=2)
    assert [b.as_tuple() for b in kept] == [(0, 0, 3, 3)]


def test_extract_boxes_min_area_floor():
    heat = np.zeros((8, 8))
    heat[0, 0] = 1.0  # single pixel
    heat[4:6, 4:6] = 1.0  # 4-pixel blob
    hm = SpatialHeatMap(heat, 32, 32, upsampled=heat)
    assert len(extract_boxes(hm, 0.5, min_area=1)) == 2
    kept = extract_boxes(hm, 0.5, min_area=2)
    assert len(kept) == 1
    assert kept[0].as_tuple() == (4, 4, 2, 2)


def test_extract_boxes_threshold_validated():
    hm = SpatialHeatMap(np.zeros((2, 2)), 32, 32, upsampled=np.zeros((2, 2)))
    with pytest.raises(DataError, match="threshold"):
        extract_boxes(hm, 0.0)


def test_pool_grid_uniform_field_is_fixed_point():
    rng = np.random.default_rng(7)
    row = rng.standard_normal(5)
    native = PatchGrid(np.tile(row, (7, 7, 1)), 32, 32)
    pooled = pool_grid(native, 80, 48, (224, 224))
    assert pooled.features.shape == (4, 4, 5)
    assert np.allclose(pooled.features, row, atol=1e-9)


def test_localize_video_zero_noise_hits_planted_block(tiny_dataset):
    queries = QuerySet(tiny_dataset.background_prototypes, tiny_dataset.class_prototypes, [], [])
    video = next(v for v in tiny_dataset.test if v.label.y_b == 1)
    cfg = LocalizeConfig(scales=((44, 44),))  # 224/5 native cells: floor((224-44)/44)+1 = 5
    located = localize_video(
        video.stream.patch_feats.astype(np.float64), queries, (224, 224), cfg, None
    )
    assert len(located) == video.stream.length
    flagged = set(np.flatnonzero(video.gt.frame_flags).tolist())
    for frame in located:
        heat = frame.heat.upsampled
        assert heat.min() >= 0.0 and heat.max() <= 1.0
        if frame.frame in flagged:
            assert frame.boxes, f"no box on planted frame {frame.frame}"
        else:
            assert not frame.boxes, f"spurious box on normal frame {frame.frame}"


def test_zero_noise_heat_separates_planted_block():
    from stvad.feature_io import SynthConfig, generate_synthetic

    data = generate_synthetic(
        SynthConfig(train_videos=2, test_videos=4, t_range=(10, 12), d=12, h=7, w=7, c=2,
                    extent_range=(2, 3), span_range=(4, 6), noise_scale=0.0, seed=17)
    )
    queries = QuerySet(data.background_prototypes, data.class_prototypes, [], [])
    video = next(v for v in data.test if v.label.y_b == 1)
    frame = int(np.flatnonzero(video.gt.frame_flags)[0])
    x, y, w, h = video.gt.boxes[frame][0]
    cell = 224 / 7
    h0, w0, eh, ew = int(y / cell), int(x / cell), int(h / cell), int(w / cell)
    grid = PatchGrid(video.stream.patch_feats[frame].astype(np.float64), 32, 32)
    heat = retrieve(grid, queries, 0.07).values
    block = np.zeros((7, 7), dtype=bool)
    block[h0 : h0 + eh, w0 : w0 + ew] = True
    assert heat[block].min() - heat[~block].max() > 0.5


def test_localize_video_trigger_filters_frames(tiny_dataset):
    queries = QuerySet(tiny_dataset.background_prototypes, tiny_dataset.class_prototypes, [], [])
    video = tiny_dataset.test[0]
    t = video.stream.length
    scores = np.zeros(t)
    scores[2] = 0.9
    cfg = LocalizeConfig(scales=((44, 44),))
    located = localize_video(video.stream.patch_feats.astype(np.float64), queries, (224, 224), cfg, scores)
    assert [f.frame for f in located] == [2]


def test_localize_rejects_grid_mismatch(tiny_dataset):
    queries = QuerySet(tiny_dataset.background_prototypes, tiny_dataset.class_prototypes, [], [])
    video = tiny_dataset.test[0]
    cfg = LocalizeConfig(scales=((32, 32),))  # 7x7 expected but the tiny set is 5x5
    with pytest.raises(DataError, match="native grid"):
        localize_video(video.stream.patch_feats.astype(np.float64), queries, (224, 224), cfg, None)


def test_min_area_px_default_is_one_cell():
    cfg = LocalizeConfig()
    assert cfg.min_area_px((224, 224), (7, 7)) == 1024


def test_save_heatmap_png(tmp_path):
    rng = np.random.default_rng(8)
    heat = upsample(SpatialHeatMap(rng.uniform(0, 1, (4, 4)), 56, 56), (224, 224))
    path = tmp_path / "h.png"
    save_heatmap_png(heat, path)
    from PIL import Image

    img = Image.open(path)
    assert img.size == (224, 224)
    assert img.mode == "L"
