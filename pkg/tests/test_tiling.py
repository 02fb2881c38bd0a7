import numpy as np
import pytest

from resunet import data, model, tiling
from resunet.tiling import plan_tiles, stitch


@pytest.fixture(scope="module")
def store():
    return model.init_params(0, width_scale=0.125)


def oracle_stitch(tiles, origins, h, w, t):
    """Sum of zero-padded full-size canvases, divided by the summed indicator canvases."""
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for tile, (x, y) in zip(tiles, origins):
        pad = ((y, h - y - t), (x, w - x - t))
        total = total + np.pad(np.asarray(tile, np.float64).reshape(t, t), pad)
        count = count + np.pad(np.ones((t, t)), pad)
    return (total / count).astype(np.float32)


# ------------------------------------------------------------------------ plan


def test_single_tile_plan():
    g = plan_tiles(224, 224)
    assert g.origins == [(0, 0)] and len(g) == 1


def test_clamped_last_origin():
    g = plan_tiles(224, 434, overlap=14)
    assert g.xs == (0, 210) and g.ys == (0,)
    assert plan_tiles(224, 448).xs == (0, 210, 224)


def test_full_size_plan_has_64_tiles():
    g = plan_tiles(1500, 1500, overlap=14)
    assert g.xs == g.ys == (0, 210, 420, 630, 840, 1050, 1260, 1276)
    assert len(g) == 64


def test_origins_row_major():
    g = plan_tiles(448, 434)
    assert g.origins == [(0, 0), (210, 0), (0, 210), (210, 210), (0, 224), (210, 224)]


@pytest.mark.parametrize("o", [0, 14, 50, 100, 111])
@pytest.mark.parametrize("ny,nx", [(1, 1), (2, 3), (4, 4)])
def test_coverage_exact_fit_grid(o, ny, nx):
    stride = 224 - o
    cov = plan_tiles(224 + (ny - 1) * stride, 224 + (nx - 1) * stride, overlap=o).coverage()
    assert cov.min() >= 1
    assert set(np.unique(cov)) <= {1, 2, 4}


@pytest.mark.parametrize("h,w", [(1500, 1500), (500, 300), (451, 700)])
def test_coverage_default_overlap(h, w):
    cov = plan_tiles(h, w).coverage()
    assert cov.min() >= 1
    assert set(np.unique(cov)) <= {1, 2, 4}


def test_clamped_tile_can_triple_cover():
    # The edge clamp may overlap two earlier tiles when o is large.
    assert plan_tiles(224, 1500, overlap=100).coverage().max() == 3


def test_plan_errors():
    with pytest.raises(ValueError, match="smaller"):
        plan_tiles(223, 500)
    with pytest.raises(ValueError, match="overlap"):
        plan_tiles(500, 500, overlap=224)
    with pytest.raises(ValueError, match="overlap"):
        plan_tiles(500, 500, overlap=-1)


# ---------------------------------------------------------------------- stitch


def test_stitch_single_tile_is_identity():
    tile = np.random.default_rng(0).uniform(0, 1, (1, 224, 224)).astype(np.float32)
    out = stitch([tile], plan_tiles(224, 224)).probs
    assert out.shape == (1, 1, 224, 224)
    np.testing.assert_array_equal(out[0], tile)


def test_stitch_two_tile_mean():
    grid = plan_tiles(224, 434)
    out = stitch([np.full((224, 224), 0.2), np.full((224, 224), 0.6)], grid).probs[0, 0]
    assert np.all(out[:, :210] == np.float32(0.2))
    np.testing.assert_allclose(out[:, 210:224], 0.4, rtol=0, atol=1e-7)
    assert np.all(out[:, 224:] == np.float32(0.6))


@pytest.mark.parametrize("seed", range(2))
def test_stitch_matches_oracle_full_size(seed):
    grid = plan_tiles(1500, 1500, overlap=14)
    rng = np.random.default_rng(seed)
    tiles = [rng.uniform(0, 1, (1, 224, 224)).astype(np.float32) for _ in range(len(grid))]
    out = stitch(tiles, grid).probs[0, 0]
    np.testing.assert_array_equal(out, oracle_stitch(tiles, grid.origins, 1500, 1500, 224))


def test_stitch_permutation_invariant():
    grid = plan_tiles(700, 451, overlap=50)
    rng = np.random.default_rng(5)
    tiles = {o: rng.uniform(0, 1, (224, 224)).astype(np.float32) for o in grid.origins}
    ref = stitch([tiles[o] for o in grid.origins], grid).probs
    for perm_seed in range(3):
        order = np.random.default_rng(perm_seed).permutation(len(grid))
        shuffled = {grid.origins[i]: tiles[grid.origins[i]] for i in order}
        np.testing.assert_array_equal(stitch(shuffled, grid).probs, ref)


def test_stitch_errors():
    grid = plan_tiles(224, 434)
    with pytest.raises(ValueError, match="2"):
        stitch([np.zeros((224, 224))], grid)
    with pytest.raises(ValueError, match="shape"):
        stitch([np.zeros((224, 224)), np.zeros((200, 224))], grid)
    with pytest.raises(ValueError, match="origins"):
        stitch({(0, 0): np.zeros((224, 224)), (5, 0): np.zeros((224, 224))}, grid)


def test_binarize_convention():
    m = tiling.SegmentationMap(np.array([[[[0.49, 0.5, 0.51]]]], np.float32)).binarize(0.5)
    np.testing.assert_array_equal(m.binary[0, 0, 0], [0, 1, 1])
    assert m.threshold == 0.5


# ------------------------------------------------------------------- inference


def test_single_tile_prediction_equals_forward(store):
    img = data.generate_synthetic_scene(data.SceneSpec(224, 224), seed=1).image
    np.testing.assert_array_equal(tiling.predict_image(img, store).probs, model.forward(img, store))


def test_zeroed_head_gives_one_half(store):
    s = store.copy()
    s.params["conv15.kernel"][:] = 0
    img = data.generate_synthetic_scene(data.SceneSpec(300, 240), seed=2).image
    out = tiling.predict_image(img, s, threshold=0.5)
    assert out.probs.shape == (1, 1, 300, 240)
    assert np.all(out.probs == 0.5)
    assert np.all(out.binary == 1)


def test_batch_size_does_not_change_output(store):
    img = data.generate_synthetic_scene(data.SceneSpec(448, 448), seed=3).image
    a = tiling.predict_image(img, store, batch_size=1).probs
    b = tiling.predict_image(img, store, batch_size=4).probs
    np.testing.assert_array_equal(a, b)


def test_translation_by_one_stride(store):
    # A and B are two 434-wide windows of one scene, offset by the tile stride (210).
    # Columns that a single, identical tile covers in both must agree exactly.
    scene = data.generate_synthetic_scene(data.SceneSpec(224, 644), seed=4).image
    a = tiling.predict_image(scene[..., 0:434], store).probs[0, 0]
    b = tiling.predict_image(scene[..., 210:644], store).probs[0, 0]
    np.testing.assert_array_equal(a[:, 224:420], b[:, 14:210])


def test_predict_rejects_batches(store):
    with pytest.raises(ValueError, match="single image"):
        tiling.predict_image(np.zeros((2, 3, 224, 224), np.float32), store)
