import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpsams.patching import (
    BACKGROUND,
    LESION,
    MaskFill,
    MaskPlan,
    PatchError,
    PatchGrid,
    PatchSet,
    apply_mask,
    patchify,
    unpatchify,
)


def plan_for(order, n, grid, labels=None):
    labels = labels or (BACKGROUND,) * len(order)
    return MaskPlan(np.array(order), tuple(labels), n=n, grid=grid)


def test_patchify_2x2_enumeration():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    ps = patchify(img, 1)
    assert ps.grid.N == 4
    assert ps.patches.tolist() == [[1.0], [2.0], [3.0], [4.0]]


def test_patchify_224_gives_196_patches():
    ps = patchify(np.zeros((1, 224, 224)), 16)
    assert ps.grid.N == 196
    assert ps.patches.shape == (196, 256)


def test_patch_vector_is_channel_major_then_row_major():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    first = patchify(img, 2).patches[0]
    assert first.tolist() == [0, 1, 4, 5, 16, 17, 20, 21]


@settings(max_examples=50, deadline=None)
@given(
    c=st.integers(1, 3),
    rows=st.integers(1, 5),
    cols=st.integers(1, 5),
    p=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_is_bitwise_identity(c, rows, cols, p, seed):
    img = np.random.default_rng(seed).random((c, rows * p, cols * p))
    back = unpatchify(patchify(img, p))
    assert back.dtype == img.dtype
    assert np.array_equal(back, img)


def test_unpatchify_enumeration():
    grid = PatchGrid(patch_size=1, rows=2, cols=2)
    img = unpatchify(PatchSet(grid, np.array([[10.0], [20.0], [30.0], [40.0]])))
    assert img[0].tolist() == [[10.0, 20.0], [30.0, 40.0]]


def test_unpatchify_rejects_wrong_count():
    grid = PatchGrid(patch_size=1, rows=2, cols=2)
    with pytest.raises(PatchError):
        PatchSet(grid, np.zeros((3, 1)))


@pytest.mark.parametrize("shape, axis", [((1, 30, 32), "height"), ((1, 32, 30), "width")])
def test_non_divisible_names_axis(shape, axis):
    with pytest.raises(PatchError, match=axis):
        patchify(np.zeros(shape), 8)


def test_apply_mask_n0_is_identity(rng):
    img = rng.random((1, 8, 8))
    grid = PatchGrid.for_image(img.shape, 4)
    assert np.array_equal(apply_mask(img, plan_for([0, 1, 2, 3], 0, grid)), img)


def test_apply_mask_full_mask_zeroes_everything(rng):
    img = rng.random((1, 8, 8))
    grid = PatchGrid.for_image(img.shape, 4)
    assert not apply_mask(img, plan_for([0, 1, 2, 3], 4, grid), MaskFill("constant", 0.0)).any()


def test_apply_mask_bottom_right_only():
    img = np.ones((1, 4, 4))
    grid = PatchGrid.for_image(img.shape, 2)
    out = apply_mask(img, plan_for([3, 0, 1, 2], 1, grid), 0.0)
    expected = np.ones((1, 4, 4))
    expected[:, 2:, 2:] = 0
    assert np.array_equal(out, expected)


def test_apply_mask_token_fill_broadcasts_scalar(rng):
    img = rng.random((2, 4, 4))
    grid = PatchGrid.for_image(img.shape, 2)
    out = apply_mask(img, plan_for([1, 0, 2, 3], 1, grid), MaskFill("token", 0.37))
    assert np.all(out[:, :2, 2:] == 0.37)


def test_apply_mask_grid_mismatch(rng):
    grid = PatchGrid.for_image((1, 8, 8), 4)
    with pytest.raises(PatchError):
        apply_mask(rng.random((1, 12, 12)), plan_for([0, 1, 2, 3], 1, grid))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(0, 16))
def test_apply_mask_changes_only_masked_pixels(seed, n):
    rng = np.random.default_rng(seed)
    img = rng.random((1, 16, 16)) + 1.0  # strictly away from the fill value
    grid = PatchGrid.for_image(img.shape, 4)
    plan = plan_for(rng.permutation(16), n, grid)
    out = apply_mask(img, plan, 0.0)
    changed = out != img
    patch_changed = patchify(changed.astype(float), 4).patches.any(axis=1)
    assert set(np.flatnonzero(patch_changed)) == set(plan.masked.tolist())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), N=st.integers(2, 40), data=st.data())
def test_masked_and_visible_partition(seed, N, data):
    n = data.draw(st.integers(0, N))
    order = np.random.default_rng(seed).permutation(N)
    plan = MaskPlan(order, (BACKGROUND,) * N, n=n)
    masked, visible = set(plan.masked.tolist()), set(plan.visible.tolist())
    assert not masked & visible
    assert masked | visible == set(range(N))
    assert len(masked) == n


def test_plan_rejects_lesion_after_background():
    with pytest.raises(PatchError):
        MaskPlan(np.array([0, 1]), (BACKGROUND, LESION))


def test_plan_rejects_non_permutation():
    with pytest.raises(PatchError):
        MaskPlan(np.array([0, 0]), (BACKGROUND, BACKGROUND))
