import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featcraft.pii import emd_exact
from featcraft.synthdata import generate_dataset, load_split, normalize_to_reference, save_split, split_dataset


def test_generation_is_deterministic():
    a = generate_dataset(4, 3, (8, 8), seed=5)
    b = generate_dataset(4, 3, (8, 8), seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.attrs, b.attrs)


def test_images_in_unit_range_and_shaped():
    d = generate_dataset(3, 4, (10, 12), seed=0)
    assert d.images.shape == (12, 10, 12)
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert d.flat.shape == (12, 120)


def test_same_identity_more_correlated():
    d = generate_dataset(12, 6, (16, 16), seed=3)
    c = np.corrcoef(d.flat)
    same = d.ids[:, None] == d.ids[None, :]
    off = ~np.eye(len(d.ids), dtype=bool)
    assert c[same & off].mean() > c[~same].mean()


def test_two_identities_have_both_attribute_classes():
    d = generate_dataset(2, 4, seed=0)
    assert set(d.attrs[:, 0].tolist()) == {0, 1}


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_dataset(1, 3)
    with pytest.raises(ValueError):
        generate_dataset(3, 0)
    with pytest.raises(ValueError):
        generate_dataset(3, 3, (2, 2))


def test_split_counts_and_disjointness():
    d = generate_dataset(10, 6, (8, 8), seed=1)
    sp = split_dataset(d, 0.5, (2, 1), seed=0)
    assert len(set(sp.x_pub.ids)) == 5
    pvt = set(sp.x_train.ids) | set(sp.x_test.ids)
    assert len(pvt) == 5 and not pvt & set(sp.x_pub.ids)
    for i in pvt:
        assert (sp.x_train.ids == i).sum() == 4
        assert (sp.x_test.ids == i).sum() == 2


def test_split_deterministic():
    d = generate_dataset(10, 6, (8, 8), seed=1)
    a, b = split_dataset(d, 0.5, seed=9), split_dataset(d, 0.5, seed=9)
    assert np.array_equal(a.x_test.images, b.x_test.images)
    assert np.array_equal(a.x_pub.ids, b.x_pub.ids)


def test_split_rejects_empty_side():
    d = generate_dataset(4, 6, (8, 8))
    with pytest.raises(ValueError):
        split_dataset(d, 1.0)
    with pytest.raises(ValueError):
        split_dataset(generate_dataset(4, 1, (8, 8)), 0.5)


def test_normalize_identity():
    x = np.random.default_rng(0).uniform(size=(5, 4, 4))
    np.testing.assert_allclose(normalize_to_reference(x, x), x, atol=1e-12)


def test_normalize_affine_law():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 16))
    x = (x - x.mean()) / x.std()
    ref = 0.5 + 0.5 * rng.standard_normal((300, 16))
    ref = (ref - ref.mean()) / ref.std() * 0.5 + 0.5
    out = normalize_to_reference(x, ref)
    assert out.mean() == pytest.approx(0.5, abs=1e-12)
    assert out.std() == pytest.approx(0.5, abs=1e-12)


def test_normalize_rejects_constant():
    with pytest.raises(ValueError):
        normalize_to_reference(np.ones((3, 4)), np.random.default_rng(0).uniform(size=(3, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.floats(-2.0, 2.0))
def test_normalize_moves_pixel_marginal_closer(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(64) * scale + shift
    ref = rng.uniform(size=64)
    out = normalize_to_reference(x, ref)
    # 1-D EMD between pixel marginals (sorted matching is optimal in 1-D)
    before = emd_exact(np.sort(x)[:, None], np.sort(ref)[:, None])
    after = emd_exact(np.sort(out)[:, None], np.sort(ref)[:, None])
    assert after <= before + 1e-12


def test_split_file_round_trip(tmp_path):
    d = generate_dataset(3, 2, (6, 7), seed=2)
    save_split(tmp_path / "a.split", d)
    back = load_split(tmp_path / "a.split")
    assert back.images.tobytes() == d.images.tobytes()
    assert np.array_equal(back.ids, d.ids) and np.array_equal(back.attrs, d.attrs)
