import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from facelora.data import (
    RANDAUG_OPS,
    DatasetManifest,
    DepthMode,
    Normalization,
    Pair,
    Record,
    SubsetSpec,
    count_possible_pairs,
    generate_synthetic_dataset,
    identity_order,
    load_image,
    make_pairs,
    preprocess,
    rand_augment,
    read_manifest,
    read_pairs,
    subset,
    write_manifest,
    write_pairs,
)


def _manifest(counts, groups=None):
    recs = []
    for i, c in enumerate(counts):
        for k in range(c):
            recs.append(Record(f"id{i}/{k}.png", f"id{i}", None if groups is None else groups[i]))
    return DatasetManifest(tuple(recs))


# -- files -----------------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    m = _manifest([2, 3], groups=["a", "b"])
    back = read_manifest(write_manifest(m, tmp_path / "m.csv"))
    assert back == m and back.root == tmp_path
    assert back.resolve("id0/0.png") == tmp_path / "id0/0.png"


def test_manifest_without_groups_and_odd_paths(tmp_path):
    m = DatasetManifest((Record("a,b/c d.png", "x"), Record("e.png", "y")))
    path = write_manifest(m, tmp_path / "m.csv")
    assert path.read_text().splitlines()[0] == "path,identity"
    assert read_manifest(path) == m


def test_manifest_errors_name_the_line(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("path,identity\na.png,x\nb.png\n")
    with pytest.raises(ValueError, match=":3:"):
        read_manifest(bad)
    bad.write_text("file,who\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(bad)


def test_pairs_roundtrip_and_errors(tmp_path):
    pairs = [Pair("a.png", "b.png", True, 0), Pair("a.png", "c.png", False, 9)]
    assert read_pairs(write_pairs(pairs, tmp_path / "p.csv")) == pairs
    (tmp_path / "q.csv").write_text("pathA,pathB,label\na,b,maybe\n")
    with pytest.raises(ValueError, match="genuine"):
        read_pairs(tmp_path / "q.csv")


def test_class_index_is_sorted_and_contiguous():
    m = DatasetManifest((Record("1", "zed"), Record("2", "amy"), Record("3", "zed")))
    assert m.identities == ("amy", "zed")
    assert m.labels().tolist() == [1, 0, 1]


# -- subsets -----------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=15), st.integers(0, 1000), st.data())
def test_subsets_are_nested(counts, seed, data):
    m = _manifest(counts)
    n1 = data.draw(st.integers(1, len(counts)))
    n2 = data.draw(st.integers(n1, len(counts)))
    for mode in DepthMode:
        small = subset(m, SubsetSpec(n1, mode, seed))
        big = subset(m, SubsetSpec(n2, mode, seed))
        assert set(small.identities) <= set(big.identities)
        assert len(small.identities) == n1
        # every image of a kept identity is kept
        assert len(small) == sum(len(m.by_identity[i]) for i in small.identities)


def test_top_by_image_count_order():
    m = _manifest([2, 5, 5, 1])
    assert identity_order(m, SubsetSpec(1, DepthMode.TOP_BY_IMAGE_COUNT)) == ["id1", "id2", "id0", "id3"]
    assert subset(m, SubsetSpec(2, "top_by_image_count")).identities == ("id1", "id2")


def test_subset_width_errors():
    with pytest.raises(ValueError, match="exceeds"):
        subset(_manifest([1, 1]), SubsetSpec(3))
    with pytest.raises(ValueError, match="positive"):
        SubsetSpec(0)


# -- synthetic data ----------------------------------------------------------------


def test_synthetic_is_deterministic_and_well_formed():
    a = generate_synthetic_dataset(3, 4, 28, seed=5)
    b = generate_synthetic_dataset(3, 4, 28, seed=5)
    assert a.manifest == b.manifest
    assert all(np.array_equal(a.images[p], b.images[p]) for p in a.images)
    img = a.images["id0000/000.png"]
    assert img.shape == (28, 28, 3) and img.dtype == np.uint8
    assert [r.group for r in a.manifest.records[::4]] == ["g0", "g1", "g2"]
    c = generate_synthetic_dataset(3, 4, 28, seed=6)
    assert not np.array_equal(a.images["id0000/000.png"], c.images["id0000/000.png"])


def test_synthetic_offsets_give_new_identities_from_the_same_space():
    a = generate_synthetic_dataset(2, 2, 16, seed=1)
    b = generate_synthetic_dataset(2, 2, 16, seed=1, identity_offset=2)
    both = generate_synthetic_dataset(4, 2, 16, seed=1)
    assert b.manifest.identities == ("id0002", "id0003")
    for p, img in {**a.images, **b.images}.items():
        assert np.array_equal(both.images[p], img)


def test_synthetic_identity_signal():
    # same-identity images sit closer in pixel space than different identities
    ds = generate_synthetic_dataset(6, 6, 28, seed=2, colour_cast=0.0, brightness=0.0)
    x = {p: im.astype(float).ravel() for p, im in ds.images.items()}
    within, across = [], []
    for i, recs in enumerate(ds.manifest.by_identity.values()):
        within.append(np.linalg.norm(x[recs[0].path] - x[recs[1].path]))
        other = list(ds.manifest.by_identity.values())[(i + 1) % 6]
        across.append(np.linalg.norm(x[recs[0].path] - x[other[0].path]))
    assert np.mean(within) < np.mean(across)


def test_write_and_reload(tmp_path):
    ds = generate_synthetic_dataset(2, 2, 16, seed=0)
    m = ds.write(tmp_path)
    disk = read_manifest(tmp_path / "manifest.csv")
    assert disk == m
    assert np.array_equal(load_image(disk.resolve("id0001/001.png")), ds.images["id0001/001.png"])


# -- pairs -------------------------------------------------------------------------


def test_make_pairs_balanced_and_labelled_correctly():
    m = _manifest([3, 3, 3, 3])
    ident = {r.path: r.identity for r in m.records}
    pairs = make_pairs(m, n_per_fold=7, n_folds=10, seed=0)
    assert len(pairs) == 140
    for fold in range(10):
        fp = [p for p in pairs if p.fold == fold]
        assert sum(p.genuine for p in fp) == 7 and len(fp) == 14
    for p in pairs:
        assert p.path_a != p.path_b
        assert (ident[p.path_a] == ident[p.path_b]) == p.genuine
    assert pairs == make_pairs(m, n_per_fold=7, n_folds=10, seed=0)


def test_make_pairs_within_group():
    m = _manifest([2] * 6, groups=["a", "b", "c"] * 2)
    group = {r.path: r.group for r in m.records}
    pairs = make_pairs(m, 5, 10, seed=3, within_group=True)
    assert all(group[p.path_a] == group[p.path_b] for p in pairs)
    with pytest.raises(ValueError, match="group"):
        make_pairs(_manifest([2, 2]), within_group=True)


def test_make_pairs_needs_two_identities():
    with pytest.raises(ValueError):
        make_pairs(_manifest([5]))


def test_count_possible_pairs_brute_force():
    m = _manifest([1, 3, 4])
    ident = [r.identity for r in m.records]
    n = len(ident)
    gen = sum(ident[i] == ident[j] for i in range(n) for j in range(i + 1, n))
    assert count_possible_pairs(m) == (gen, n * (n - 1) // 2 - gen)


# -- preprocessing -----------------------------------------------------------------


def _img(seed=0, size=20):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def test_eval_preprocess_is_deterministic_and_normalized():
    img = _img()
    out = preprocess(img, 20)
    assert out.dtype == np.float32 and out.shape == (20, 20, 3)
    np.testing.assert_allclose(out, (img / 255.0 - 0.5) / 0.5, atol=1e-6)
    assert np.array_equal(out, preprocess(img, 20, seed=123))
    assert preprocess(img, 10).shape == (10, 10, 3)


def test_custom_normalization():
    img = np.full((4, 4, 3), 255, np.uint8)
    out = preprocess(img, 4, norm=Normalization((1.0, 0.0, 0.5), (1.0, 1.0, 0.25)))
    np.testing.assert_allclose(out[0, 0], [0.0, 1.0, 2.0])


def test_train_preprocess_seeded():
    img = _img(1)
    a = preprocess(img, 20, train_mode=True, seed=[0, 1, 2])
    assert np.array_equal(a, preprocess(img, 20, train_mode=True, seed=[0, 1, 2]))
    assert any(not np.array_equal(a, preprocess(img, 20, train_mode=True, seed=[0, 1, s])) for s in range(3, 8))


def test_flip_only():
    img = _img(2)
    out = preprocess(img, 20, train_mode=True, seed=0, flip_p=1.0, randaug=None)
    np.testing.assert_allclose(out, preprocess(img[:, ::-1].copy(), 20), atol=1e-6)


def test_grayscale_is_expanded_and_bad_dtype_rejected():
    assert preprocess(np.zeros((8, 8), np.uint8), 8).shape == (8, 8, 3)
    with pytest.raises(ValueError, match="uint8"):
        preprocess(np.zeros((8, 8, 3)), 8)


@pytest.mark.parametrize("name", sorted(RANDAUG_OPS))
def test_every_randaug_op_keeps_size(name):
    im = Image.fromarray(_img(3, 32))
    out = RANDAUG_OPS[name](im, 30, np.random.default_rng(0))
    assert out.size == im.size and out.mode == "RGB"


def test_rand_augment_seeded():
    im = Image.fromarray(_img(4, 32))
    a = np.asarray(rand_augment(im, np.random.default_rng(9)))
    b = np.asarray(rand_augment(im, np.random.default_rng(9)))
    assert np.array_equal(a, b)


def test_undecodable_image(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ValueError, match="decode"):
        load_image(bad)
