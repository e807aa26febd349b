import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfield.phantom import (
    BundleError,
    PhantomError,
    PhantomSpec,
    Subject,
    corrupt_shapes,
    generate_phantom,
    load_subject,
    save_subject,
    split_dataset,
)
from segfield.volume import GridDims

SMALL = PhantomSpec(seed=0, dims=GridDims(32, 32, 32))


@pytest.fixture(scope="module")
def subject():
    return generate_phantom(SMALL)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, num_lobes=0)
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, num_lobes=5, segments_per_lobe=4)  # 20 segments
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, branch_radius=0.5)
    PhantomSpec(seed=0, num_lobes=6, segments_per_lobe=3)  # 18 is the cap


def test_deterministic_regeneration(subject):
    again = generate_phantom(SMALL)
    for name, vol in subject.volumes().items():
        assert np.array_equal(vol.data, getattr(again, name).data), name


def test_seed_changes_output(subject):
    other = generate_phantom(PhantomSpec(seed=1, dims=GridDims(32, 32, 32)))
    assert not np.array_equal(subject.segments.data, other.segments.data)


def test_segment_support_equals_lobe_support(subject):
    assert np.array_equal(subject.segments.data > 0, subject.lobes.data > 0)


def test_segments_nest_in_lobes(subject):
    seg = subject.segments.data
    lob = subject.lobes.data
    fg = seg > 0
    seg_lobe = (seg[fg].astype(int) - 1) // SMALL.segments_per_lobe + 1
    assert np.array_equal(seg_lobe, lob[fg])


def test_all_segment_classes_present(subject):
    present = set(np.unique(subject.segments.data))
    assert present == set(range(SMALL.num_classes))


def test_trees_contained_in_own_segment(subject):
    seg = subject.segments.data
    for name in ("bronchi", "artery"):
        tree = getattr(subject, name).data
        m = tree > 0
        assert m.any(), name
        assert np.array_equal(tree[m], seg[m]), name


def test_ground_truth_has_zero_intrusions(subject):
    from segfield.metrics import intrusion_branches

    for name in ("bronchi", "artery"):
        for cls in range(1, SMALL.num_classes):
            assert intrusion_branches(getattr(subject, name), subject.segments, cls) == []


def test_isv_lies_on_vein_and_boundary(subject):
    isv = subject.isv.data.astype(bool)
    assert isv.any()
    assert not (isv & (subject.vein.data == 0)).any()
    # Every intersegmental voxel touches a different segment of the same
    # lobe across one of its six faces.
    seg = subject.segments.data
    lob = subject.lobes.data
    zz, yy, xx = np.nonzero(isv)
    for z, y, x in zip(zz, yy, xx):
        own = seg[z, y, x]
        found = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < seg.shape[0] and 0 <= ny < seg.shape[1] and 0 <= nx < seg.shape[2]):
                continue
            if seg[nz, ny, nx] > 0 and seg[nz, ny, nx] != own and lob[nz, ny, nx] == lob[z, y, x]:
                found = True
                break
        assert found, (x, y, z)


def test_single_segment_per_lobe_collapses_to_lobes():
    s = generate_phantom(PhantomSpec(seed=3, dims=GridDims(32, 32, 32), segments_per_lobe=1, num_lobes=3))
    assert np.array_equal(s.segments.data, s.lobes.data)


def test_image_statistics(subject):
    img = subject.image.data
    assert img.dtype == np.float32
    lung = subject.lobes.data > 0
    assert img[lung].mean() > img[~lung].mean() + 0.2
    vessels = (subject.artery.data > 0) | (subject.vein.data > 0)
    assert img[vessels].mean() > img[lung].mean()
    # vessels overwrite the few overlapping tube voxels, so score pure bronchi
    bronchi = (subject.bronchi.data > 0) & ~vessels
    assert img[bronchi].mean() < img[lung & ~bronchi & ~vessels].mean()


def test_infeasible_dims_raise():
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(seed=0, dims=GridDims(8, 8, 8)))


def test_generation_failure_leaves_nothing(tmp_path):
    # error path must raise before any bundle write could happen
    spec = PhantomSpec(seed=0, dims=GridDims(8, 8, 8))
    with pytest.raises(PhantomError):
        generate_phantom(spec)


# ---------------------------------------------------------------- corruption


def test_corrupt_zero_rate_is_identity(subject):
    c = corrupt_shapes(subject, 0.0)
    for name in ("bronchi", "artery", "vein"):
        assert np.array_equal(getattr(c, name).data, getattr(subject, name).data)


def test_corrupt_changes_only_trees(subject):
    c = corrupt_shapes(subject, 0.4)
    assert np.array_equal(c.segments.data, subject.segments.data)
    assert np.array_equal(c.lobes.data, subject.lobes.data)
    assert np.array_equal(c.image.data, subject.image.data)
    changed = sum(
        int((getattr(c, n).data != getattr(subject, n).data).sum()) for n in ("bronchi", "artery", "vein")
    )
    assert changed > 0


def test_corrupt_deterministic(subject):
    a = corrupt_shapes(subject, 0.3)
    b = corrupt_shapes(subject, 0.3)
    for name in ("bronchi", "artery", "vein"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    other = corrupt_shapes(subject, 0.3, salt=1)
    assert any(
        not np.array_equal(getattr(a, n).data, getattr(other, n).data) for n in ("bronchi", "artery", "vein")
    )


def test_corrupt_keeps_every_class(subject):
    c = corrupt_shapes(subject, 0.9)
    for name in ("bronchi", "artery", "vein"):
        before = set(np.unique(getattr(subject, name).data))
        after = set(np.unique(getattr(c, name).data))
        assert before <= after | {0}
        assert before == after  # no class vanishes, none invented


def test_corrupt_preserves_isv_support(subject):
    c = corrupt_shapes(subject, 0.9)
    assert not (c.isv.data.astype(bool) & (c.vein.data == 0)).any()


def test_corrupt_can_cross_segments(subject):
    # with a high flip rate some tree voxel should escape its segment
    c = corrupt_shapes(subject, 0.8)
    seg = subject.segments.data
    crossed = 0
    for name in ("bronchi", "artery"):
        tree = getattr(c, name).data
        m = tree > 0
        crossed += int((tree[m] != seg[m]).sum())
    assert crossed > 0


def test_corrupt_rejects_bad_rate(subject):
    with pytest.raises(ValueError):
        corrupt_shapes(subject, 1.5)


# ---------------------------------------------------------------- bundles


def test_bundle_round_trip(tmp_path, subject):
    save_subject(subject, tmp_path / "s0")
    back = load_subject(tmp_path / "s0")
    assert back.spec == subject.spec
    for name, vol in subject.volumes().items():
        assert np.array_equal(vol.data, getattr(back, name).data), name
    # byte-exact on re-save
    save_subject(back, tmp_path / "s1")
    for f in (tmp_path / "s0").iterdir():
        assert f.read_bytes() == (tmp_path / "s1" / f.name).read_bytes(), f.name


def test_bundle_missing_volume(tmp_path, subject):
    save_subject(subject, tmp_path / "s")
    (tmp_path / "s" / "artery.svol").unlink()
    with pytest.raises(BundleError):
        load_subject(tmp_path / "s")


def test_bundle_missing_meta(tmp_path, subject):
    save_subject(subject, tmp_path / "s")
    (tmp_path / "s" / "meta.json").unlink()
    with pytest.raises(BundleError):
        load_subject(tmp_path / "s")


def test_bundle_dims_mismatch(tmp_path, subject):
    save_subject(subject, tmp_path / "s")
    other = generate_phantom(PhantomSpec(seed=9, dims=GridDims(16, 16, 16), tree_depth=2))
    from segfield.volume import save_svol

    save_svol(tmp_path / "s" / "artery.svol", other.artery)
    with pytest.raises(BundleError):
        load_subject(tmp_path / "s")


# ---------------------------------------------------------------- splits


def test_split_sizes_and_partition():
    ids = [f"s{i:03d}" for i in range(37)]
    split = split_dataset(ids, seed=5)
    assert len(split["train"]) == 25  # floor(0.7 * 37)
    assert len(split["val"]) == 3  # floor(0.1 * 37)
    assert len(split["test"]) == 9
    assert sorted(split["train"] + split["val"] + split["test"]) == sorted(ids)


def test_split_deterministic_and_seed_sensitive():
    ids = [f"s{i}" for i in range(50)]
    a = split_dataset(ids, 1)
    b = split_dataset(ids, 1)
    c = split_dataset(ids, 2)
    assert a == b
    assert a != c


@given(st.integers(1, 400), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_split_always_partitions(n, seed):
    ids = list(range(n))
    split = split_dataset(ids, seed)
    joined = split["train"] + split["val"] + split["test"]
    assert sorted(joined) == ids
    assert len(split["train"]) == int(np.floor(0.7 * n))
    assert len(split["val"]) == int(np.floor(0.1 * n))
