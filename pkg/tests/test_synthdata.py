import json

import numpy as np
import pytest

from avuseg.synthdata import (Dataset, DatasetSpec, SpecError, balanced_class_weights,
                              class_frequencies, generate, generate_scan, load_dataset, save_dataset)

SMALL = dict(num_train=2, num_val=1, num_test=1, size=(32, 32))


def test_defaults_follow_split_counts():
    spec = DatasetSpec()
    assert (spec.num_train, spec.num_val, spec.num_test, spec.size) == (33, 5, 10, (64, 64))
    assert [spec.split_of(i) for i in (0, 32, 33, 37, 38, 47)] == ["train"] * 2 + ["val"] * 2 + ["test"] * 2


def test_same_seed_identical_bytes_and_different_seed_differs():
    a, b = generate(DatasetSpec(**SMALL, seed=4)), generate(DatasetSpec(**SMALL, seed=4))
    for x, y in zip(a.scans, b.scans):
        assert x.image.data.tobytes() == y.image.data.tobytes()
        assert x.label.data.tobytes() == y.label.data.tobytes()
    c = generate(DatasetSpec(**SMALL, seed=5))
    assert a.scans[0].image.data.tobytes() != c.scans[0].image.data.tobytes()


def test_zero_jitter_annotation_equals_geometry():
    for s in generate(DatasetSpec(**SMALL, num_classes=6)).scans:
        assert np.array_equal(s.label.data, s.geometry.data)


def test_jitter_perturbs_only_the_boundary():
    base = generate_scan(DatasetSpec(**SMALL), 0)
    jit = generate_scan(DatasetSpec(**SMALL, jitter=1.5), 0)
    assert np.array_equal(base.geometry.data, jit.geometry.data)
    diff = base.label.data != jit.label.data
    assert 0 < diff.sum() < (base.label.data > 0).sum()


def test_intensity_shift_raises_mean_by_shift():
    shift = 0.3
    for i in range(3):
        a = generate_scan(DatasetSpec(**SMALL), i).image.data
        b = generate_scan(DatasetSpec(**SMALL, intensity_shift=shift), i).image.data
        assert abs((b.mean() - a.mean()) - shift) < 1e-12


def test_texture_noise_shift_within_tolerance():
    tn, shift = 0.2, 0.3
    a = generate_scan(DatasetSpec(**SMALL), 0)
    b = generate_scan(DatasetSpec(**SMALL, intensity_shift=shift, texture_noise=tn), 0)
    n = a.image.data.size
    assert abs((b.image.data.mean() - a.image.data.mean()) - shift) <= 4 * tn / np.sqrt(n)
    assert np.array_equal(a.geometry.data, b.geometry.data)


def test_shape_scale_keeps_geometry_seed_and_changes_area():
    a = generate_scan(DatasetSpec(**SMALL), 1)
    b = generate_scan(DatasetSpec(**SMALL, shape_scale=0.7), 1)
    assert (b.geometry.data > 0).sum() < (a.geometry.data > 0).sum()


@pytest.mark.parametrize("c", [2, 6])
def test_labels_valid_and_foreground_fraction_bounded(c):
    spec = DatasetSpec(num_train=6, num_val=0, num_test=0, num_classes=c, seed=2)
    ds = generate(spec)
    for s in ds.scans:
        lab = s.label.data
        assert lab.dtype == np.uint8 and lab.max() < c and s.label.num_classes == c
        assert set(np.unique(lab)) == set(range(c))
        frac = (lab > 0).mean()
        assert 0.5 * spec.foreground_fraction <= frac <= 1.1 * spec.foreground_fraction


def test_class_weights_background_one_and_rare_heavier():
    ds = generate(DatasetSpec(**SMALL))
    f = class_frequencies(ds.scans, 2)
    w = balanced_class_weights(ds.scans, 2)
    assert abs(f.sum() - 1) < 1e-12 and w[0] == 1.0
    np.testing.assert_allclose(w[1], np.sqrt(f[0] / f[1]), rtol=1e-12)


@pytest.mark.parametrize("bad, field", [
    ({"num_classes": 3}, "num_classes"), ({"size": (30, 32)}, "size"), ({"size": (4, 4)}, "size"),
    ({"depth": 0}, "depth"), ({"foreground_fraction": 0.7}, "foreground_fraction"),
    ({"noise_std": -1.0}, "noise_std"), ({"num_train": -1}, "num_train"),
    ({"contrast": (1.0, 0.5)}, "contrast"), ({"shape_scale": 0}, "shape_scale"),
    ({"bogus": 1}, "bogus"), ({"num_train": 0, "num_val": 0, "num_test": 0}, "num_train"),
])
def test_invalid_spec_names_field(bad, field):
    with pytest.raises(SpecError) as info:
        DatasetSpec.from_dict(bad)
    assert info.value.field == field


def test_save_load_roundtrip(tmp_path):
    ds = generate(DatasetSpec(**SMALL, num_classes=6, jitter=1.0))
    manifest = save_dataset(ds, tmp_path)
    on_disk = json.loads((tmp_path / "dataset.json").read_text())
    assert on_disk == manifest and on_disk["splits"]["val"] == ["scan_002"]
    back = load_dataset(tmp_path)
    assert isinstance(back, Dataset) and back.spec == ds.spec
    for x, y in zip(ds.scans, back.scans):
        assert (x.id, x.split) == (y.id, y.split)
        for key in ("image", "label", "geometry"):
            assert getattr(x, key).data.tobytes() == getattr(y, key).data.tobytes()
