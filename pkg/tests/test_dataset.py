import numpy as np
import pytest
from PIL import Image

from drnet.dataset import (Manifest, SplitSpec, apply_exclusions, balanced_split, class_weights, load_exclusions,
                           load_manifest, synthesize_fundus, write_manifest, write_synthetic_dataset)
from drnet.errors import DuplicatePathError, InsufficientPopulation, InvalidArgument, LabelRangeError, ManifestError


def make_manifest(per_class):
    return Manifest(tuple((f'img_{label}_{i}.png', label) for label in range(5) for i in range(per_class)))


def write_text(path, text):
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_load_manifest(tmp_path):
    path = write_text(tmp_path / 'm.csv', 'path,label\na.png,0\nb.png,4\n\nc.png, 2\n')
    manifest = load_manifest(path)
    assert manifest.records == (('a.png', 0), ('b.png', 4), ('c.png', 2))
    assert manifest.counts() == [1, 0, 1, 0, 1]
    assert manifest.provenance == path


@pytest.mark.parametrize('text, error, line', [
    ('file,stage\na.png,0\n', ManifestError, 1),
    ('path,label\na.png,0\nb.png\n', ManifestError, 3),
    ('path,label\na.png,zero\n', ManifestError, 2),
    ('path,label\na.png,0\nb.png,5\n', LabelRangeError, 3),
    ('path,label\na.png,0\nb.png,1\na.png,2\n', DuplicatePathError, 4),
])
def test_malformed_manifest(tmp_path, text, error, line):
    with pytest.raises(error) as info:
        load_manifest(write_text(tmp_path / 'm.csv', text))
    assert info.value.line == line
    assert f'line {line}' in str(info.value)


def test_empty_manifest_is_allowed(tmp_path):
    assert len(load_manifest(write_text(tmp_path / 'm.csv', 'path,label\n'))) == 0


def test_manifest_validation():
    with pytest.raises(LabelRangeError):
        Manifest((('a.png', -1),))
    with pytest.raises(DuplicatePathError):
        Manifest((('a.png', 0), ('a.png', 1)))


def test_write_then_load(tmp_path):
    manifest = make_manifest(2)
    write_manifest(manifest, str(tmp_path / 'm.csv'))
    assert load_manifest(str(tmp_path / 'm.csv')).records == manifest.records


def test_exclusions(tmp_path):
    path = write_text(tmp_path / 'exclude.txt', '# ungradable\nimg_0_0.png\n\nimg_3_1.png  # blurred\n')
    excluded = load_exclusions(path)
    assert excluded == {'img_0_0.png', 'img_3_1.png'}
    kept = apply_exclusions(make_manifest(2), excluded)
    assert len(kept) == 8
    assert 'img_0_0.png' not in kept.paths


def test_default_split_sizes():
    train, val, test = balanced_split(make_manifest(1910))
    assert (len(train), len(val), len(test)) == (8000, 595, 955)
    for part, per_class in ((train, 1600), (val, 119), (test, 191)):
        assert part.counts() == [per_class] * 5


def test_split_is_disjoint_and_seeded():
    manifest = make_manifest(30)
    spec = SplitSpec(train=10, val=5, test=5, seed=3)
    parts = balanced_split(manifest, spec)
    paths = [set(part.paths) for part in parts]
    assert not (paths[0] & paths[1] or paths[0] & paths[2] or paths[1] & paths[2])
    again = balanced_split(manifest, spec)
    assert [p.records for p in parts] == [p.records for p in again]
    other = balanced_split(manifest, SplitSpec(train=10, val=5, test=5, seed=4))
    assert other[0].records != parts[0].records


def test_split_does_not_depend_on_other_classes():
    spec = SplitSpec(train=3, val=1, test=1)
    small, large = make_manifest(6), make_manifest(6)
    large = Manifest(large.records + (('extra.png', 2),))
    first, second = balanced_split(small, spec), balanced_split(large, spec)
    keep = [r for r in first[0].records if r[1] == 0]
    assert keep == [r for r in second[0].records if r[1] == 0]


def test_split_shortfall():
    with pytest.raises(InsufficientPopulation) as info:
        balanced_split(make_manifest(4), SplitSpec(train=3, val=1, test=1))
    assert info.value.label == 0
    assert info.value.shortfall == 1


def test_split_spec_validation():
    assert SplitSpec().per_class == 1910
    with pytest.raises(InvalidArgument):
        SplitSpec(train=-1)


def test_class_weights():
    np.testing.assert_allclose(class_weights(make_manifest(3)), [0.2] * 5)
    skewed = Manifest((('a', 0), ('b', 0), ('c', 1), ('d', 4)))
    np.testing.assert_allclose(class_weights(skewed), [0.5, 0.25, 0, 0, 0.25])
    with pytest.raises(InvalidArgument):
        class_weights(Manifest())


def test_synthesize_fundus():
    image = synthesize_fundus(3, side=64, rng=np.random.default_rng(0))
    assert image.shape == (64, 64, 3) and image.dtype == np.uint8
    assert image[0, 0].tolist() == [0, 0, 0]
    assert image[:, :, 0].max() > 150
    again = synthesize_fundus(3, side=64, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(image, again)
    with pytest.raises(InvalidArgument):
        synthesize_fundus(5)


def test_write_synthetic_dataset(tmp_path):
    manifest = write_synthetic_dataset(str(tmp_path), per_class=2, side=32)
    assert manifest.counts() == [2] * 5
    assert load_manifest(str(tmp_path / 'manifest.csv')).records == manifest.records
    with Image.open(tmp_path / manifest.paths[0]) as image:
        assert image.size == (32, 32) and image.mode == 'RGB'


def test_class_weights_of_skewed_population():
    counts = (737, 148, 69, 23, 21)
    manifest = Manifest(tuple((f'{label}_{i}', label) for label, n in enumerate(counts) for i in range(n * 3)))
    weights = class_weights(manifest)
    np.testing.assert_allclose(weights, [0.737, 0.148, 0.069, 0.023, 0.021], atol=2e-3)
    assert weights.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(class_weights(Manifest((('a', 0),))), [1, 0, 0, 0, 0])


def test_one_per_class_split():
    train, val, test = balanced_split(make_manifest(1), SplitSpec(train=1, val=0, test=0))
    assert (len(train), len(val), len(test)) == (5, 0, 0)
