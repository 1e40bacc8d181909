import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.ensemble import RandomForestClassifier

from outadapt import synth
from outadapt.exceptions import ConfigurationError, FormatError, MagicError, TruncatedError, VersionError
from outadapt.synth import (SOURCE_STYLE, TARGET_STYLE, DomainStyle, make_splits, render, sample_layout)


@pytest.fixture(scope="module")
def splits():
    return make_splits(seed=0)


def test_layout_deterministic():
    assert np.array_equal(sample_layout(3, 48, 48, 4).labels, sample_layout(3, 48, 48, 4).labels)


def test_layout_class_range():
    for seed in range(20):
        assert set(np.unique(sample_layout(seed, 48, 48, 3).labels)) <= {0, 1, 2}


def test_layout_guards():
    with pytest.raises(ConfigurationError):
        sample_layout(0, 48, 48, 2)
    with pytest.raises(ConfigurationError):
        sample_layout(0, 48, 48, 9)
    with pytest.raises(ConfigurationError):
        sample_layout(0, 44, 48, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(3, 8), st.integers(1, 8), st.integers(1, 8))
def test_layout_invariants(seed, c, hb, wb):
    labels = sample_layout(seed, 8 * hb, 8 * wb, c).labels
    assert labels.shape == (8 * hb, 8 * wb)
    assert labels.max() < c
    assert len(np.unique(labels)) >= 2


def test_every_class_common():
    present = np.zeros(4)
    for seed in range(1000):
        present += np.bincount(np.unique(sample_layout(seed, 48, 48, 4).labels), minlength=4) > 0
    assert np.all(present >= 100)


def test_render_shares_labels():
    layout = sample_layout(5, 48, 48, 4)
    a, b = render(layout, SOURCE_STYLE, 1), render(layout, TARGET_STYLE, 1)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.labels, layout.labels)
    assert not np.array_equal(a.image, b.image)


def test_render_flat_style():
    layout = sample_layout(6, 48, 48, 4)
    style = DomainStyle(colors=SOURCE_STYLE.colors, texture=0.0, noise=0.0)
    img = render(layout, style, 0).image
    for cls in np.unique(layout.labels):
        region = img[:, layout.labels == cls]
        expected = np.asarray(SOURCE_STYLE.colors[cls], np.float32)[:, None]
        assert np.array_equal(region, np.broadcast_to(expected, region.shape))


def test_brightness_offset():
    layout = sample_layout(7, 48, 48, 4)
    colors = tuple((0.3, 0.4, 0.5) for _ in range(8))
    a = render(layout, DomainStyle(colors, texture=0.0, noise=0.0), 0).image
    b = render(layout, DomainStyle(colors, texture=0.0, noise=0.0, brightness=0.2), 0).image
    assert b.mean() - a.mean() == pytest.approx(0.2, abs=1e-6)


def test_images_in_unit_range(splits):
    for samples in splits.values():
        for s in samples:
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert s.image.dtype == np.float32 and s.image.shape == (3, 48, 48)


def test_split_sizes(splits):
    assert [len(splits[k]) for k in synth.SPLITS] == [200, 200, 50]


def test_splits_deterministic():
    a, b = (make_splits(seed=4, n_source=3, n_target=3, n_test=2) for _ in range(2))
    for name in synth.SPLITS:
        for x, y in zip(a[name], b[name]):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)


def test_no_shared_scenes(splits):
    seen = {}
    for name, samples in splits.items():
        for s in samples:
            seen.setdefault(s.labels.tobytes(), set()).add(name)
    assert all(len(v) == 1 for v in seen.values())


def test_class_frequencies_match(splits):
    def freq(samples):
        lab = np.concatenate([s.labels.ravel() for s in samples])
        return np.bincount(lab, minlength=4) / lab.size
    assert np.all(np.abs(freq(splits["source_train"]) - freq(splits["target_train"])) < 0.02)


def test_domains_separable_by_pixel_colour(splits):
    rng = np.random.default_rng(0)

    def pixels(samples):
        x = [s.image.reshape(3, -1).T[rng.choice(48 * 48, 100, replace=False)] for s in samples]
        return np.concatenate(x), np.repeat([s.domain for s in samples], 100)

    src, tgt = splits["source_train"], splits["target_train"]
    x_tr, y_tr = pixels(src[:100] + tgt[:100])
    x_te, y_te = pixels(src[100:] + tgt[100:])
    clf = RandomForestClassifier(n_estimators=30, random_state=0).fit(x_tr, y_tr)
    assert clf.score(x_te, y_te) > 0.9


# --- file format ---------------------------------------------------------------


def test_round_trip(tmp_path, splits):
    samples = splits["target_test"][:5]
    synth.write_dataset(tmp_path / "d", samples)
    back = synth.load_dataset(tmp_path / "d")
    assert len(back) == 5
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
        assert (a.domain, a.n_classes) == (b.domain, b.n_classes)


def test_byte_layout(splits):
    s = splits["source_train"][0]
    buf = synth.encode_sample(s)
    assert buf[:4] == b"OASD" and buf[4] == 1
    assert struct.unpack_from("<HHBB", buf, 5) == (48, 48, 4, 1)
    assert len(buf) == 11 + 3 * 48 * 48 * 4 + 48 * 48
    img = np.frombuffer(buf, "<f4", 3 * 48 * 48, 11).reshape(3, 48, 48)
    assert np.array_equal(img, s.image)
    assert np.array_equal(np.frombuffer(buf, np.uint8, offset=11 + 3 * 48 * 48 * 4).reshape(48, 48), s.labels)


def test_labels_optional(splits):
    s = synth.decode_sample(synth.encode_sample(splits["target_train"][0]), with_labels=False)
    assert s.labels is None


def test_empty_directory(tmp_path):
    assert synth.load_dataset(tmp_path) == []


def test_missing_directory(tmp_path):
    with pytest.raises(OSError):
        synth.load_dataset(tmp_path / "nope")


def test_truncated(splits):
    buf = synth.encode_sample(splits["target_test"][0])
    for cut in (3, 20, len(buf) - 1):
        with pytest.raises(TruncatedError):
            synth.decode_sample(buf[:cut])


def test_distinct_format_errors(splits):
    buf = bytearray(synth.encode_sample(splits["target_test"][0]))
    bad_magic = b"XXXX" + bytes(buf[4:])
    bad_version = bytes(buf[:4]) + b"\x02" + bytes(buf[5:])
    with pytest.raises(MagicError):
        synth.decode_sample(bad_magic)
    with pytest.raises(VersionError):
        synth.decode_sample(bad_version)
    assert all(issubclass(cls, FormatError) for cls in (MagicError, VersionError, TruncatedError))


def test_splits_manifest(tmp_path):
    sp = make_splits(seed=1, n_source=2, n_target=3, n_test=1, size=32)
    manifest = synth.write_splits(tmp_path, sp)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 6 and lines[0].startswith("source_train\tsource_train/")
    back = synth.load_split(tmp_path, "target_train")
    assert [s.image.tobytes() for s in back] == [s.image.tobytes() for s in sp["target_train"]]
