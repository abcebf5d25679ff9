import numpy as np
import pytest

from fsvfm.errors import CodecError, ConfigError, IngestionError
from fsvfm.synth import (
    CORRUPTION_KINDS,
    ParsingMap,
    RawLabel,
    SynthConfig,
    _CORRUPTIBLE,
    decode_parsing,
    encode_parsing,
    generate_synthetic,
    load_dataset,
    save_dataset,
)


def test_generation_is_deterministic():
    a = generate_synthetic(SynthConfig(seed=1, n_real=4, n_fake=0))
    b = generate_synthetic(SynthConfig(seed=1, n_real=4, n_fake=0))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.parsing.labels, sb.parsing.labels)


def test_empty_config_gives_empty_list():
    assert generate_synthetic(SynthConfig(n_real=0, n_fake=0)) == []


def test_every_raw_label_present():
    for sample in generate_synthetic(SynthConfig(seed=9, n_real=30, n_fake=0)):
        hist = np.bincount(sample.parsing.labels.reshape(-1), minlength=11)
        assert (hist > 0).all()


def test_labels_and_groups():
    samples = generate_synthetic(SynthConfig(seed=2, n_real=3, n_fake=2))
    assert [s.label for s in samples] == ["real"] * 3 + ["fake"] * 2
    assert len({s.group_id for s in samples}) == 5


def _region_pixels(parsing, region_name):
    codes = [int(c) for c in _CORRUPTIBLE[region_name]]
    return np.isin(parsing.labels, codes)


def test_fakes_differ_only_inside_corrupted_region():
    # pixel-diff oracle over generated (source, fake) pairs
    samples = generate_synthetic(SynthConfig(seed=7, n_real=100, n_fake=100))
    reals, fakes = samples[:100], samples[100:]
    for fake in fakes:
        src = reals[fake.metadata["source_index"]]
        inside = _region_pixels(src.parsing, fake.metadata["region"])
        diff = np.any(fake.image != src.image, axis=-1)
        assert diff[inside].any(), "fake must differ inside the corrupted region"
        if fake.metadata["corruption"] in ("region_color_shift", "region_swap"):
            assert not diff[~inside].any(), "no pixel outside the region may change"
        assert set(fake.metadata) >= {"corruption", "region", "source_index"}
        assert fake.metadata["corruption"] in CORRUPTION_KINDS


def test_blur_writes_only_inside_region():
    samples = generate_synthetic(
        SynthConfig(seed=13, n_real=5, n_fake=5, corruption_kinds=("region_blur",))
    )
    for fake in samples[5:]:
        src = samples[fake.metadata["source_index"]]
        inside = _region_pixels(src.parsing, fake.metadata["region"])
        diff = np.any(fake.image != src.image, axis=-1)
        assert not diff[~inside].any()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(image_size=0, n_real=1),
        dict(n_real=-1),
        dict(n_real=0, n_fake=1),
        dict(n_real=1, n_fake=1, corruption_kinds=("region_swap",)),
        dict(n_real=1, n_fake=1, corruption_kinds=()),
        dict(n_real=1, n_fake=0, corruption_kinds=("bogus",)),
    ],
)
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**kwargs))


# -- codec -------------------------------------------------------------------


def test_codec_header_example():
    # 13-byte header then row-major payload, exactly as documented
    parsing = ParsingMap(np.array([[0, 1], [2, 3]], dtype=np.uint8))
    data = encode_parsing(parsing)
    assert data[:4] == b"FSPM"
    assert data[4] == 1
    assert data[5:9] == (2).to_bytes(4, "little")
    assert data[9:13] == (2).to_bytes(4, "little")
    assert data[13:] == bytes([0, 1, 2, 3])
    assert len(data) == 17


def test_codec_round_trip_random_maps():
    rng = np.random.default_rng(123)
    for _ in range(200):
        h, w = int(rng.integers(1, 128)), int(rng.integers(1, 128))
        labels = rng.integers(0, 11, size=(h, w)).astype(np.uint8)
        parsing = ParsingMap(labels)
        assert decode_parsing(encode_parsing(parsing)) == parsing


def test_codec_truncated_after_header():
    data = encode_parsing(ParsingMap(np.zeros((2, 2), dtype=np.uint8)))
    with pytest.raises(CodecError) as exc:
        decode_parsing(data[:13])
    assert exc.value.offset == 13


def test_codec_bad_magic_and_version():
    data = encode_parsing(ParsingMap(np.zeros((2, 2), dtype=np.uint8)))
    with pytest.raises(CodecError) as exc:
        decode_parsing(b"XSPM" + data[4:])
    assert exc.value.offset == 0
    with pytest.raises(CodecError) as exc:
        decode_parsing(data[:4] + b"\x02" + data[5:])
    assert exc.value.offset == 4
    with pytest.raises(CodecError):
        decode_parsing(data + b"\x00")  # trailing garbage
    with pytest.raises(CodecError) as exc:
        decode_parsing(data[:15])  # truncated mid-payload
    assert exc.value.offset == 15


# -- dataset IO ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    samples = generate_synthetic(SynthConfig(seed=4, n_real=3, n_fake=2))
    save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 5
    for orig, back in zip(samples, loaded):
        assert back.label == orig.label
        assert back.group_id == orig.group_id
        assert back.parsing == orig.parsing
        # images round-trip through 8-bit PNG quantization
        assert np.abs(back.image - orig.image).max() <= (0.5 / 255) + 1e-12


def test_load_errors(tmp_path):
    samples = generate_synthetic(SynthConfig(seed=4, n_real=2, n_fake=0))
    manifest = save_dataset(samples, tmp_path)
    lines = manifest.read_text().splitlines()
    (tmp_path / "images" / "000000.png").unlink()
    with pytest.raises(IngestionError) as exc:
        load_dataset(tmp_path)
    assert "000000.png" in str(exc.value)

    manifest.write_text(lines[1] + "\n")
    bad = ParsingMap(np.zeros((8, 8), dtype=np.uint8))
    (tmp_path / "parsing" / "000001.fspm").write_bytes(encode_parsing(bad))
    with pytest.raises(IngestionError) as exc:
        load_dataset(tmp_path)
    assert "mismatch" in str(exc.value)


def test_load_missing_manifest(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path)


def test_raw_label_codes_are_stable():
    assert [int(l) for l in RawLabel] == list(range(11))
