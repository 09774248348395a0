import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcast.errors import ConfigurationError, FormatError, ShapeError, StatisticsError
from nowcast.griddata import (
    TRANSFORMS,
    Dataset,
    GeneratorConfig,
    GridSequence,
    SamplePair,
    augment,
    channel_mean,
    diffuse,
    generate_synthetic,
    load_dataset,
    read_gridseq,
    save_dataset,
    write_gridseq,
)


def small_cfg(**kw):
    base = dict(n_samples=4, n_validation=2, height=8, width=8, t_in=2, t_out=3, n_blobs=2, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def random_seq(rng, shape=(3, 4, 5, 2)):
    return GridSequence(rng.uniform(size=shape).astype(np.float32), ("a", "b")[: shape[-1]], 10)


def pair_of(rng, h=4, w=4):
    a = GridSequence(rng.uniform(size=(2, h, w, 1)), ("v",))
    b = GridSequence(rng.uniform(size=(3, h, w, 1)), ("v",))
    return SamplePair(a, b, "train")


# GridSequence ---------------------------------------------------------------


def test_gridsequence_rejects_out_of_range():
    with pytest.raises(ValueError):
        GridSequence(np.full((1, 2, 2, 1), 1.5))
    with pytest.raises(ValueError):
        GridSequence(np.full((1, 2, 2, 1), np.nan))


def test_gridsequence_needs_four_dims():
    with pytest.raises(ShapeError):
        GridSequence(np.zeros((2, 2, 2)))


def test_gridsequence_is_read_only():
    s = GridSequence(np.zeros((1, 2, 2, 1)))
    with pytest.raises(ValueError):
        s.frames[0, 0, 0, 0] = 1.0


def test_samplepair_shape_mismatch():
    a = GridSequence(np.zeros((2, 4, 4, 1)))
    b = GridSequence(np.zeros((2, 4, 5, 1)))
    with pytest.raises(ShapeError):
        SamplePair(a, b)


# generator ----------------------------------------------------------------------


def test_no_blobs_gives_zero_frames():
    d = generate_synthetic(small_cfg(n_blobs=0))
    for s in d.samples:
        assert not s.input.frames.any()
        assert not s.target.frames.any()


def test_static_field_repeats_first_frame():
    d = generate_synthetic(small_cfg(velocity_min=0.0, velocity_max=0.0, diffusion=0.0))
    for s in d.samples:
        first = s.input.frames[0]
        for frame in np.concatenate([s.input.frames, s.target.frames]):
            assert np.array_equal(frame, first)


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(small_cfg())
    b = generate_synthetic(small_cfg())
    assert all(x == y for x, y in zip(a.samples, b.samples))
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.gsq")):
        other = tmp_path / "b" / f.relative_to(tmp_path / "a")
        assert f.read_bytes() == other.read_bytes()


def test_different_seed_differs():
    a = generate_synthetic(small_cfg(seed=1))
    b = generate_synthetic(small_cfg(seed=2))
    assert a.samples[0] != b.samples[0]


def test_split_samples_do_not_depend_on_counts():
    small = generate_synthetic(small_cfg(n_samples=2))
    large = generate_synthetic(small_cfg(n_samples=6))
    assert small.split("validation") == large.split("validation")
    assert large.split("train")[:2] == small.split("train")


def test_values_in_unit_interval_and_rain_sparse():
    cfg = small_cfg(n_blobs=6, rain_sparsity=0.7, rain_scale=3.0, n_samples=6)
    d = generate_synthetic(cfg)
    rain = d.variable_names.index("crr_intensity")
    for s in d.samples:
        for seq in (s.input, s.target):
            assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
            for frame in seq.frames[..., rain]:
                assert np.mean(frame == 0.0) >= 0.7


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        small_cfg(height=0)
    with pytest.raises(ConfigurationError):
        small_cfg(rain_variables=("nope",))
    with pytest.raises(ConfigurationError):
        GeneratorConfig.from_mapping({"bogus": "1"})


def test_config_from_mapping_round_trip():
    cfg = small_cfg(variables=("t", "r"), rain_variables=("r",), velocity_max=2.5)
    text = {k: (",".join(v) if isinstance(v, tuple) else str(v)) for k, v in cfg.to_mapping().items()}
    assert GeneratorConfig.from_mapping(text) == cfg


def test_diffuse_preserves_constant():
    a = np.full((5, 6), 0.3)
    np.testing.assert_allclose(diffuse(a, 2.5), a)


# augmentation -------------------------------------------------------------------


def test_mirror_is_involution():
    s = pair_of(np.random.default_rng(0))
    for tf in ("mirror_h", "mirror_v"):
        assert augment(augment(s, tf), tf) == s


def test_four_rotations_are_identity():
    s = pair_of(np.random.default_rng(1))
    out = s
    for _ in range(4):
        out = augment(out, "rot90")
    assert out == s
    assert augment(augment(s, "rot90"), "rot270") == s


def test_identity_transform():
    s = pair_of(np.random.default_rng(2))
    assert augment(s, "identity") == s


def test_rotation_needs_square_grid():
    s = pair_of(np.random.default_rng(3), h=4, w=6)
    with pytest.raises(ShapeError):
        augment(s, "rot90")
    augment(s, "rot180")


def test_augment_applies_same_transform_to_all_frames():
    s = pair_of(np.random.default_rng(4))
    out = augment(s, "mirror_h")
    np.testing.assert_array_equal(out.input.frames, s.input.frames[:, :, ::-1])
    np.testing.assert_array_equal(out.target.frames, s.target.frames[:, :, ::-1])


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(TRANSFORMS), st.integers(0, 2**16))
def test_channel_mean_invariant_under_augment(tf, seed):
    d = generate_synthetic(small_cfg(seed=seed, n_samples=2, n_validation=0))
    aug = Dataset([augment(s, tf) for s in d.samples])
    for c in range(2):
        assert channel_mean(aug, "train", c) == pytest.approx(channel_mean(d, "train", c), rel=1e-12)


# channel_mean -----------------------------------------------------------------------


def test_channel_mean_all_zero():
    d = generate_synthetic(small_cfg(n_blobs=0))
    assert channel_mean(d, "train", "temperature") == 0.0


def test_channel_mean_two_pixels():
    a = GridSequence(np.array([0.2], dtype=np.float32).reshape(1, 1, 1, 1), ("v",))
    b = GridSequence(np.array([0.4], dtype=np.float32).reshape(1, 1, 1, 1), ("v",))
    d = Dataset([SamplePair(a, b, "train")])
    assert channel_mean(d, "train", "v") == pytest.approx(0.3, abs=1e-7)


def test_channel_mean_denser_validation_rain():
    # halving the zero fraction in validation doubles rain coverage
    cfg = small_cfg(n_samples=40, n_validation=40, height=16, width=16, n_blobs=4,
                    rain_sparsity=0.8, rain_sparsity_validation=0.6)
    d = generate_synthetic(cfg)
    assert channel_mean(d, "validation", "crr_intensity") > channel_mean(d, "train", "crr_intensity")


def test_channel_mean_empty_split():
    d = generate_synthetic(small_cfg(n_validation=0))
    with pytest.raises(StatisticsError):
        channel_mean(d, "validation", 0)


# GSQ1 -----------------------------------------------------------------------------------


def test_gsq_round_trip_exact(tmp_path):
    rng = np.random.default_rng(5)
    s = random_seq(rng)
    path = tmp_path / "s.gsq"
    write_gridseq(path, s)
    back = read_gridseq(path, s.variable_names)
    assert back == s
    assert back.frames.tobytes() == s.frames.tobytes()


def test_gsq_layout(tmp_path):
    frames = np.arange(2 * 3 * 3 * 1, dtype=np.float32).reshape(2, 3, 3, 1) / 20
    path = tmp_path / "s.gsq"
    write_gridseq(path, GridSequence(frames, step_minutes=5))
    blob = path.read_bytes()
    assert blob[:4] == b"GSQ1"
    assert struct.unpack("<5I", blob[4:24]) == (2, 3, 3, 1, 5)
    np.testing.assert_array_equal(np.frombuffer(blob[24:], "<f4"), frames.ravel())


def test_gsq_bad_magic(tmp_path):
    path = tmp_path / "s.gsq"
    path.write_bytes(b"XXXX" + struct.pack("<5I", 1, 1, 1, 1, 15) + b"\0" * 4)
    with pytest.raises(FormatError) as exc:
        read_gridseq(path)
    assert exc.value.field == "magic"


def test_gsq_truncated_payload(tmp_path):
    path = tmp_path / "s.gsq"
    path.write_bytes(b"GSQ1" + struct.pack("<5I", 2, 3, 3, 1, 15) + np.zeros(17, "<f4").tobytes())
    with pytest.raises(FormatError) as exc:
        read_gridseq(path)
    assert exc.value.field == "payload"
    assert "expected 18" in str(exc.value)


def test_gsq_dimension_overflow(tmp_path):
    path = tmp_path / "s.gsq"
    path.write_bytes(b"GSQ1" + struct.pack("<5I", 65535, 65535, 65535, 1, 15))
    with pytest.raises(FormatError) as exc:
        read_gridseq(path)
    assert "overflow" in str(exc.value)


def test_gsq_zero_dimension(tmp_path):
    path = tmp_path / "s.gsq"
    path.write_bytes(b"GSQ1" + struct.pack("<5I", 1, 0, 1, 1, 15))
    with pytest.raises(FormatError) as exc:
        read_gridseq(path)
    assert exc.value.field == "H"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_gsq_round_trip_property(t, h, w, c, seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    s = GridSequence(rng.uniform(size=(t, h, w, c)))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "s.gsq"
        write_gridseq(path, s)
        assert read_gridseq(path) == s


def test_dataset_directory_round_trip(tmp_path):
    d = generate_synthetic(small_cfg())
    save_dataset(d, tmp_path / "data")
    back = load_dataset(tmp_path / "data")
    assert len(back) == len(d)
    assert all(a == b for a, b in zip(back.samples, d.samples))
    assert back.variable_names == d.variable_names
