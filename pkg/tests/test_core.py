import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from paseg.core import (
    ConfigurationError, FormatError, LabelMap, LoadError, SampleMeta, SampleRef, TissueClass,
    WavelengthAxis, decode_tensor, encode_tensor, load_samples, read_manifest, read_tensor_file,
    split_by_volunteer, write_manifest, write_tensor_file,
)

from conftest import make_sample


def test_tissue_codes_are_fixed():
    assert [c.value for c in TissueClass] == list(range(7))
    assert TissueClass.BLOOD == 0 and TissueClass.COUPLING_ARTEFACT == 6
    assert TissueClass(5) is TissueClass.OTHER_TISSUE


def test_default_wavelength_axis():
    wl = WavelengthAxis().wavelengths
    assert len(wl) == 26 and wl[0] == 700 and wl[-1] == 950
    np.testing.assert_allclose(np.diff(wl), 10.0)


def test_label_map_rejects_bad_codes():
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2), 7, np.uint8))


def test_sample_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        make_sample(h=4, w=4, labels=np.zeros((4, 5)))


def test_meta_vocabulary():
    with pytest.raises(ValueError):
        SampleMeta(0, "knee", "left", 0)
    with pytest.raises(ValueError):
        SampleMeta(0, "neck", "left", 3)


# --- splits ---

def _grid_samples(n_vol, per_vol):
    sites = ("forearm", "calf", "neck")
    out = []
    for v in range(n_vol):
        for i in range(per_vol):
            out.append(make_sample(f"v{v}_{i}", v, sites[i % 3], ("left", "right")[(i // 3) % 2],
                                   (i // 6) % 3, h=2, w=2, channels=2))
    return out


def test_split_study_sizes():
    samples = _grid_samples(10, 18)
    split = split_by_volunteer(samples, range(8), (8, 9), 6, seed=1)
    assert (len(split.train), len(split.validation), len(split.test)) == (138, 6, 36)
    by_id = {s.id: s for s in samples}
    assert all(by_id[i].meta.volunteer_id < 8 for i in split.validation)
    assert {by_id[i].meta.volunteer_id for i in split.test} == {8, 9}


def test_split_overlap_rejected():
    with pytest.raises(ConfigurationError):
        split_by_volunteer(_grid_samples(2, 2), {0, 1}, {1}, 0)


def test_split_small_exhaustive():
    split = split_by_volunteer(_grid_samples(2, 2), {0}, {1}, 0)
    assert len(split.train) == 2 and len(split.test) == 2 and not split.validation


def test_split_seeded():
    s = _grid_samples(4, 6)
    a = split_by_volunteer(s, range(3), (3,), 4, seed=3)
    assert a == split_by_volunteer(s, range(3), (3,), 4, seed=3)
    assert a.validation != split_by_volunteer(s, range(3), (3,), 4, seed=4).validation


def test_split_n_val_too_large():
    with pytest.raises(ConfigurationError):
        split_by_volunteer(_grid_samples(2, 2), {0}, {1}, 3)


# --- PATC ---

def test_patc_round_trip_small(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(3, 2)
    write_tensor_file(tmp_path / "a.patc", a)
    b = read_tensor_file(tmp_path / "a.patc")
    assert b.dtype == np.float32 and b.shape == (3, 2)
    np.testing.assert_array_equal(a, b)


def test_patc_header_layout():
    buf = encode_tensor(np.zeros((26, 128, 128), np.float32))
    assert buf[:4] == b"PATC"
    assert struct.unpack("<HBB", buf[4:8]) == (1, 0, 3)
    assert struct.unpack("<3I", buf[8:20]) == (26, 128, 128)
    assert len(buf) - 20 == 1_703_936


@pytest.mark.parametrize("buf, offset", [
    (b"PAT", 3),
    (b"XXXX" + bytes(4), 0),
])
def test_patc_short_or_bad_magic(buf, offset):
    with pytest.raises(FormatError) as exc:
        decode_tensor(buf)
    assert exc.value.offset == offset


def test_patc_unknown_dtype_and_truncation():
    good = encode_tensor(np.ones((2, 3), np.uint8))
    bad = bytearray(good)
    bad[6] = 9
    with pytest.raises(FormatError, match="dtype") as exc:
        decode_tensor(bytes(bad))
    assert exc.value.offset == 6
    with pytest.raises(FormatError, match="truncated payload"):
        decode_tensor(good[:-1])
    with pytest.raises(FormatError, match="dimension"):
        decode_tensor(good[:10])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8]),
                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements={"allow_nan": False, "allow_infinity": False}))
def test_patc_round_trip_property(a):
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


# --- manifest ---

def _write_sample(root, s):
    paths = [root / f"{s.id}_{k}.patc" for k in ("pa", "us", "labels")]
    write_tensor_file(paths[0], s.pa.values)
    write_tensor_file(paths[1], s.us.values)
    write_tensor_file(paths[2], s.labels.values)
    return SampleRef(s.id, s.meta, *paths)


def test_manifest_empty(tmp_path):
    (tmp_path / "m.txt").write_text("# nothing\n\n")
    assert read_manifest(tmp_path / "m.txt") == []


def test_manifest_round_trip(tmp_path):
    refs = [_write_sample(tmp_path, make_sample(f"s{i}", i, seed=i)) for i in range(3)]
    write_manifest(tmp_path / "manifest.txt", refs)
    text = (tmp_path / "manifest.txt").read_text()
    assert text.splitlines()[0].startswith("s0, 0, forearm, left, 0, s0_pa.patc")
    loaded = load_samples(tmp_path / "manifest.txt")
    assert [s.id for s in loaded] == ["s0", "s1", "s2"]
    np.testing.assert_array_equal(loaded[1].pa.values, refs[1].load().pa.values)


def test_manifest_dimension_mismatch_names_sample(tmp_path):
    s = make_sample("bad1", h=8, w=8)
    ref = _write_sample(tmp_path, s)
    write_tensor_file(ref.label_path, np.zeros((4, 4), np.uint8))
    write_manifest(tmp_path / "manifest.txt", [ref])
    with pytest.raises(LoadError, match="bad1"):
        load_samples(tmp_path / "manifest.txt")


def test_manifest_missing_file(tmp_path):
    ref = _write_sample(tmp_path, make_sample("gone"))
    write_manifest(tmp_path / "manifest.txt", [ref])
    ref.us_path.unlink()
    with pytest.raises(LoadError, match="gone"):
        read_manifest(tmp_path / "manifest.txt")
