import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gendds.checkpoint import Checkpoint, content_hash, with_prefix
from gendds.errors import CompatibilityError, FormatError, UpgradeNeededError

names = st.text(st.characters(min_codepoint=48, max_codepoint=122), min_size=1, max_size=12)
arrays = hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"a.weight": rng.normal(size=(3, 2)).astype(np.float32), "b": np.arange(4.0)},
                      {"type": "BASE", "note": "x"})


class TestRoundTrip:
    @settings(max_examples=40)
    @given(st.dictionaries(names, arrays, max_size=5), st.dictionaries(names, st.integers(), max_size=3))
    def test_lossless(self, tensors, meta):
        back = Checkpoint.from_bytes(Checkpoint(tensors, meta).to_bytes())
        assert set(back.tensors) == set(tensors)
        for k, v in tensors.items():
            assert back.tensors[k].dtype == v.dtype
            np.testing.assert_array_equal(back.tensors[k], v)
        for k, v in meta.items():
            assert back.metadata[k] == v

    def test_file_and_hash(self, tmp_path):
        ck = sample_ckpt()
        path = ck.save(tmp_path / "sub" / "m.gdds")
        back = Checkpoint.load(path, expect_type="BASE")
        assert back.content_hash() == ck.content_hash() == content_hash(ck.tensors)
        assert path.read_bytes() == ck.to_bytes()

    def test_hash_ignores_insertion_order(self):
        ck = sample_ckpt()
        assert content_hash(dict(reversed(list(ck.tensors.items())))) == ck.content_hash()

    def test_subset_and_prefix(self):
        ck = Checkpoint(with_prefix("unet", {"w": np.ones(2)}))
        assert list(ck.subset("unet")) == ["w"]


class TestCorruption:
    def test_bad_magic(self):
        with pytest.raises(FormatError) as exc:
            Checkpoint.from_bytes(b"NOPE" + sample_ckpt().to_bytes()[4:])
        assert exc.value.offset == 0

    def test_newer_schema(self):
        buf = bytearray(sample_ckpt().to_bytes())
        buf[4:8] = struct.pack("<I", 99)
        with pytest.raises(UpgradeNeededError):
            Checkpoint.from_bytes(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 10, 40, -1, -13])
    def test_truncation_reports_offset(self, cut):
        buf = sample_ckpt().to_bytes()
        with pytest.raises(FormatError) as exc:
            Checkpoint.from_bytes(buf[:cut])
        assert exc.value.offset is not None and 0 <= exc.value.offset <= len(buf)

    def test_flipped_data_byte(self):
        buf = bytearray(sample_ckpt().to_bytes())
        buf[-2] ^= 0xFF
        with pytest.raises(FormatError, match="hash"):
            Checkpoint.from_bytes(bytes(buf))

    def test_wrong_type(self, tmp_path):
        path = sample_ckpt().save(tmp_path / "m.gdds")
        with pytest.raises(CompatibilityError):
            Checkpoint.load(path, expect_type="LORA")

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            Checkpoint({"i": np.arange(3)}).to_bytes()
