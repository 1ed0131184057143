import hashlib

import numpy as np
import pytest

from pgseg.pipeline.data import (
    LoadError,
    SegSample,
    ValidationError,
    gen_synthetic,
    import_external,
    load_dataset,
    load_sample,
    sample_fraction,
    save_sample,
    synth_slice,
)
from pgseg.vocab import CLASS_NAMES, ORGANS, VocabularyError


def _sample(case="c0", size=8):
    rng = np.random.default_rng(0)
    label = rng.integers(0, 9, (size, size)).astype(np.uint8)
    return SegSample(rng.random((size, size)).astype(np.float32), label, (), case)


class TestContainer:
    def test_round_trip(self, tmp_path):
        s = _sample()
        back = load_sample(save_sample(s, tmp_path))
        assert back.case_id == "c0"
        assert np.array_equal(back.image, s.image) and np.array_equal(back.label, s.label)
        assert back.image.dtype == np.float32 and back.label.dtype == np.uint8

    def test_truncated_raw(self, tmp_path):
        path = save_sample(_sample(), tmp_path)
        raw = tmp_path / "c0.image.raw"
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(LoadError, match=r"c0\.image\.raw: 252 bytes, expected 256"):
            load_sample(path)

    def test_bad_label_value(self, tmp_path):
        path = save_sample(_sample(), tmp_path)
        raw = tmp_path / "c0.label.raw"
        buf = bytearray(raw.read_bytes())
        buf[3] = 200
        raw.write_bytes(bytes(buf))
        with pytest.raises(ValidationError, match="label value 200"):
            load_sample(path)

    def test_version(self, tmp_path):
        path = save_sample(_sample(), tmp_path)
        path.write_text(path.read_text().replace('"version": 1', '"version": 9'))
        with pytest.raises(LoadError, match="version"):
            load_sample(path)

    def test_validate(self):
        s = _sample()
        with pytest.raises(ValidationError, match="outside"):
            SegSample(s.image * 3, s.label, (), "x").validate()
        with pytest.raises(ValidationError, match="shapes"):
            SegSample(s.image[:4], s.label, (), "x").validate()

    def test_empty_dir(self, tmp_path):
        with pytest.raises(LoadError):
            load_dataset(tmp_path)


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        a = gen_synthetic(tmp_path / "a", 7, 3, size=96)
        b = gen_synthetic(tmp_path / "b", 7, 3, size=96)
        for x, y in zip(a, b):
            assert x.case_id == y.case_id
            assert hashlib.sha256(x.image.tobytes()).digest() == hashlib.sha256(y.image.tobytes()).digest()
            assert np.array_equal(x.label, y.label)
        raw = sorted(p.name for p in (tmp_path / "a").glob("*.raw"))
        for name in raw:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_output(self):
        a, b = gen_synthetic(None, 1, 1, size=64), gen_synthetic(None, 2, 1, size=64)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_loads_back(self, tmp_path):
        gen_synthetic(tmp_path, 3, 2, size=64)
        assert [s.case_id for s in load_dataset(tmp_path)] == ["synth0003_0000", "synth0003_0001"]

    def test_area_band(self):
        samples = gen_synthetic(None, 7, 10)
        fracs = []
        for s in samples:
            assert set(s.organs_present) == set(ORGANS)
            fracs += [(s.label == CLASS_NAMES.index(o)).mean() for o in ORGANS]
        assert 0.02 <= np.mean(fracs) <= 0.20
        assert min(fracs) > 0

    def test_organ_subset(self):
        rng = np.random.default_rng(0)
        s = synth_slice(rng, 96, ["liver", "spleen"], "x")
        assert set(np.unique(s.label)) <= {0, CLASS_NAMES.index("liver"), CLASS_NAMES.index("spleen")}

    def test_unknown_organ(self):
        with pytest.raises(VocabularyError):
            gen_synthetic(None, 0, 1, organs=["heart"], size=64)

    def test_fraction(self):
        samples = gen_synthetic(None, 0, 10, size=32)
        sub = sample_fraction(samples, 0.25, seed=1)
        assert len(sub) == 3
        assert sub == sample_fraction(samples, 0.25, seed=1)
        ids = [s.case_id for s in samples]
        assert [ids.index(s.case_id) for s in sub] == sorted(ids.index(s.case_id) for s in sub)


class TestImport:
    def test_synapse13_remap(self, tmp_path):
        label = np.zeros((4, 4), np.int64)
        label[0, 0], label[1, 1], label[2, 2] = 1, 6, 5  # spleen, liver, esophagus
        np.savez(tmp_path / "case01.npz", image=np.linspace(-100, 300, 16).reshape(4, 4), label=label)
        (s,) = import_external(tmp_path, size=8, label_map="synapse13")
        assert s.image.shape == (8, 8) and 0 <= s.image.min() and s.image.max() <= 1
        assert set(s.organs_present) == {"spleen", "liver"}

    def test_out_of_range(self, tmp_path):
        np.savez(tmp_path / "bad.npz", image=np.zeros((4, 4)), label=np.full((4, 4), 12))
        with pytest.raises(ValidationError):
            import_external(tmp_path, size=4)
