import json
import struct
import warnings
from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings, strategies as st

from glam.io import (CKPT_MAGIC, FormatError, ManifestError, ManifestRecord, decode_checkpoint,
                     decode_pgm, encode_checkpoint, encode_pgm, load_checkpoint, load_dataset,
                     module_registry, parse_manifest, quantize, read_image, read_manifest,
                     read_pgm, read_saliency, save_checkpoint, write_dataset, write_image,
                     write_manifest, write_mask, write_pgm, write_saliency, read_mask)
from glam.synthdata import SynthConfig, generate

FUZZ = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def mutate(data: bytes, rng) -> bytes:
    buf = bytearray(data)
    op = rng.integers(4)
    if op == 0 and buf:
        buf[rng.integers(len(buf))] = int(rng.integers(256))
    elif op == 1:
        del buf[rng.integers(len(buf) + 1):]
    elif op == 2:
        buf[rng.integers(len(buf) + 1):rng.integers(len(buf) + 1)] = rng.bytes(int(rng.integers(1, 8)))
    elif buf:
        i = int(rng.integers(len(buf)))
        del buf[i:i + int(rng.integers(1, 6))]
    return bytes(buf)


# ------------------------------------------------------------------------- PGM

class TestPGM:
    @given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([255, 65535]), st.integers(0, 2 ** 32 - 1))
    @FUZZ
    def test_round_trip(self, h, w, maxval, seed):
        rng = np.random.default_rng(seed)
        px = rng.integers(0, maxval + 1, (h, w)).astype(np.uint16 if maxval > 255 else np.uint8)
        data = encode_pgm(px, maxval)
        back, m = decode_pgm(data)
        assert m == maxval and back.dtype == px.dtype and np.array_equal(back, px)
        assert encode_pgm(back, m) == data

    def test_file_round_trip_identical_bytes(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (13, 7)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", px)
        back, _ = read_pgm(tmp_path / "a.pgm")
        write_pgm(tmp_path / "b.pgm", back)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_sixteen_bit_big_endian(self):
        data = encode_pgm(np.array([[258]], np.uint16), 65535)
        assert data.endswith(b"\x01\x02")

    def test_comments_and_whitespace(self):
        data = b"P5\n# made by hand\n3 # width\n 1\n255\n\x01\x02\x03"
        px, m = decode_pgm(data)
        assert px.tolist() == [[1, 2, 3]] and m == 255

    def test_saliency_scaling(self, tmp_path):
        write_saliency(tmp_path / "s.pgm", np.array([[0.0, 0.5, 1.0]]))
        px, m = read_pgm(tmp_path / "s.pgm")
        assert m == 65535 and px.tolist() == [[0, 32768, 65535]]
        assert quantize(np.array([0.5]), 65535)[0] == 32768

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_quantization_error(self, seed):
        v = np.random.default_rng(seed).random((4, 5))
        assert np.max(np.abs(quantize(v, 255) / 255 - v)) <= 1 / 510 + 1e-15
        assert np.max(np.abs(quantize(v, 65535) / 65535 - v)) <= 1 / 131070 + 1e-15

    def test_image_mask_saliency_files(self, tmp_path):
        rng = np.random.default_rng(1)
        img, mask, sal = rng.random((1, 6, 4)), rng.random((6, 4)) > 0.5, rng.random((6, 4))
        write_image(tmp_path / "i.pgm", img)
        write_mask(tmp_path / "m.pgm", mask)
        write_saliency(tmp_path / "s.pgm", sal)
        assert np.max(np.abs(read_image(tmp_path / "i.pgm") - img[0])) <= 1 / 510 + 1e-15
        assert np.array_equal(read_mask(tmp_path / "m.pgm"), mask)
        assert set(np.unique(read_pgm(tmp_path / "m.pgm")[0])) <= {0, 255}
        assert np.max(np.abs(read_saliency(tmp_path / "s.pgm") - sal)) <= 1 / 131070 + 1e-15

    @pytest.mark.parametrize("data,offset", [
        (b"P6\n1 1\n255\n\x00", 0),
        (b"P5\n1 1\n255\n", 11),
        (b"P5\n2 1\n255\n\x00", 12),
        (b"P5\n1 1\n255\n\x00\x00", 12),
        (b"P5\nx 1\n255\n\x00", 3),
        (b"P5 1 1 255", 10),
        (b"P5\n0 1\n255\n", 3),
        (b"P5\n1 1\n70000\n\x00\x00", 7),
        (b"P5\n1 1\n100\n\xff", 11),
        (b"P51 1 255\n\x00", 2),
    ])
    def test_malformed_offsets(self, data, offset):
        with pytest.raises(FormatError) as err:
            decode_pgm(data)
        assert err.value.offset == offset
        assert f"byte {offset}" in str(err.value)

    @given(st.integers(0, 2 ** 32 - 1))
    @FUZZ
    def test_fuzzed_never_crashes(self, seed):
        rng = np.random.default_rng(seed)
        maxval = [255, 65535][seed % 2]
        px = rng.integers(0, maxval + 1, (int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        data = mutate(encode_pgm(px, maxval), rng)
        try:
            out, m = decode_pgm(data)
        except FormatError:
            return
        assert out.ndim == 2 and out.max(initial=0) <= m

    def test_write_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            encode_pgm(np.array([[300]]), 255)


# -------------------------------------------------------------------- manifest

text_st = st.text(min_size=1, max_size=20)
json_scalar = st.one_of(st.none(), st.booleans(), st.integers(-10 ** 6, 10 ** 6),
                        st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=10))


@st.composite
def records(draw):
    lm, lb = draw(st.integers(0, 1)), draw(st.integers(0, 1))
    extra_keys = draw(st.lists(text_st.filter(lambda k: k not in (
        "id", "image_path", "label_malignant", "label_benign", "mask_malignant_path",
        "mask_benign_path", "split")), max_size=3, unique=True))
    return ManifestRecord(draw(text_st), draw(text_st), lm, lb,
                          draw(st.sampled_from(["train", "val", "test"])),
                          draw(text_st) if lm else None, draw(text_st) if lb else None,
                          {k: draw(json_scalar) for k in extra_keys})


class TestManifest:
    @given(st.lists(records(), max_size=5))
    @FUZZ
    def test_round_trip(self, recs):
        text = "\n".join(json.dumps(r.to_json(), ensure_ascii=False) for r in recs)
        assert parse_manifest(text) == recs

    def test_thousand_records(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = []
        for i in range(1000):
            lm, lb = (int(x) for x in rng.integers(0, 2, 2))
            recs.append(ManifestRecord(f"ex-{i}", f"images/{i}.pgm", lm, lb,
                                       ["train", "val", "test"][i % 3],
                                       f"masks/{i}_m.pgm" if lm else None,
                                       f"masks/{i}_b.pgm" if lb else None,
                                       {"site": f"s{i % 7}"} if i % 5 == 0 else {}))
        write_manifest(tmp_path / "m.jsonl", recs)
        assert read_manifest(tmp_path / "m.jsonl") == recs

    def test_unknown_fields_preserved(self, tmp_path):
        line = {"id": "a", "image_path": "a.pgm", "label_malignant": 0, "label_benign": 0,
                "split": "val", "note": {"x": [1, 2]}}
        (tmp_path / "m.jsonl").write_text(json.dumps(line) + "\n")
        recs = read_manifest(tmp_path / "m.jsonl")
        assert recs[0].extra == {"note": {"x": [1, 2]}}
        write_manifest(tmp_path / "n.jsonl", recs)
        assert json.loads((tmp_path / "n.jsonl").read_text()) == line

    def test_line_separator_inside_string(self):
        rec = ManifestRecord("a b", "x\x85.pgm", 0, 0, "train")
        assert parse_manifest(json.dumps(rec.to_json(), ensure_ascii=False)) == [rec]

    def test_empty(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert read_manifest(tmp_path / "m.jsonl") == []

    @pytest.mark.parametrize("mutation,line,field", [
        ({"label_malignant": 1}, 2, "mask_malignant_path"),
        ({"label_benign": 2}, 2, "label_benign"),
        ({"label_benign": True}, 2, "label_benign"),
        ({"split": "dev"}, 2, "split"),
        ({"id": ""}, 2, "id"),
        ({"mask_benign_path": "x.pgm"}, 2, "mask_benign_path"),
    ])
    def test_schema_errors(self, mutation, line, field):
        ok = {"id": "a", "image_path": "a.pgm", "label_malignant": 0, "label_benign": 0, "split": "train"}
        bad = dict(ok, **mutation)
        with pytest.raises(ManifestError) as err:
            parse_manifest(json.dumps(ok) + "\n" + json.dumps(bad))
        assert (err.value.line, err.value.field) == (line, field)
        assert f"line {line}" in str(err.value) and field in str(err.value)

    def test_missing_file(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [ManifestRecord("a", "nope.pgm", 0, 0, "train")])
        with pytest.raises(ManifestError, match="image_path"):
            read_manifest(tmp_path / "m.jsonl", check_paths=True)

    def test_not_utf8(self, tmp_path):
        (tmp_path / "m.jsonl").write_bytes(b'{"id": "\xff"}\n')
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.jsonl")

    @given(st.integers(0, 2 ** 32 - 1))
    @FUZZ
    def test_fuzzed_never_crashes(self, seed):
        rng = np.random.default_rng(seed)
        rec = ManifestRecord("a", "a.pgm", 1, 0, "test", "m.pgm", extra={"k": [1, "z"]})
        data = mutate((json.dumps(rec.to_json()) + "\n").encode(), rng)
        try:
            parse_manifest(data.decode("utf-8", errors="replace"))
        except ManifestError:
            pass

    def test_deep_nesting(self):
        with pytest.raises(ManifestError):
            parse_manifest("[" * 100000)


def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(64, 64, n_train=4, n_val=2, n_test=2, radius_frac=(0.05, 0.08),
                      area_budget=0.05, p_malignant=0.5, p_benign=0.5)
    splits = generate(cfg)
    manifest = write_dataset(splits, tmp_path)
    back = load_dataset(manifest)
    for split in splits:
        for a, b in zip(splits[split], back[split]):
            assert a.id == b.id and a.labels == b.labels
            assert np.array_equal(a.pixels, b.pixels)
            for ma, mb in zip(a.masks, b.masks):
                assert (ma is None and mb is None) or np.array_equal(ma, mb)


# ------------------------------------------------------------------ checkpoint

@st.composite
def entry_sets(draw):
    n = draw(st.integers(0, 5))
    names = draw(st.lists(st.text(min_size=1, max_size=12), min_size=n, max_size=n, unique=True))
    out = OrderedDict()
    for name in names:
        shape = draw(st.lists(st.integers(0, 4), max_size=4))
        seed = draw(st.integers(0, 2 ** 32 - 1))
        bits = np.random.default_rng(seed).integers(0, 2 ** 32, size=shape, dtype=np.uint32)
        out[name] = bits.view("<f4")  # every bit pattern, NaNs included
    return out


class TestCheckpoint:
    @given(entry_sets(), st.text(max_size=8), st.text(max_size=64))
    @FUZZ
    def test_bit_exact_round_trip(self, entries, stage, digest):
        ckpt = decode_checkpoint(encode_checkpoint(entries, stage, digest))
        assert ckpt.stage == stage and ckpt.config_digest == digest
        assert list(ckpt.entries) == list(entries)
        for name, value in entries.items():
            assert ckpt.entries[name].shape == value.shape
            assert ckpt.entries[name].tobytes() == value.tobytes()

    def test_registry_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = torch.nn.Sequential(torch.nn.Conv2d(1, 3, 3), torch.nn.BatchNorm2d(3), torch.nn.Linear(4, 2))
        reg = module_registry({"net": net})
        assert "net/0/weight" in reg and "net/1/running_mean" in reg
        save_checkpoint(tmp_path / "c.ckpt", reg, "stage1", "abc")
        other = torch.nn.Sequential(torch.nn.Conv2d(1, 3, 3), torch.nn.BatchNorm2d(3), torch.nn.Linear(4, 2))
        ckpt = load_checkpoint(tmp_path / "c.ckpt", module_registry({"net": other}), "abc")
        assert not ckpt.digest_mismatch and ckpt.stage == "stage1"
        for (_, a), (_, b) in zip(net.state_dict().items(), other.state_dict().items()):
            assert torch.equal(a, b)
        assert (tmp_path / "c.ckpt").read_bytes()[:8] == CKPT_MAGIC

    def test_missing_name(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"a": torch.zeros(2)}, "s", "d")
        with pytest.raises(KeyError, match="b/weight"):
            load_checkpoint(tmp_path / "c.ckpt", {"a": torch.zeros(2), "b/weight": torch.zeros(1)})

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"a": torch.zeros(2)}, "s", "d")
        with pytest.raises(ValueError, match="a"):
            load_checkpoint(tmp_path / "c.ckpt", {"a": torch.zeros(3)})

    def test_digest_mismatch_warns(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"a": torch.ones(2)}, "s", "digest-one")
        target = torch.zeros(2)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ckpt = load_checkpoint(tmp_path / "c.ckpt", {"a": target}, "digest-two")
        assert ckpt.digest_mismatch and caught
        assert torch.equal(target, torch.ones(2))

    def test_bad_magic_and_version(self):
        good = encode_checkpoint({"a": np.zeros(1, "<f4")}, "s", "d")
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + good[8:])
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(good[:8] + struct.pack("<I", 2) + good[12:])

    def test_huge_declared_shape(self):
        body = CKPT_MAGIC + struct.pack("<IH", 1, 0) + struct.pack("<H", 0) + struct.pack("<I", 1)
        body += struct.pack("<H", 1) + b"a" + struct.pack("<B", 8) + struct.pack("<8I", *([2 ** 32 - 1] * 8))
        with pytest.raises(FormatError, match="truncated"):
            decode_checkpoint(body)

    @given(st.integers(0, 2 ** 32 - 1))
    @FUZZ
    def test_fuzzed_never_crashes(self, seed):
        rng = np.random.default_rng(seed)
        entries = OrderedDict(w=rng.random((2, 3)).astype("<f4"), b=rng.random(3).astype("<f4"))
        data = mutate(encode_checkpoint(entries, "stage3", "0123abcd"), rng)
        try:
            decode_checkpoint(data)
        except FormatError:
            pass
