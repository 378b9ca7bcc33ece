import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apnea_ecg import wfdb_io
from apnea_ecg.feature_extract import FeatureSegment
from apnea_ecg.wfdb_io import (
    EcgRecord, FeatureFileError, HeaderInfo, SignalSpec, WfdbError, decode_counts,
    decode_samples, encode_counts, parse_apnea_annotations, parse_header, write_header,
)

APNEA_ECG_STYLE = b"a01 1 100 2957000\na01.dat 16 200 12 0 -12 -22438 0 ECG\n"


def bitwise_212(data: bytes, n: int) -> list[int]:
    """Decode fmt 212 via an explicit bit string, one sample at a time."""
    out = []
    for k in range(n):
        b0, b1, b2 = (data[3 * (k // 2) + j] if 3 * (k // 2) + j < len(data) else 0 for j in range(3))
        bits1 = format(b1, "08b")
        if k % 2 == 0:
            bits = bits1[4:] + format(b0, "08b")
        else:
            bits = bits1[:4] + format(b2, "08b")
        v = int(bits, 2)
        out.append(v - 4096 if bits[0] == "1" else v)
    return out


def test_parse_header_fields():
    info = parse_header(b"rec 1 100 6000\nrec.dat 212 200 12 0 0 0 0 ECG\n")
    assert (info.fs, info.n_sig, info.gain, info.fmt, info.n_samples) == (100, 1, 200, 212, 6000)


def test_parse_header_apnea_ecg_layout():
    info = parse_header(APNEA_ECG_STYLE)
    assert info.fmt == 16 and info.gain == 200 and info.n_samples == 2957000
    assert info.signals[0].baseline == 0
    assert info.signals[0].description == "ECG"


def test_parse_header_baseline_and_units():
    info = parse_header("r 1 250\nr.dat 212 400(-3)/uV 12 5\n")
    s = info.signals[0]
    assert (s.gain, s.baseline, s.units, s.adc_zero) == (400, -3, "uV", 5)


@pytest.mark.parametrize("text", [
    "rec 1 100\nrec.dat 61 200\n",
    "rec 1 100\nrec.dat 80 200\n",
])
def test_unsupported_format(text):
    with pytest.raises(WfdbError, match="unsupported"):
        parse_header(text)


@pytest.mark.parametrize("text", ["", "rec\n", "rec x 100\n", "rec 2 100\nrec.dat 16\n", "rec 1 100\nrec.dat 212 abc\n"])
def test_malformed_header(text):
    with pytest.raises(WfdbError):
        parse_header(text)


def test_header_round_trip():
    info = HeaderInfo("syn", 1, 100.0, 1234, (SignalSpec("syn.dat", 212, 200.0, 0, "mV", 12, 0, 7, 99, 0, "ECG"),))
    assert parse_header(write_header(info)) == info


def test_decode_212_example_bytes():
    data = bytes([0xE8, 0x03, 0x7D])
    assert bitwise_212(data, 2) == [1000, 125]
    assert decode_counts(data, 212, 2).tolist() == [1000, 125]


def test_decode_all_zero():
    info = parse_header("z 1 100 10\nz.dat 212 200\n")
    assert np.array_equal(decode_samples(bytes(15), info), np.zeros(10))


def test_decode_applies_gain_once():
    counts = np.array([200, -400, 100, 0])
    info = parse_header("g 1 100 4\ng.dat 16 200\n")
    assert decode_samples(encode_counts(counts, 16), info).tolist() == [1.0, -2.0, 0.5, 0.0]


def test_truncated_payload():
    with pytest.raises(WfdbError, match="truncated"):
        decode_counts(bytes(5), 212, 4)
    with pytest.raises(WfdbError):
        decode_counts(bytes(7), 16, 4)


def test_length_mismatch():
    with pytest.raises(WfdbError, match="does not match"):
        decode_counts(bytes(9), 212, 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-2048, 2047), max_size=301))
def test_212_round_trip_and_bitwise_oracle(values):
    data = encode_counts(values, 212)
    assert decode_counts(data, 212, len(values)).tolist() == values
    assert bitwise_212(data, len(values)) == values


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-32768, 32767), max_size=301))
def test_16_round_trip(values):
    assert decode_counts(encode_counts(values, 16), 16, len(values)).tolist() == values


def test_annotation_markers():
    data = wfdb_io.write_annotations([(0, 8), (6000, 1), (12000, 1), (18000, 8)])
    assert parse_apnea_annotations(data).tolist() == [1, 0, 0, 1]


def test_empty_annotation_stream():
    assert parse_apnea_annotations(b"").tolist() == []
    assert parse_apnea_annotations(b"\x00\x00").tolist() == []


def test_unknown_annotation_symbol():
    with pytest.raises(WfdbError, match="unknown"):
        parse_apnea_annotations(wfdb_io.write_annotations([(0, 8), (6000, 5)]))


def test_non_monotonic_annotations():
    with pytest.raises(WfdbError, match="non-monotonic"):
        parse_apnea_annotations(wfdb_io.write_annotations([(0, 8), (6000, 1), (3000, 1)]))


def test_annotation_aux_and_num_words_skipped():
    # AUX with 3 bytes (padded to 4) and a NUM word between two markers
    raw = bytearray(wfdb_io.write_annotations([(0, 1)]))[:-2]
    raw += ((63 << 10) | 3).to_bytes(2, "little") + b"abc\x00"
    raw += ((60 << 10) | 1).to_bytes(2, "little")
    raw += bytearray(wfdb_io.write_annotations([(6000, 8)]))[:0]
    raw += (59 << 10).to_bytes(2, "little") + (0).to_bytes(2, "little", signed=True) + (6000).to_bytes(2, "little")
    raw += (8 << 10).to_bytes(2, "little") + b"\x00\x00"
    assert parse_apnea_annotations(bytes(raw)).tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=600))
def test_label_count_matches_markers(labels):
    out = parse_apnea_annotations(wfdb_io.write_apnea_annotations(labels, 100))
    assert out.tolist() == labels
    assert set(out.tolist()) <= {0, 1}


def test_record_round_trip(tmp_path, labeled_record):
    rec, _ = labeled_record
    wfdb_io.write_record(tmp_path, rec, fmt=212)
    back = wfdb_io.load_record(tmp_path, rec.record_id)
    assert back.fs == rec.fs
    assert back.labels.tolist() == rec.labels.tolist()
    # 12-bit quantisation at gain 200 -> 2.5 uV steps
    assert np.max(np.abs(back.samples - rec.samples)) <= 0.5 / 200 + 1e-12
    again = wfdb_io.load_record(tmp_path, rec.record_id)
    assert np.array_equal(again.samples, back.samples)


def test_labels_past_signal_end_dropped(tmp_path):
    rec = EcgRecord("short", 100, np.zeros(6500), [1, 0])
    wfdb_io.write_record(tmp_path, rec)
    (tmp_path / "short.apn").write_bytes(wfdb_io.write_apnea_annotations([1, 0, 1, 1], 100))
    assert wfdb_io.load_record(tmp_path, "short").labels.tolist() == [1, 0]


def test_record_label_invariant():
    with pytest.raises(ValueError):
        EcgRecord("r", 100, np.zeros(6000), [0, 1])


def test_dataset_split():
    split = wfdb_io.DatasetSplit()
    assert len(split.train_records) == 35 and len(split.test_records) == 35
    assert not set(split.train_records) & set(split.test_records)
    with pytest.raises(ValueError):
        wfdb_io.DatasetSplit(("a01",), ("a01",))


def _random_segments(rng, n, n_channels=4):
    return [FeatureSegment(f"r{i % 3:02d}", i, int(rng.integers(0, 2)), rng.normal(size=(n_channels, 900)),
                           int(rng.integers(4, 500)), rng.normal(size=n_channels), rng.random(n_channels))
            for i in range(n)]


def test_feature_file_round_trip(tmp_path, rng):
    segs = _random_segments(rng, 10)
    path = tmp_path / "f.apnf"
    wfdb_io.write_feature_file(path, segs)
    back = wfdb_io.read_feature_file(path)
    assert back == segs
    for a, b in zip(segs, back):
        assert a.channels.tobytes() == b.channels.tobytes()
    first = path.read_bytes()
    wfdb_io.write_feature_file(path, segs)
    assert path.read_bytes() == first


def test_feature_file_empty(tmp_path):
    path = tmp_path / "e.apnf"
    wfdb_io.write_feature_file(path, [])
    assert wfdb_io.read_feature_file(path) == []


def test_feature_file_checksum(tmp_path, rng):
    path = tmp_path / "c.apnf"
    wfdb_io.write_feature_file(path, _random_segments(rng, 2))
    data = bytearray(path.read_bytes())
    data[40] ^= 0xFF
    with pytest.raises(FeatureFileError, match="checksum"):
        wfdb_io.read_feature_bytes(bytes(data))


def test_feature_file_version(rng):
    data = bytearray(wfdb_io.write_feature_bytes(_random_segments(rng, 1)))
    data[4] = 9
    import struct
    import zlib
    data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
    with pytest.raises(FeatureFileError, match="version"):
        wfdb_io.read_feature_bytes(bytes(data))


def test_feature_csv_export(tmp_path, rng):
    segs = _random_segments(rng, 2, n_channels=2)
    path = tmp_path / "f.csv"
    wfdb_io.export_feature_csv(path, segs)
    lines = path.read_text().splitlines()
    assert lines[0] == "segment_id,label,channel,idx,value"
    assert len(lines) == 1 + 2 * 2 * 900
    sid, lab, ch, idx, val = lines[1].split(",")
    assert sid == "r00:0" and int(ch) == 0 and int(idx) == 0
    assert float(val) == segs[0].channels[0, 0]
