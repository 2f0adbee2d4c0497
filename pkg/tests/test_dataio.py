import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridasr.dataio import (ArkParseError, ArkShapeError, ConsistencyError, DataDir, FeatureStore, IngestionError,
                              TokenTable, build_token_table, dumps_json, load_json, make_json, parse_data_dir,
                              read_text_ark, utt_shape, utt_tokenids, write_data_dir, write_json, write_text_ark)

FIXTURE = Path(__file__).parent / "data" / "fixture3"


def fixture_json():
    d = parse_data_dir(FIXTURE)
    feats = read_text_ark(FIXTURE / "feats.ark")
    table = build_token_table(d.transcripts.values())
    return make_json(d, {u: ("feats.ark", m.shape) for u, m in feats.items()}, table), table


def test_golden_data_json():
    res, _ = fixture_json()
    assert dumps_json(res.data).encode("utf-8") == (FIXTURE / "data.json.golden").read_bytes()


def test_fixture_dir_parses_sorted():
    d = parse_data_dir(FIXTURE)
    assert d.utt_ids == ["utt1", "utt2", "utt3"]
    assert d.source == "feats.scp"
    assert d.transcripts["utt2"] == "BC A"


def test_minimal_dir_and_missing_files(tmp_path):
    (tmp_path / "text").write_text("utt1 AB\n")
    (tmp_path / "wav.scp").write_text("utt1 a.wav\n")
    with pytest.raises(ConsistencyError, match="utt2spk"):
        parse_data_dir(tmp_path)
    (tmp_path / "utt2spk").write_text("utt1 spk1\n")
    d = parse_data_dir(tmp_path)
    assert d.transcripts == {"utt1": "AB"} and d.utt2spk == {"utt1": "spk1"}
    with pytest.raises(IngestionError):
        parse_data_dir(tmp_path / "nope")


def test_orphans_are_listed(tmp_path):
    (tmp_path / "text").write_text("a x\nb y\n")
    (tmp_path / "utt2spk").write_text("a s\n")
    (tmp_path / "wav.scp").write_text("a 1.wav\nb 2.wav\nc 3.wav\n")
    with pytest.raises(ConsistencyError) as e:
        parse_data_dir(tmp_path)
    assert "b" in str(e.value) and "c" in str(e.value)


def test_empty_transcript_allowed_and_roundtrip(tmp_path):
    d = DataDir({"u1": "x.wav", "u2": "y.wav"}, {"u1": "", "u2": "hi there"}, {"u1": "s", "u2": "s"})
    write_data_dir(d, tmp_path)
    back = parse_data_dir(tmp_path)
    assert back.transcripts == d.transcripts and back.utterances == d.utterances


def test_token_table_layout():
    t = build_token_table(["AB", "BC"])
    assert t.tokens == ["<blank>", "<unk>", "A", "B", "C", "<eos>"]
    assert (t.blank, t.unk, t.eos, t.sos, len(t)) == (0, 1, 5, 5, 6)
    assert "<space>" in build_token_table(["A A"]).tokens
    with pytest.raises(IngestionError):
        build_token_table([])


def test_token_count_on_wsj_style_lines():
    lines = [
        "THE SALE OF THE HOTELS", "IS PART OF HOLIDAY'S STRATEGY", "TO SELL OFF ASSETS", "AND CONCENTRATE",
        "ON PROPERTY MANAGEMENT", "BAILEY SAID", "THE COMPANY WILL", "SELL ITS STAKE", "IN THE SUBSIDIARY",
        "FOR ABOUT FORTY MILLION DOLLARS", "ANALYSTS EXPECT", "A RECOVERY", "NEXT YEAR", "PRICES ROSE",
        "SHARPLY IN JUNE", "QUOTE", "UNQUOTE", "PERIOD", "THE DOW FELL 3.5%", "TRADING WAS LIGHT",
    ]
    distinct = set()
    for line in lines:
        distinct.update(line)
    assert len(build_token_table(lines)) == 3 + len(distinct)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abc xyz'", min_size=1, max_size=12), min_size=1, max_size=5))
def test_encode_decode_roundtrip(texts):
    t = build_token_table(texts)
    assert sorted(t.token_to_id.values()) == list(range(len(t)))
    for text in texts:
        assert t.decode(t.encode(text)) == text


def test_unknown_characters_map_to_unk():
    res, table = fixture_json()
    d = DataDir({"x": "f"}, {"x": "AZ"}, {"x": "s"})
    out = make_json(d, {"x": ("f.ark", (3, 2))}, table)
    assert utt_tokenids(out.data["utts"]["x"]) == [3, 1]
    assert out.unk_count == 1 and out.warnings


def test_make_json_schema_example():
    table = build_token_table(["AB", "BC"])
    d = DataDir({"u": "f"}, {"u": "AB"}, {"u": "s"})
    rec = make_json(d, {"u": ("f.ark", (7, 80))}, table).data["utts"]["u"]
    assert rec["input"][0]["shape"] == [7, 80]
    assert rec["output"][0]["shape"] == [2, 6]
    assert utt_tokenids(rec) == [2, 3]
    with pytest.raises(ConsistencyError):
        make_json(d, {}, table)


def test_json_reparse_is_lossless(tmp_path):
    res, table = fixture_json()
    write_json(res.data, tmp_path / "data.json")
    back = load_json(tmp_path / "data.json")
    d = parse_data_dir(FIXTURE)
    feats = read_text_ark(FIXTURE / "feats.ark")
    for u, rec in back["utts"].items():
        assert rec["output"][0]["text"] == d.transcripts[u]
        assert rec["utt2spk"] == d.utt2spk[u]
        assert utt_shape(rec) == feats[u].shape
        assert table.decode(utt_tokenids(rec)) == d.transcripts[u]
        assert " ".join(table.tokens[i] for i in utt_tokenids(rec)) == rec["output"][0]["token"]


def test_token_table_file_roundtrip(tmp_path):
    _, table = fixture_json()
    table.save(tmp_path / "tokens.txt")
    assert (tmp_path / "tokens.txt").read_text().splitlines()[2] == "<space> 2"
    assert TokenTable.load(tmp_path / "tokens.txt").tokens == table.tokens


def test_literal_ark_parse(tmp_path):
    p = tmp_path / "a.ark"
    p.write_text("u1  [\n 1 2\n 3 4 ]\n")
    np.testing.assert_array_equal(read_text_ark(p)["u1"], [[1, 2], [3, 4]])


def test_ark_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.ark"
    p.write_text("u1  [\n 1 2\n 3 ]\n")
    with pytest.raises(ArkShapeError) as e:
        read_text_ark(p)
    assert e.value.lineno == 3
    p.write_text("u1  [\n 1 2\nu2  [\n 1 ]\n")
    with pytest.raises(ArkParseError) as e:
        read_text_ark(p)
    assert e.value.lineno == 3
    p.write_text("u1  [\n 1 2\n")
    with pytest.raises(ArkParseError):
        read_text_ark(p)


def test_ark_roundtrip_5x83(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 83)) * 10
    write_text_ark({"u": m}, tmp_path / "r.ark")
    back = read_text_ark(tmp_path / "r.ark")["u"]
    assert back.shape == (5, 83)
    assert np.max(np.abs(back - m)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_ark_roundtrip_property(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("ark") / "x.ark"
    write_text_ark({"u": m}, p)
    assert np.max(np.abs(read_text_ark(p)["u"] - m)) <= 1e-6


def test_feature_store_reports_missing(tmp_path):
    shutil.copy(FIXTURE / "feats.ark", tmp_path / "f.ark")
    store = FeatureStore()
    assert store.get(tmp_path / "f.ark", "utt3").shape == (1, 2)
    with pytest.raises(IngestionError):
        store.get(tmp_path / "f.ark", "nope")
