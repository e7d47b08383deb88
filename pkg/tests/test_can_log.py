import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from canids.can_log import (MAX_CAN_ID, CanLogError, CanRecord, Flag, decode_id_29bit,
                            dumps_hcrl_csv, encode_id_29bit, encode_ids, parse_hcrl_csv)

SAMPLE = "1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R"


def parse_text(text, **kw):
    return parse_hcrl_csv(io.BytesIO(text.encode()), **kw)


def test_parse_reference_line():
    (rec,), stats = parse_text(SAMPLE + "\n")
    assert rec.can_id == 0x0316
    assert rec.dlc == 8
    assert rec.flag is Flag.NORMAL
    assert rec.data == bytes.fromhex("05216809212100 6f".replace(" ", ""))
    assert rec.timestamp == pytest.approx(1478198376.389427)
    assert (stats.total, stats.normal, stats.injected, stats.skipped) == (1, 1, 0, 0)


def test_injected_label():
    (rec,), stats = parse_text(SAMPLE[:-1] + "T")
    assert rec.flag is Flag.INJECTED
    assert stats.injected == 1


def test_crlf_and_uppercase_hex():
    text = "1.0,043F,2,AB,cd,R\r\n2.0,043f,2,ab,CD,T\r\n"
    recs, stats = parse_text(text)
    assert [r.can_id for r in recs] == [0x43F, 0x43F]
    assert recs[0].data == recs[1].data == b"\xab\xcd"
    assert stats.skipped == 0


def test_short_dlc_both_layouts():
    # fewer data columns
    (a,), _ = parse_text("1.0,0002,2,00,01,R")
    # padded to eight columns
    (b,), _ = parse_text("1.0,0002,2,00,01,00,00,00,00,00,00,R")
    assert a.data == b.data == b"\x00\x01"
    assert a.dlc == b.dlc == 2


def test_attack_free_without_label():
    (rec,), stats = parse_text("1.5,0316,8,05,21,68,09,21,21,00,6f")
    assert rec.flag is Flag.NORMAL
    assert stats.normal == 1


def test_malformed_lines_skipped_and_counted():
    text = "\n".join([
        SAMPLE,
        "garbage",
        "1.0,0316,8,05,21",          # truncated
        "1.0,0316,2,05,21,X",        # unknown label
        SAMPLE[:-1] + "T",
    ])
    recs, stats = parse_text(text)
    assert len(recs) == 2
    assert stats.skipped == 3
    assert stats.total == stats.normal + stats.injected + stats.skipped == 5


def test_strict_mode_reports_line_number():
    with pytest.raises(CanLogError, match="line 2"):
        parse_text(SAMPLE + "\nbroken line\n", strict=True)


def test_id_over_29_bits_is_error():
    with pytest.raises(CanLogError):
        parse_text("1.0,20000000,1,00,R")


def test_dlc_over_8_is_error():
    with pytest.raises(CanLogError):
        parse_text("1.0,0316,9,00,00,00,00,00,00,00,00,00,R")


def test_record_invariants():
    with pytest.raises(CanLogError):
        CanRecord(0.0, 1, 2, b"\x00")
    with pytest.raises(CanLogError):
        CanRecord(0.0, MAX_CAN_ID + 1, 0, b"")


def test_reserialize_round_trip():
    text = ("1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R\n"
            "1478198376.389636,018f,8,fe,5b,00,00,00,3c,00,00,R\n"
            "1478198376.389800,0000,8,00,00,00,00,00,00,00,00,T\n"
            "1478198376.390000,0260,2,19,21,R\n")
    recs, _ = parse_text(text)
    assert dumps_hcrl_csv(recs) == text
    recs2, _ = parse_text(dumps_hcrl_csv(recs))
    assert recs2 == recs


def test_encode_edges():
    assert encode_id_29bit(0).tolist() == [0] * 29
    assert encode_id_29bit(0x1FFFFFFF).tolist() == [1] * 29


def test_encode_0x043f():
    # 0x043F = 1087 = 0b10000111111, left-padded with 18 zeros
    bits = encode_id_29bit(0x043F)
    assert bits.tolist() == [0] * 18 + [1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    assert int("".join(map(str, bits)), 2) == 1087


def test_encode_rejects_out_of_range():
    with pytest.raises(CanLogError):
        encode_id_29bit(1 << 29)
    with pytest.raises(CanLogError):
        encode_id_29bit(-1)


@given(st.integers(min_value=0, max_value=MAX_CAN_ID))
def test_encode_round_trip(x):
    bits = encode_id_29bit(x)
    assert bits.shape == (29,)
    assert set(np.unique(bits)) <= {0, 1}
    assert decode_id_29bit(bits) == x


def test_vectorised_matches_scalar():
    ids = np.array([0, 1, 0x7FF, 0x43F, MAX_CAN_ID, 123456])
    assert np.array_equal(encode_ids(ids), np.stack([encode_id_29bit(i) for i in ids]))


def test_msb_first_preserves_order():
    ids = np.sort(np.random.default_rng(0).integers(0, MAX_CAN_ID, 50))
    as_strings = ["".join(map(str, row)) for row in encode_ids(ids)]
    assert as_strings == sorted(as_strings)
