import json

import pytest

from wmnseg import taxonomy


def test_codes_are_fixed_and_complete():
    assert taxonomy.N_STRUCTURES == 12
    assert taxonomy.N_CLASSES == 13
    assert taxonomy.CODES == tuple(range(1, 13))
    assert taxonomy.code_of("VLp") == 4
    assert taxonomy.structure(12).abbrev == "MTT"


def test_group_membership():
    assert [s.abbrev for s in taxonomy.members("anterior")] == ["AV"]
    assert {s.abbrev for s in taxonomy.members("lateral")} == {"VA", "VLa", "VLp", "VPl"}
    assert {s.abbrev for s in taxonomy.members("posterior")} == {"Pul", "LGN", "MGN"}
    assert {s.abbrev for s in taxonomy.members("medial")} == {"CM", "MD", "Hb"}
    assert taxonomy.group_of(12) == "others"
    assert "others" not in taxonomy.NUCLEI_GROUPS


def test_unknown_codes_rejected():
    with pytest.raises(KeyError):
        taxonomy.group_of(0)
    with pytest.raises(KeyError):
        taxonomy.structure("XYZ")


def test_json_roundtrip(tmp_path):
    p = tmp_path / "tax.json"
    taxonomy.to_json(p)
    d = json.loads(p.read_text())
    assert [s["code"] for s in d] == list(range(1, 13))
