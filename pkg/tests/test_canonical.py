import pytest

from ans.canonical import canonical_bytes, canonical_json


def test_keys_sorted_and_compact():
    assert canonical_json({"z": 1, "a": 2, "m": [1, {"y": 0, "x": 1}]}) == \
        '{"a":2,"m":[1,{"x":1,"y":0}],"z":1}'


def test_construction_order_is_irrelevant():
    first = {"serial": 1, "role": "agent"}
    second = {"role": "agent", "serial": 1}
    assert canonical_bytes(first) == canonical_bytes(second)


def test_bytes_render_as_lowercase_hex():
    assert canonical_json({"sig": b"\xde\xad\xbe\xef"}) == '{"sig":"deadbeef"}'


def test_determinism():
    doc = {"a": [1, 2, 3], "b": {"c": b"\x00\xff", "d": None, "e": True}}
    assert canonical_bytes(doc) == canonical_bytes(doc)


def test_floats_rejected():
    with pytest.raises(TypeError):
        canonical_json({"x": 1.5})


def test_non_string_keys_rejected():
    with pytest.raises(TypeError):
        canonical_json({1: "x"})
