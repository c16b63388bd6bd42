import json

import pytest
from hypothesis import given, settings, strategies as st

from ropsmith.catalog import (Catalog, analyze, build_catalog, catalog_from_image, parse_pattern,
                              query, roundtrip)
from ropsmith.errors import ParseError, VersionMismatch

from conftest import catalog_of, gadgets_at, image_of

# two adders with a popped side register, a clean adder, a single pop
# and a triple pop
ADDERS = ["4801d85ac3", "4801d859c3", "4801cac3", "58c3", "585b59c3"]

FIVE_FIELDS = {"semantic_description", "va", "machine_instructions", "parameters", "side_effects"}


@pytest.fixture(scope="module")
def adders():
    return catalog_of(ADDERS)


def test_adder_group(adders):
    adders = [e for e in adders.groups["ArithmeticG"] if e["op"] == "+" and e["dst"] == e["src1"]]
    rows = sorted((e.va, e["dst"], e["src2"], tuple(sorted(e.clobbers))) for e in adders)
    va = [g.va for g in gadgets_at(ADDERS)]
    assert rows == [(va[0], "rax", "rbx", ("rdx",)),
                    (va[1], "rax", "rbx", ("rcx",)),
                    (va[2], "rdx", "rcx", ())]
    assert all(e.semantic_description == "dst <- src1 op src2" for e in adders)


def test_stack_loads(adders):
    pops = {(e.va, e["dst"], e["offset"]) for e in adders.groups["LoadConstG"]}
    va = [g.va for g in gadgets_at(ADDERS)]
    assert (va[3], "rax", 0) in pops
    assert {(va[4], "rax", 0), (va[4], "rbx", 8), (va[4], "rcx", 16)} <= pops


def test_entries_are_verified_and_eligible(adders):
    assert all(e.verification == "Verified" for e in adders.entries)
    assert len(adders.eligible()) == len(adders)


def test_store_through_unsettable_register_is_flagged():
    cat = catalog_of(["488919c3", "58c3"])          # mov [rcx], rbx with no way to set rcx
    (store,) = cat.groups["StoreMemG"]
    assert store.unknown_side_effect and not store.compile_eligible
    assert store not in cat.eligible()
    cat = catalog_of(["488919c3", "59c3"])          # now pop rcx exists
    (store,) = cat.groups["StoreMemG"]
    assert store.compile_eligible


def test_empty_input():
    cat = build_catalog([])
    assert len(cat) == 0 and cat.groups == {}
    assert roundtrip(cat) == cat


def test_refuted_and_unverified_dropped():
    g = gadgets_at(["48f7d84819c04821c85dc3"])
    cat = build_catalog(analyze(g))
    assert not any(e.gtype == "MoveRegG" for e in cat.entries)
    assert cat.stats["refuted"] == 1


def test_query_ordering():
    cat = catalog_of(["4801d85fc3", "5f5ec3", "5fc3", "5fc20800"])
    got = query(cat, "LoadConstG(dst=rdi, offset=*)")
    assert got[0].text == "pop rdi ; ret"
    assert [(e.n_insns, e.frame.frame_size) for e in got] == sorted(
        (e.n_insns, e.frame.frame_size) for e in got)
    assert query(cat, "LoadConstG", dst="rdi", offset=None) == got


def test_query_movers_and_absent_type():
    cat = catalog_of(["4889c8c3", "4889d8c3", "4889c3c3", "58c3"])
    movers = query(cat, "MoveRegG(dst=rax, src=*)")
    assert sorted(e["src"] for e in movers) == ["rbx", "rcx"]
    assert query(cat, "SyscallG") == []
    assert query(cat, "MoveRegG(dst=rdi)") == []


def test_parse_pattern():
    assert parse_pattern("LoadConstG(dst=rdi, offset=*)") == ("LoadConstG", {"dst": "rdi"})
    assert parse_pattern("ArithmeticG(op=+, src2=0x10)") == ("ArithmeticG", {"op": "+", "src2": 16})
    with pytest.raises(ValueError):
        parse_pattern("LoadConstG(dst)")


def test_roundtrip_identity(adders):
    again = roundtrip(adders)
    assert again == adders
    assert [e.order_key() for e in again.entries] == [e.order_key() for e in adders.entries]


def test_version_mismatch(adders):
    doc = json.loads(adders.dumps())
    doc["schema_version"] += 1
    with pytest.raises(VersionMismatch):
        Catalog.loads(json.dumps(doc))


def test_truncated_file(adders, tmp_path):
    text = adders.dumps()
    with pytest.raises(ParseError):
        Catalog.loads(text[: len(text) // 2])
    path = tmp_path / "cat.json"
    path.write_text(text[:100])
    with pytest.raises(ParseError):
        Catalog.load(path)


def test_serialized_entries_carry_five_fields(adders):
    doc = json.loads(adders.dumps())
    assert set(doc) >= {"schema_version", "provenance", "bad_bytes", "groups"}
    for grp in doc["groups"]:
        for e in grp["entries"]:
            assert FIVE_FIELDS <= set(e)
            assert e["va_hex"] == hex(e["va"])


def test_bad_byte_filter():
    gadgets = gadgets_at(["58c3", "5fc3", "5ec3", "5ac3"], base=0x4141410A00)
    bad = frozenset({0x0A})
    cat = build_catalog(analyze(gadgets), bad)
    assert len(cat) == 0 and cat.stats["bad_address"] == 4
    gadgets = gadgets_at(["58c3", "5fc3"] * 8, base=0x4141414141414100 - 6)
    cat = build_catalog(analyze(gadgets), frozenset({0x00, 0x0A, 0x41}))
    for e in cat.entries:
        assert not set(e.va.to_bytes(8, "little")) & {0x00, 0x0A, 0x41}


@settings(max_examples=30, deadline=None)
@given(st.frozensets(st.integers(0, 255), max_size=6), st.integers(0x400000, 0x4000FF))
def test_bad_byte_filter_property(bad, base):
    cat = build_catalog(analyze(gadgets_at(["58c3", "5fc3", "4801d8c3"], base=base)), bad)
    for e in cat.entries:
        assert not set(e.va.to_bytes(8, "little")) & bad


def test_provenance_recorded():
    img = image_of(bytes.fromhex("5fc358c3"))
    cat = catalog_from_image(img)
    assert cat.provenance["sha256"] == img.sha256
    assert cat.provenance["scan"]["max_insns"] == 5
    assert roundtrip(cat).provenance == cat.provenance


def test_query_order_total_and_deterministic(adders):
    keys = [e.order_key() for e in adders.entries]
    assert len(set(keys)) == len(keys)
    assert keys == sorted(keys)
