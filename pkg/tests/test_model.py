"""Core model: codec round trips, harmonization, validation, scopes."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmesh.errors import InvariantViolation, MalformedJson, SynonymCollision
from ctxmesh.model import (
    ContextAttribute,
    ContextElement,
    DataModel,
    EntityRef,
    GeoBox,
    Metadatum,
    StringMatch,
    builtin_models,
    canonical_dumps,
    decode_element,
    encode_element,
    harmonize,
    load_models_dir,
    scope_from_wire,
    scope_matches,
    validate,
)

# -- strategies ---------------------------------------------------------------

_token = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="-_:."),
    min_size=1, max_size=12,
)
_json_scalar = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-10**9, max_value=10**9),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=20),
)
_json_value = st.recursive(
    _json_scalar,
    lambda children: st.one_of(
        st.lists(children, max_size=4),
        st.dictionaries(st.text(max_size=8), children, max_size=4),
    ),
    max_leaves=8,
)


@st.composite
def elements(draw) -> ContextElement:
    entity = EntityRef(draw(_token), draw(_token))
    names = draw(st.lists(_token, max_size=4, unique=True))
    attrs = []
    for name in names:
        md_names = draw(st.lists(_token, max_size=2, unique=True))
        metadata = tuple(Metadatum(m, draw(_token), draw(_json_value)) for m in md_names)
        attrs.append(ContextAttribute(name, draw(_token), draw(_json_value), metadata))
    return ContextElement(entity, tuple(attrs))


# -- codec ---------------------------------------------------------------------

def test_encode_empty_element_matches_schema():
    e = ContextElement(EntityRef("e1", "T"), ())
    assert encode_element(e) == b'{"attributes":[],"entity":{"id":"e1","isPattern":false,"type":"T"}}'


def test_encode_metadata_schema():
    e = ContextElement(
        EntityRef("e1", "T"),
        (ContextAttribute("temperature", "number", 21.5,
                          (Metadatum("unit", "string", "cel"),)),),
    )
    assert b'"metadata":[{"name":"unit","type":"string","value":"cel"}]' in encode_element(e)


@settings(max_examples=200, deadline=None)
@given(elements())
def test_roundtrip(e):
    assert decode_element(encode_element(e)) == e


@settings(max_examples=50, deadline=None)
@given(elements())
def test_canonical_encoding_deterministic(e):
    assert encode_element(e) == encode_element(decode_element(encode_element(e)))


def test_decode_rejects_empty_id():
    raw = b'{"attributes":[],"entity":{"id":"","isPattern":false,"type":"T"}}'
    with pytest.raises(InvariantViolation) as err:
        decode_element(raw)
    assert "id" in err.value.field


def test_decode_rejects_truncated_json():
    with pytest.raises(MalformedJson):
        decode_element(b'{"attributes":[')


def test_decode_rejects_duplicate_attributes():
    raw = (b'{"attributes":[{"metadata":[],"name":"a","type":"t","value":1},'
           b'{"metadata":[],"name":"a","type":"t","value":2}],'
           b'"entity":{"id":"e","isPattern":false,"type":"T"}}')
    with pytest.raises(InvariantViolation):
        decode_element(raw)


def test_decode_rejects_unknown_keys():
    raw = b'{"attributes":[],"entity":{"id":"e","isPattern":false,"type":"T"},"bogus":1}'
    with pytest.raises(InvariantViolation):
        decode_element(raw)


def test_decode_rejects_pattern_entity():
    raw = b'{"attributes":[],"entity":{"id":".*","isPattern":true,"type":"T"}}'
    with pytest.raises(InvariantViolation):
        decode_element(raw)


def test_entity_ref_rejects_whitespace_and_bad_regex():
    with pytest.raises(InvariantViolation):
        EntityRef("a b", "T")
    with pytest.raises(InvariantViolation):
        EntityRef("[", "T", is_pattern=True)


def test_duplicate_metadata_rejected():
    with pytest.raises(InvariantViolation):
        ContextAttribute("a", "t", 1, (Metadatum("unit", "s", "x"), Metadatum("unit", "s", "y")))


def test_non_finite_float_rejected():
    with pytest.raises(InvariantViolation):
        ContextAttribute("a", "number", float("inf"))


# -- harmonization ---------------------------------------------------------------

MODEL = DataModel(
    "WeatherObserved",
    (("temperature", "number"), ("location", "geo:point")),
    {"position": "location", "geolocation": "location", "posizione": "location",
     "temp": "temperature"},
)


def _attr(name, value=1, type_="number"):
    return ContextAttribute(name, type_, value)


def test_harmonize_renames_synonym():
    e = ContextElement(EntityRef("e", "W"), (_attr("position", [1.0, 2.0], "geo:point"),))
    out = harmonize(e, MODEL)
    assert out.attribute("location") is not None
    assert out.attribute("location").value == [1.0, 2.0]
    assert out.attribute("position") is None


def test_harmonize_identity_on_canonical():
    e = ContextElement(EntityRef("e", "W"), (_attr("location", [1, 2], "geo:point"),))
    assert harmonize(e, MODEL) == e


def test_harmonize_idempotent():
    e = ContextElement(EntityRef("e", "W"),
                       (_attr("geolocation", [1, 2], "geo:point"), _attr("temp", 3)))
    once = harmonize(e, MODEL)
    assert harmonize(once, MODEL) == once


def test_harmonize_preserves_values_and_metadata():
    md = (Metadatum("unit", "string", "cel"),)
    e = ContextElement(EntityRef("e", "W"),
                       (ContextAttribute("temp", "number", 21.5, md),))
    out = harmonize(e, MODEL)
    assert out.attribute("temperature").value == 21.5
    assert out.attribute("temperature").metadata == md


def test_harmonize_collision():
    e = ContextElement(EntityRef("e", "W"),
                       (_attr("position", [1, 2]), _attr("location", [3, 4])))
    with pytest.raises(SynonymCollision):
        harmonize(e, MODEL)


def test_synonym_chain_rejected():
    with pytest.raises(InvariantViolation):
        DataModel("m", (), {"a": "b", "b": "c"})


def test_required_names_must_be_canonical():
    with pytest.raises(InvariantViolation):
        DataModel("m", (("position", "geo:point"),), {"position": "location"})


# -- validation -------------------------------------------------------------------

def test_validate_ok():
    e = ContextElement(EntityRef("e", "W"),
                       (_attr("temperature", 21.5), _attr("location", [1, 2], "geo:point")))
    report = validate(e, MODEL)
    assert report.ok and not report.missing and not report.type_mismatches


def test_validate_missing():
    e = ContextElement(EntityRef("e", "W"), (_attr("temperature", 21.5),))
    report = validate(e, MODEL)
    assert not report.ok and report.missing == ("location",)


def test_validate_type_mismatch():
    e = ContextElement(EntityRef("e", "W"),
                       (_attr("temperature", 21.5), _attr("location", "here", "string")))
    report = validate(e, MODEL)
    assert not report.ok and report.type_mismatches == ("location",)


# -- scopes ------------------------------------------------------------------------

def test_geo_box_interior_and_closed_boundary():
    box = GeoBox(0, 0, 10, 10)
    inside = ContextElement(EntityRef("e", "T"), (_attr("location", [5, 5], "geo:point"),))
    corner = ContextElement(EntityRef("e", "T"), (_attr("location", [10, 10], "geo:point"),))
    outside = ContextElement(EntityRef("e", "T"), (_attr("location", [10.5, 5], "geo:point"),))
    assert scope_matches(box, inside)
    assert scope_matches(box, corner)
    assert not scope_matches(box, outside)


def test_geo_box_missing_or_malformed_location():
    box = GeoBox(0, 0, 10, 10)
    assert not scope_matches(box, ContextElement(EntityRef("e", "T"), ()))
    bad = ContextElement(EntityRef("e", "T"), (_attr("location", "nope", "string"),))
    assert not scope_matches(box, bad)


def test_string_match_on_attribute_and_metadata():
    scope = StringMatch("streetName", "Damrak")
    direct = ContextElement(EntityRef("e", "T"), (_attr("streetName", "Damrak 1", "string"),))
    assert scope_matches(scope, direct)
    via_md = ContextElement(
        EntityRef("e", "T"),
        (ContextAttribute("location", "geo:point", [1, 2],
                          (Metadatum("streetName", "string", "Damrak 1"),)),),
    )
    assert scope_matches(scope, via_md)
    assert not scope_matches(scope, ContextElement(EntityRef("e", "T"), ()))


def test_geo_box_bounds_validated():
    with pytest.raises(InvariantViolation):
        GeoBox(10, 0, 0, 10)
    with pytest.raises(InvariantViolation):
        GeoBox(-91, 0, 0, 0)
    with pytest.raises(InvariantViolation):
        scope_from_wire({"kind": "geo_box", "minLat": 0, "minLon": 0, "maxLat": 0})


# -- bundled models -------------------------------------------------------------------

def test_builtin_models_load_and_cover_location_synonyms():
    models = builtin_models()
    assert set(models) == {"WeatherObserved", "ParkingSpot", "WaterBuffer"}
    weather = models["WeatherObserved"]
    for raw in ("position", "geolocation", "posizione"):
        assert weather.synonyms[raw] == "location"


def test_load_models_dir(tmp_path):
    (tmp_path / "m.json").write_text(
        '{"name":"M","requiredAttributes":[{"name":"a","type":"t"}],"synonyms":{"b":"a"}}'
    )
    models = load_models_dir(tmp_path)
    assert models["M"].required == (("a", "t"),)


def test_canonical_dumps_sorts_keys():
    assert canonical_dumps({"b": 1, "a": 2}) == b'{"a":2,"b":1}'
