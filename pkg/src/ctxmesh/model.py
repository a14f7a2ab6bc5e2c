"""Context data model and the canonical JSON wire codec.

Everything on the wire is canonical JSON: object keys in lexicographic
order, no insignificant whitespace, UTF-8 bytes. Equal values therefore
produce byte-identical encodings, which the test suites rely on.

Value types here are immutable after construction; constructors enforce
the invariants so encoding can never fail.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .errors import InvariantViolation, MalformedJson, SynonymCollision

JsonValue = Union[None, bool, int, float, str, list, dict]

TIMESTAMP_META = "timestamp"
UNIT_META = "unit"
LOCATION_ATTR = "location"


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def canonical_dumps(obj) -> bytes:
    """Serialize to canonical JSON bytes (sorted keys, compact, UTF-8)."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _reject_constant(name: str):
    raise MalformedJson(f"non-finite number {name!r} is not valid JSON")


def canonical_loads(data: bytes | str):
    try:
        return json.loads(data, parse_constant=_reject_constant)
    except MalformedJson:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc


def check_json_value(value, where: str) -> None:
    """Reject anything that cannot survive a canonical JSON round trip."""
    if value is None or isinstance(value, (bool, int, str)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvariantViolation(where, f"{where}: non-finite float")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            check_json_value(item, f"{where}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise InvariantViolation(where, f"{where}: non-string object key")
            check_json_value(item, f"{where}.{key}")
        return
    raise InvariantViolation(where, f"{where}: unsupported value type {type(value).__name__}")


def _require_str(obj: dict, key: str, where: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise InvariantViolation(f"{where}.{key}", f"{where}.{key} must be a string")
    return value


def _require_keys(obj, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise InvariantViolation(where, f"{where} must be an object")
    for key in obj:
        if key not in allowed:
            raise InvariantViolation(f"{where}.{key}", f"{where}: unknown key {key!r}")
    for key in required:
        if key not in obj:
            raise InvariantViolation(f"{where}.{key}", f"{where}: missing key {key!r}")


def _token(value: str, where: str) -> str:
    if not value:
        raise InvariantViolation(where, f"{where} must be non-empty")
    if any(ch.isspace() for ch in value):
        raise InvariantViolation(where, f"{where} must not contain whitespace")
    return value


# ---------------------------------------------------------------------------
# entities and attributes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EntityRef:
    """Reference to one entity, or a pattern over entity ids.

    When ``is_pattern`` is true, ``id`` is an anchored regular expression
    over entity ids and a ``type`` of ``"*"`` matches every type.
    """

    id: str
    type: str
    is_pattern: bool = False

    def __post_init__(self):
        _token(self.id, "entity.id")
        _token(self.type, "entity.type")
        if self.is_pattern:
            try:
                re.compile(self.id)
            except re.error as exc:
                raise InvariantViolation("entity.id", f"bad id pattern: {exc}") from exc

    def matches(self, entity_id: str, entity_type: str) -> bool:
        if self.type != "*" and self.type != entity_type:
            return False
        if self.is_pattern:
            return re.fullmatch(self.id, entity_id) is not None
        return self.id == entity_id

    def to_wire(self) -> dict:
        return {"id": self.id, "isPattern": self.is_pattern, "type": self.type}

    @classmethod
    def from_wire(cls, obj, where: str = "entity") -> "EntityRef":
        _require_keys(obj, {"id", "isPattern", "type"}, {"id", "type"}, where)
        is_pattern = obj.get("isPattern", False)
        if not isinstance(is_pattern, bool):
            raise InvariantViolation(f"{where}.isPattern", f"{where}.isPattern must be a boolean")
        return cls(_require_str(obj, "id", where), _require_str(obj, "type", where), is_pattern)


@dataclass(frozen=True)
class Metadatum:
    name: str
    type: str
    value: JsonValue

    def __post_init__(self):
        if not self.name:
            raise InvariantViolation("metadata.name", "metadata name must be non-empty")
        check_json_value(self.value, f"metadata[{self.name}].value")

    def to_wire(self) -> dict:
        return {"name": self.name, "type": self.type, "value": self.value}

    @classmethod
    def from_wire(cls, obj, where: str) -> "Metadatum":
        _require_keys(obj, {"name", "type", "value"}, {"name", "type", "value"}, where)
        return cls(_require_str(obj, "name", where), _require_str(obj, "type", where), obj["value"])


@dataclass(frozen=True)
class ContextAttribute:
    name: str
    type: str
    value: JsonValue
    metadata: tuple[Metadatum, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise InvariantViolation("attribute.name", "attribute name must be non-empty")
        check_json_value(self.value, f"attribute[{self.name}].value")
        object.__setattr__(self, "metadata", tuple(self.metadata))
        seen = set()
        for md in self.metadata:
            if md.name in seen:
                raise InvariantViolation(
                    f"attribute[{self.name}].metadata",
                    f"duplicate metadatum {md.name!r} on attribute {self.name!r}",
                )
            seen.add(md.name)

    def metadatum(self, name: str) -> Metadatum | None:
        for md in self.metadata:
            if md.name == name:
                return md
        return None

    def timestamp_ms(self) -> int | None:
        """Measurement time in epoch milliseconds, when carried as metadata."""
        md = self.metadatum(TIMESTAMP_META)
        if md is not None and isinstance(md.value, (int, float)) and not isinstance(md.value, bool):
            return int(md.value)
        return None

    def to_wire(self) -> dict:
        return {
            "metadata": [md.to_wire() for md in self.metadata],
            "name": self.name,
            "type": self.type,
            "value": self.value,
        }

    @classmethod
    def from_wire(cls, obj, where: str) -> "ContextAttribute":
        _require_keys(obj, {"metadata", "name", "type", "value"}, {"name", "type", "value"}, where)
        raw_md = obj.get("metadata", [])
        if not isinstance(raw_md, list):
            raise InvariantViolation(f"{where}.metadata", f"{where}.metadata must be a list")
        metadata = tuple(
            Metadatum.from_wire(md, f"{where}.metadata[{i}]") for i, md in enumerate(raw_md)
        )
        return cls(
            _require_str(obj, "name", where),
            _require_str(obj, "type", where),
            obj["value"],
            metadata,
        )


@dataclass(frozen=True)
class ContextElement:
    """One entity together with a set of uniquely named attributes."""

    entity: EntityRef
    attributes: tuple[ContextAttribute, ...] = ()

    def __post_init__(self):
        if self.entity.is_pattern:
            raise InvariantViolation("entity.isPattern", "element entity must be literal")
        object.__setattr__(self, "attributes", tuple(self.attributes))
        seen = set()
        for attr in self.attributes:
            if attr.name in seen:
                raise InvariantViolation(
                    "attributes", f"duplicate attribute {attr.name!r} on entity {self.entity.id!r}"
                )
            seen.add(attr.name)

    def attribute(self, name: str) -> ContextAttribute | None:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        return None

    def with_attributes(self, attributes: Iterable[ContextAttribute]) -> "ContextElement":
        return ContextElement(self.entity, tuple(attributes))

    def to_wire(self) -> dict:
        return {
            "attributes": [attr.to_wire() for attr in self.attributes],
            "entity": self.entity.to_wire(),
        }

    @classmethod
    def from_wire(cls, obj, where: str = "element") -> "ContextElement":
        _require_keys(obj, {"attributes", "entity"}, {"entity"}, where)
        entity = EntityRef.from_wire(obj["entity"], f"{where}.entity")
        raw_attrs = obj.get("attributes", [])
        if not isinstance(raw_attrs, list):
            raise InvariantViolation(f"{where}.attributes", f"{where}.attributes must be a list")
        attrs = tuple(
            ContextAttribute.from_wire(a, f"{where}.attributes[{i}]")
            for i, a in enumerate(raw_attrs)
        )
        return cls(entity, attrs)


def encode_element(element: ContextElement) -> bytes:
    """Canonical JSON bytes for one element; total for valid elements."""
    return canonical_dumps(element.to_wire())


def decode_element(data: bytes | str) -> ContextElement:
    """Inverse of :func:`encode_element`; strict about shape and invariants."""
    return ContextElement.from_wire(canonical_loads(data))


# ---------------------------------------------------------------------------
# scopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeoBox:
    """Closed WGS84 bounding box over the ``location`` attribute."""

    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    kind = "geo_box"

    def __post_init__(self):
        for name in ("min_lat", "min_lon", "max_lat", "max_lon"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise InvariantViolation(f"scope.{name}", f"scope.{name} must be a finite number")
        if not (-90 <= self.min_lat <= self.max_lat <= 90):
            raise InvariantViolation("scope.lat", "latitudes must satisfy -90 <= min <= max <= 90")
        if not (-180 <= self.min_lon <= self.max_lon <= 180):
            raise InvariantViolation("scope.lon", "longitudes must satisfy -180 <= min <= max <= 180")

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon

    def intersects(self, other: "GeoBox") -> bool:
        return not (
            other.max_lat < self.min_lat
            or self.max_lat < other.min_lat
            or other.max_lon < self.min_lon
            or self.max_lon < other.min_lon
        )

    def covers(self, other: "GeoBox") -> bool:
        return (
            self.min_lat <= other.min_lat
            and self.min_lon <= other.min_lon
            and self.max_lat >= other.max_lat
            and self.max_lon >= other.max_lon
        )

    def to_wire(self) -> dict:
        return {
            "kind": "geo_box",
            "maxLat": self.max_lat,
            "maxLon": self.max_lon,
            "minLat": self.min_lat,
            "minLon": self.min_lon,
        }


@dataclass(frozen=True)
class StringMatch:
    """Substring match against a named attribute or metadatum value."""

    target: str
    substring: str

    kind = "string_match"

    def __post_init__(self):
        if not self.target:
            raise InvariantViolation("scope.target", "scope.target must be non-empty")

    def to_wire(self) -> dict:
        return {"kind": "string_match", "substring": self.substring, "target": self.target}


Scope = Union[GeoBox, StringMatch]


def scope_from_wire(obj, where: str = "scope") -> Scope:
    if not isinstance(obj, dict):
        raise InvariantViolation(where, f"{where} must be an object")
    kind = obj.get("kind")
    if kind == "geo_box":
        _require_keys(obj, {"kind", "minLat", "minLon", "maxLat", "maxLon"},
                      {"kind", "minLat", "minLon", "maxLat", "maxLon"}, where)
        return GeoBox(obj["minLat"], obj["minLon"], obj["maxLat"], obj["maxLon"])
    if kind == "string_match":
        _require_keys(obj, {"kind", "target", "substring"}, {"kind", "target", "substring"}, where)
        return StringMatch(_require_str(obj, "target", where), _require_str(obj, "substring", where))
    raise InvariantViolation(f"{where}.kind", f"{where}.kind must be geo_box or string_match")


def scopes_from_wire(items, where: str = "scopes") -> tuple[Scope, ...]:
    if not isinstance(items, list):
        raise InvariantViolation(where, f"{where} must be a list")
    return tuple(scope_from_wire(s, f"{where}[{i}]") for i, s in enumerate(items))


def _render_value(value: JsonValue) -> str:
    if isinstance(value, str):
        return value
    return canonical_dumps(value).decode("utf-8")


def _location_of(element: ContextElement) -> tuple[float, float] | None:
    attr = element.attribute(LOCATION_ATTR)
    if attr is None or not isinstance(attr.value, (list, tuple)) or len(attr.value) != 2:
        return None
    lat, lon = attr.value
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in (lat, lon)):
        return None
    return float(lat), float(lon)


def scope_matches(scope: Scope, element: ContextElement) -> bool:
    """Whether an element falls inside a scope; missing fields never match."""
    if isinstance(scope, GeoBox):
        loc = _location_of(element)
        return loc is not None and scope.contains(*loc)
    for attr in element.attributes:
        if attr.name == scope.target and scope.substring in _render_value(attr.value):
            return True
        for md in attr.metadata:
            if md.name == scope.target and scope.substring in _render_value(md.value):
                return True
    return False


# ---------------------------------------------------------------------------
# data models (harmonization + validation)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataModel:
    """A harmonized vocabulary: required attributes plus synonym renames."""

    name: str
    required: tuple[tuple[str, str], ...] = ()
    synonyms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise InvariantViolation("model.name", "model name must be non-empty")
        for raw, canonical in self.synonyms.items():
            if canonical in self.synonyms:
                raise InvariantViolation(
                    "model.synonyms",
                    f"synonym chain: {raw!r} -> {canonical!r} which is itself a synonym key",
                )
        for name, _ in self.required:
            if name in self.synonyms:
                raise InvariantViolation(
                    "model.requiredAttributes",
                    f"required attribute {name!r} is not canonical in model {self.name!r}",
                )

    def to_wire(self) -> dict:
        return {
            "name": self.name,
            "requiredAttributes": [{"name": n, "type": t} for n, t in self.required],
            "synonyms": dict(self.synonyms),
        }

    @classmethod
    def from_wire(cls, obj, where: str = "model") -> "DataModel":
        _require_keys(obj, {"name", "requiredAttributes", "synonyms"}, {"name"}, where)
        required = []
        for i, item in enumerate(obj.get("requiredAttributes", [])):
            _require_keys(item, {"name", "type"}, {"name", "type"}, f"{where}.requiredAttributes[{i}]")
            required.append((item["name"], item["type"]))
        synonyms = obj.get("synonyms", {})
        if not isinstance(synonyms, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in synonyms.items()
        ):
            raise InvariantViolation(f"{where}.synonyms", "synonyms must map strings to strings")
        return cls(_require_str(obj, "name", where), tuple(required), dict(synonyms))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    missing: tuple[str, ...] = ()
    type_mismatches: tuple[str, ...] = ()

    def to_wire(self) -> dict:
        return {
            "missing": list(self.missing),
            "ok": self.ok,
            "typeMismatches": list(self.type_mismatches),
        }


def harmonize(element: ContextElement, model: DataModel) -> ContextElement:
    """Rename synonym attributes to their canonical names; idempotent."""
    renamed = []
    names = set()
    changed = False
    for attr in element.attributes:
        canonical = model.synonyms.get(attr.name)
        if canonical is not None:
            attr = ContextAttribute(canonical, attr.type, attr.value, attr.metadata)
            changed = True
        if attr.name in names:
            raise SynonymCollision(
                f"renaming produces duplicate attribute {attr.name!r} on entity {element.entity.id!r}"
            )
        names.add(attr.name)
        renamed.append(attr)
    return element.with_attributes(renamed) if changed else element


def validate(element: ContextElement, model: DataModel) -> ValidationReport:
    """Report required attributes that are absent or carry the wrong type."""
    missing = []
    mismatched = []
    for name, expected_type in model.required:
        attr = element.attribute(name)
        if attr is None:
            missing.append(name)
        elif attr.type != expected_type:
            mismatched.append(name)
    return ValidationReport(not missing and not mismatched, tuple(missing), tuple(mismatched))


def load_model_file(path: Path) -> DataModel:
    try:
        raw = canonical_loads(path.read_bytes())
    except OSError as exc:
        raise MalformedJson(f"cannot read model file {path}: {exc}") from exc
    return DataModel.from_wire(raw, where=str(path.name))


def load_models_dir(directory: str | Path) -> dict[str, DataModel]:
    """Load every ``*.json`` data model in a directory, keyed by model name."""
    models = {}
    for path in sorted(Path(directory).glob("*.json")):
        model = load_model_file(path)
        models[model.name] = model
    return models


def builtin_models() -> dict[str, DataModel]:
    """The three sample data models shipped inside the package."""
    from importlib import resources

    models = {}
    for entry in resources.files("ctxmesh.models").iterdir():
        if entry.name.endswith(".json"):
            model = DataModel.from_wire(canonical_loads(entry.read_bytes()), where=entry.name)
            models[model.name] = model
    return models
