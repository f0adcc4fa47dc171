"""Normalization of compressed records to Common Base Event style XML.

Only a small self-defined subset of CBE is produced::

    <CommonBaseEvent creationTime=".." severity=".." msg=".." sourceComponentId="..">
      <extendedDataElement name="var0" type="string" value=".."/>
      ...
      <extendedDataElement name="deviceType" type="string" value=".."/>
      ...
      <extendedDataElement name="templateId" type="int" value=".."/>
    </CommonBaseEvent>

XML 1.0 cannot carry most control characters even as references; they are
replaced by U+FFFD in the XML view only (the compressed batch stays exact).
"""

from __future__ import annotations

import datetime
import re
from dataclasses import dataclass
from typing import Mapping
from xml.sax.saxutils import quoteattr

from .pipeline import PipelineError, Record, TemplateDictionary, decode_record

METADATA_FIELDS = ("deviceType", "geoLocation", "dataQuality", "harvestConditions", "harvestTime")
DATA_QUALITY = ("complete", "gapped", "unknown")
DEFAULT_SEVERITY = 30

_PRI_RE = re.compile(r"^\s*<(\d{1,3})>")
_ILLEGAL_XML = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ufffe\uffff\ud800-\udfff]")


class CbeValidationError(PipelineError):
    pass


def iso_utc(ts: float) -> str:
    dt = datetime.datetime.fromtimestamp(ts, tz=datetime.timezone.utc)
    return dt.isoformat(timespec="milliseconds").replace("+00:00", "Z")


def attach_metadata_l1(
    device_id: bytes,
    devices: Mapping[str, Mapping[str, str]] | None,
    received_at: float,
    clock_offset_ms: float = 0.0,
    data_quality: str = "unknown",
    harvest_conditions: str = "tcp",
) -> dict[str, str]:
    """Level-1 descriptors for one device.

    ``devices`` maps hex device id to ``{"type": .., "geo": ..}``.
    ``harvestTime`` is the receipt time moved onto the device clock.
    """
    info = (devices or {}).get(device_id.hex(), {})
    if data_quality not in DATA_QUALITY:
        data_quality = "unknown"
    if not info:
        data_quality = "unknown"
    return {
        "deviceType": info.get("type", "unknown"),
        "geoLocation": info.get("geo", "unknown"),
        "dataQuality": data_quality,
        "harvestConditions": harvest_conditions,
        "harvestTime": iso_utc(harvest_time(received_at, clock_offset_ms)),
    }


def harvest_time(received_at: float, clock_offset_ms: float) -> float:
    return received_at + clock_offset_ms / 1000.0


def syslog_severity(line: str) -> int:
    """Map a leading ``<PRI>`` to the CBE 0..70 scale; lines without one get 30."""
    m = _PRI_RE.match(line)
    if not m:
        return DEFAULT_SEVERITY
    pri = int(m.group(1))
    if pri > 191:
        return DEFAULT_SEVERITY
    sev = pri % 8
    return min(70, (7 - sev + 1) * 10)


def _xml_text(s: str) -> str:
    return quoteattr(_ILLEGAL_XML.sub("\ufffd", s), {"'": "&apos;"})


def _ede(name: str, value: str, kind: str = "string") -> str:
    return f'<extendedDataElement name={_xml_text(name)} type="{kind}" value={_xml_text(value)}/>'


@dataclass(frozen=True)
class CbeEvent:
    creation_time: str
    severity: int
    source_component_id: str
    msg: str
    template_id: int
    variables: tuple[str, ...]
    metadata: Mapping[str, str]

    def to_xml(self) -> str:
        parts = [
            "<CommonBaseEvent"
            f" creationTime={_xml_text(self.creation_time)}"
            f' severity="{self.severity}"'
            f" msg={_xml_text(self.msg)}"
            f' sourceComponentId="{self.source_component_id}">'
        ]
        parts.extend(_ede(f"var{i}", v) for i, v in enumerate(self.variables))
        parts.extend(_ede(k, self.metadata[k]) for k in METADATA_FIELDS)
        parts.append(_ede("templateId", str(self.template_id), "int"))
        parts.append("</CommonBaseEvent>")
        return "".join(parts)


def make_event(
    record: Record,
    dictionary: TemplateDictionary,
    metadata: Mapping[str, str],
    device_id: bytes,
) -> CbeEvent:
    missing = [k for k in METADATA_FIELDS if not metadata.get(k)]
    if missing:
        raise CbeValidationError(f"missing level-1 metadata: {', '.join(missing)}")
    pattern = dictionary.templates.get(record.template_id)
    if pattern is None:
        raise CbeValidationError(f"unknown template {record.template_id}")
    line = decode_record(record, pattern)
    return CbeEvent(
        creation_time=metadata["harvestTime"],
        severity=syslog_severity(line),
        source_component_id=device_id.hex(),
        msg=line,
        template_id=record.template_id,
        variables=record.variables,
        metadata=dict(metadata),
    )


def normalize_to_cbe(
    record: Record,
    dictionary: TemplateDictionary,
    metadata: Mapping[str, str],
    device_id: bytes,
) -> str:
    """One ``<CommonBaseEvent>`` element for ``record``."""
    return make_event(record, dictionary, metadata, device_id).to_xml()


def cbe_document(records, dictionary, metadata, device_id) -> bytes:
    """All records of a batch wrapped in a ``<CommonBaseEvents>`` root."""
    body = "".join(normalize_to_cbe(r, dictionary, metadata, device_id) for r in records)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n<CommonBaseEvents>' + body + "</CommonBaseEvents>"
    ).encode("utf-8")
