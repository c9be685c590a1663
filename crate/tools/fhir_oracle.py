#!/usr/bin/env python3
"""Independent reference for the FHIR Observation mapping.

Reads the canonical observations in corpus/<name>/expected.jsonl and writes
golden/<name>.json: the searchset Bundle a patient gets back from
GET /fhir/Observation?patient=Patient/<key> when the store holds exactly
those observations. Run from the repository root.
"""
import hashlib
import json
from pathlib import Path

UCUM = "http://unitsofmeasure.org"
CODE = "urn:blockiot:code"
CODE_SET = "urn:blockiot:code-set"
NOMENCLATURE = "urn:iso:std:iso:11073:10101"
PATIENT_ID = "urn:blockiot:patient-id"
DEVICE_ID = "urn:blockiot:device-id"
CAS = "urn:blockiot:cas:"
EVENT_ACTIVE = "urn:blockiot:fhir:event-active"
SAMPLE_RATE = "urn:blockiot:fhir:sample-rate-hz"
CHANNEL = "urn:blockiot:fhir:channel-label"
UNNORMALIZED = "unit not in conversion table; value kept in the unit sent by the device"


def sha256(b):
    return hashlib.sha256(b).hexdigest()


def plain_decimal(x):
    # Shortest round-trip digits without an exponent; integral values lose the ".0".
    if x == int(x):
        return str(int(x))
    r = repr(x)
    assert "e" not in r, r
    return r


def check_float(x):
    assert "e" not in repr(x), f"{x} would need exponent handling"
    return x


def quantity(value, unit):
    return {"value": check_float(value), "unit": unit, "system": UCUM, "code": unit}


def observation(line):
    o = json.loads(line)
    dev = o["device"]
    code = o["code_binding"]
    body = {
        "resourceType": "Observation",
        "id": sha256(line),
        "meta": {"source": CAS + o["provenance"]},
        "status": "final",
        "code": {
            "coding": [{"system": CODE, "code": code}, {"system": NOMENCLATURE, "code": str(dev["nomenclature_code"])}],
            "text": code,
        },
        "subject": {"reference": "Patient/" + o["subject"], "identifier": {"system": PATIENT_ID, "value": dev["patient_id"]}},
        "device": {
            "reference": "Device/" + sha256(b"device\0" + dev["patient_id"].encode() + b"\0" + dev["device_id"].encode()),
            "identifier": {"system": DEVICE_ID, "value": dev["device_id"]},
        },
        "effectiveDateTime": o["effective_time"],
    }
    (tag, v), = o["value"].items()
    if tag == "scalar":
        body["valueQuantity"] = quantity(v["magnitude"], v["unit"])
    elif tag == "vector":
        body["component"] = [
            {
                "code": {"coding": [{"system": CODE, "code": f"{code}/{c['label']}"}], "text": c["label"]},
                "valueQuantity": quantity(c["magnitude"], c["unit"]),
            }
            for c in v["components"]
        ]
    elif tag == "code":
        body["valueCodeableConcept"] = {"coding": [{"system": CODE_SET, "code": v["symbol"]}], "text": v["symbol"]}
    elif tag == "event_state":
        body["valueCodeableConcept"] = {
            "extension": [{"url": EVENT_ACTIVE, "valueBoolean": v["active"]}],
            "coding": [{"system": CODE_SET, "code": v["state_name"]}],
            "text": v["state_name"],
        }
    elif tag == "waveform":
        rate = v["sample_rate_hz"]
        ext = [{"url": SAMPLE_RATE, "valueDecimal": check_float(rate)}]
        ext += [{"url": CHANNEL, "valueString": l} for l in v["channel_labels"]]
        body["valueSampledData"] = {
            "extension": ext,
            "origin": {"value": 0},
            "period": check_float(1000.0 / rate),
            "dimensions": max(len(v["channel_labels"]), 1),
            "data": " ".join(plain_decimal(s) for s in v["samples"]),
        }
    elif tag == "string":
        body["valueString"] = v["text"]
    else:
        raise ValueError(tag)
    if o.get("unnormalized"):
        body["note"] = [{"text": UNNORMALIZED}]
    return o, body


def bundle(lines):
    items = [observation(l) for l in lines]
    # Store order: effective time, then content address.
    items.sort(key=lambda it: (it[0]["effective_time"], it[1]["id"]))
    subject = items[0][0]["subject"]
    return {
        "resourceType": "Bundle",
        "type": "searchset",
        "total": len(items),
        "link": [{"relation": "self", "url": f"Observation?patient=Patient%2F{subject}"}],
        "entry": [
            {"fullUrl": f"Observation/{body['id']}", "resource": body, "search": {"mode": "match"}} for _, body in items
        ],
    }


def main():
    out = Path("golden")
    out.mkdir(exist_ok=True)
    for case in sorted(p for p in Path("corpus").iterdir() if p.is_dir()):
        lines = [l.encode() for l in (case / "expected.jsonl").read_text().splitlines() if l]
        text = json.dumps(bundle(lines), indent=2, sort_keys=True, ensure_ascii=False)
        (out / f"{case.name}.json").write_text(text + "\n")
        print(case.name, len(lines))


if __name__ == "__main__":
    main()
