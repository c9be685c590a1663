#!/usr/bin/env python3
"""Independent reference for template mapping.

Reads templates/ and corpus/<name>/payload.json and writes the expected
canonical observations to corpus/<name>/expected.jsonl, one per line.
Run from the repository root.
"""
import hashlib
import json
import sys
import unicodedata
from datetime import datetime, timezone
from pathlib import Path

UNITS = {
    "kg": ("kg", 1.0, 0.0), "g": ("kg", 1e-3, 0.0), "mg": ("kg", 1e-6, 0.0),
    "[lb_av]": ("kg", 0.45359237, 0.0), "[oz_av]": ("kg", 0.028349523125, 0.0),
    "m": ("m", 1.0, 0.0), "cm": ("m", 1e-2, 0.0), "mm": ("m", 1e-3, 0.0), "km": ("m", 1e3, 0.0),
    "[in_i]": ("m", 0.0254, 0.0), "[ft_i]": ("m", 0.3048, 0.0), "[mi_i]": ("m", 1609.344, 0.0),
    "Cel": ("Cel", 1.0, 0.0), "[degF]": ("Cel", 5.0 / 9.0, -160.0 / 9.0), "K": ("Cel", 1.0, -273.15),
    "mm[Hg]": ("mm[Hg]", 1.0, 0.0), "kPa": ("mm[Hg]", 1000.0 / 133.322387415, 0.0),
    "Pa": ("mm[Hg]", 1.0 / 133.322387415, 0.0), "cm[H2O]": ("mm[Hg]", 98.0665 / 133.322387415, 0.0),
    "mg/dL": ("mg/dL", 1.0, 0.0), "g/L": ("mg/dL", 100.0, 0.0), "mmol/L": ("mg/dL", 18.0156, 0.0),
    "/min": ("/min", 1.0, 0.0), "{beats}/min": ("/min", 1.0, 0.0), "{breaths}/min": ("/min", 1.0, 0.0),
    "/s": ("/min", 60.0, 0.0), "/h": ("/min", 1.0 / 60.0, 0.0),
    "L": ("L", 1.0, 0.0), "mL": ("L", 1e-3, 0.0), "L/min": ("L/min", 1.0, 0.0), "L/s": ("L/min", 60.0, 0.0),
    "%": ("%", 1.0, 0.0), "{steps}": ("{steps}", 1.0, 0.0), "U": ("U", 1.0, 0.0),
    "s": ("s", 1.0, 0.0), "ms": ("s", 1e-3, 0.0), "min": ("s", 60.0, 0.0), "h": ("s", 3600.0, 0.0),
}


def canonical(v):
    return json.dumps(v, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def compact(v):
    return json.dumps(v, separators=(",", ":"), ensure_ascii=False)


def patient_key(first, last, dob):
    norm = lambda s: unicodedata.normalize("NFC", s).strip().lower()
    return hashlib.sha256(f"{norm(first)}|{norm(last)}|{dob}".encode()).hexdigest()


def parse_time(v):
    if isinstance(v, bool):
        return None
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        try:
            d = datetime.fromisoformat(v.replace("Z", "+00:00"))
        except ValueError:
            return None
        return int(d.timestamp() * 1000 + 0.5) if d.microsecond else int(d.timestamp()) * 1000
    return None


def fmt_time(ms):
    d = datetime.fromtimestamp(ms / 1000, tz=timezone.utc)
    return d.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def number(v):
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v.strip())
        except ValueError:
            return None
    return None


def normalize(mag, unit):
    if unit not in UNITS:
        return mag, unit, False
    canon, scale, offset = UNITS[unit]
    if canon == unit:
        return mag, unit, True
    return mag * scale + offset, canon, True


def classify(rule, raw):
    kind = rule["kind"]
    unit = rule.get("unit", "")
    if kind == "scalar":
        return {"scalar": {"magnitude": number(raw), "unit": unit}}
    if kind == "vector":
        comps = [{"label": l, "magnitude": number(x), "unit": unit} for l, x in zip(rule["vector_layout"], raw)]
        return {"vector": {"components": comps}}
    if kind == "code":
        return {"code": {"symbol": raw}}
    if kind == "event_state":
        if isinstance(raw, bool):
            return {"event_state": {"state_name": rule["target_code"], "active": raw}}
        return {"event_state": {"state_name": raw, "active": True}}
    if kind == "waveform":
        return {"waveform": {"sample_rate_hz": float(rule["sample_rate_hz"]),
                             "channel_labels": rule.get("channel_labels", []),
                             "samples": [float(x) for x in raw]}}
    if kind == "string":
        return {"string": {"text": raw}}
    raise ValueError(kind)


def map_payload(template, raw, received_ms, subject):
    ids = template["identifiers"]
    tp = template["device_config"]["time_properties"]
    provenance = "f1220" + hashlib.sha256(canonical(raw)).hexdigest()
    eff = received_ms
    key = tp.get("timestamp_key")
    if key and key in raw:
        t = parse_time(raw[key])
        if t is not None and abs(t - received_ms) <= tp["accuracy_ms"]:
            eff = t
    device = {"patient_id": raw[ids["patient_id_key"]], "device_id": raw[ids["device_id_key"]],
              "nomenclature_code": ids["nomenclature_code"]}
    out = []
    for rule in template["parameter_map"]:
        keys = rule.get("component_keys") or [rule["source_key"]]
        if not any(k in raw for k in keys):
            continue
        value_raw = [raw[k] for k in keys] if rule.get("component_keys") else raw[rule["source_key"]]
        value = classify(rule, value_raw)
        ok = True
        inner = next(iter(value.values()))
        if "scalar" in value:
            inner["magnitude"], inner["unit"], ok = normalize(inner["magnitude"], inner["unit"])
        elif "vector" in value:
            for c in inner["components"]:
                c["magnitude"], c["unit"], good = normalize(c["magnitude"], c["unit"])
                ok = ok and good
        obs = {"subject": subject, "device": device, "effective_time": fmt_time(eff),
               "kind": next(iter(value)), "value": value, "code_binding": rule["target_code"],
               "provenance": provenance}
        if not ok:
            obs["unnormalized"] = True
        out.append(obs)
    return out


def main():
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")
    ctx = json.loads((root / "corpus" / "context.json").read_text())
    p = ctx["patient"]
    subject = patient_key(p["first_name"], p["last_name"], p["date_of_birth"])
    received = parse_time(ctx["received_at"])
    for case in sorted((root / "corpus").iterdir()):
        if not case.is_dir():
            continue
        template = json.loads((root / "templates" / f"{case.name}.json").read_text())
        raw = json.loads((case / "payload.json").read_text())
        lines = [compact(o) for o in map_payload(template, raw, received, subject)]
        (case / "expected.jsonl").write_text("".join(l + "\n" for l in lines))
        print(f"{case.name}: {len(lines)} observation(s)")


if __name__ == "__main__":
    main()
