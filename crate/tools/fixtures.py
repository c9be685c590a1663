#!/usr/bin/env python3
"""Writes registrations.json and contracts/*.json for the shipped scenarios.

Patient keys are computed here from the fixture identities so the Rust side
never has to agree with itself. Run from the repository root.
"""
import hashlib
import json
import unicodedata
from pathlib import Path

PATIENTS = {
    "ada": ("Ada", "Tester", "1950-02-03"),
    "grace": ("Grace", "Example", "1961-07-14"),
    "omar": ("Omar", "Haddad", "1958-11-30"),
    "lin": ("Lin", "Okafor", "1947-04-09"),
    "maria": ("Maria", "Santos", "1952-09-21"),
}

TEMPLATES = {
    "blood_pressure_monitor": "Acme Medical/BP-200@1",
    "continuous_glucose_monitor": "Northwind Diagnostics/FlowSense CGM@2",
    "ecg": "Cardiolink/Patch 1L@1",
    "fall_sensor": "Guardian Wearables/SafeStep@1",
    "glucose_meter": "Northwind Diagnostics/GlucoCheck G5@5",
    "heart_rate_monitor": "Pulsewise/Strap HR2@4",
    "insulin_pump": "Harbor Infusion/IP-7@7",
    "pulse_oximeter": "Lumen Home Health/OxiClip 3@3",
    "smart_pill_bottle": "MedMinder Labs/CapSense@2",
    "spirometer": "Airline Respiratory/SpiroMini@2",
    "thermometer": "Lumen Home Health/ThermoTouch@1",
    "weight_scale": "Lumen Home Health/BalanceOne@3",
}

# (device id, patient, manufacturer's patient id, template)
DEVICES = [
    ("BP9", "ada", "P1", "blood_pressure_monitor"),
    ("GM-17", "ada", "P1", "glucose_meter"),
    ("PB-1", "ada", "P1", "smart_pill_bottle"),
    ("FS-6", "ada", "P1", "fall_sensor"),
    ("CGM-3", "grace", "P2", "continuous_glucose_monitor"),
    ("IP-9", "grace", "P2", "insulin_pump"),
    ("GM-22", "grace", "P2", "glucose_meter"),
    ("SC-2", "grace", "P2", "weight_scale"),
    ("BP-31", "omar", "P3", "blood_pressure_monitor"),
    ("SC-3", "omar", "P3", "weight_scale"),
    ("HR-3", "omar", "P3", "heart_rate_monitor"),
    ("SP-8", "lin", "P4", "spirometer"),
    ("OX-5", "lin", "P4", "pulse_oximeter"),
    ("TH-2", "lin", "P4", "thermometer"),
    ("ECG-4", "maria", "P5", "ecg"),
    ("SC-5", "maria", "P5", "weight_scale"),
    ("BP-51", "maria", "P5", "blood_pressure_monitor"),
    ("OX-51", "maria", "P5", "pulse_oximeter"),
    ("HR-5", "maria", "P5", "heart_rate_monitor"),
]


def key(p):
    first, last, dob = PATIENTS[p]
    norm = lambda s: unicodedata.normalize("NFC", s).strip().lower()
    return hashlib.sha256(f"{norm(first)}|{norm(last)}|{dob}".encode()).hexdigest()


def fixture(p):
    first, last, dob = PATIENTS[p]
    return {"first_name": first, "last_name": last, "date_of_birth": dob}


def registrations():
    devices = []
    for did, p, pid, t in DEVICES:
        low = did.lower()
        devices.append({
            "device_id": did, "patient_id": pid, "patient": fixture(p), "template": TEMPLATES[t],
            "token": f"tok-{low}", "mqtt_username": low, "mqtt_password": f"pw-{low}",
            "coap_psk_id": f"psk-{low}",
        })
    devices.append({
        "device_id": "BP-OLD", "patient_id": "P1", "patient": fixture("ada"),
        "template": TEMPLATES["blood_pressure_monitor"], "token": "tok-bp-old", "revoked": True,
    })
    users = [
        {"id": "admin", "role": "admin", "token": "tok-admin"},
        {"id": "dr-lee", "role": "provider", "token": "tok-dr-lee"},
        {"id": "dr-shah", "role": "provider", "token": "tok-dr-shah"},
    ]
    for p in PATIENTS:
        users.append({"id": p, "role": "patient", "token": f"tok-{p}", "patient": fixture(p)})
    return {"devices": devices, "users": users}


def schedule():
    return {"times": ["08:00", "20:00"], "tolerance_minutes": 60, "threshold": "4/5", "window_days": 7,
            "opening_code": "pill-bottle-opening"}


STATS = ["count", "min", "max", "mean", "latest"]


def contracts():
    contacts = ["care-team@example.org", "+1-555-0100"]
    return {
        "ada": [
            {"contract_kind": "access_control", "patient_key": key("ada")},
            {"contract_kind": "drug_compliance", "patient_key": key("ada"), "dose_schedule": schedule()},
            {"contract_kind": "emergency_alert", "patient_key": key("ada"),
             "escalation": {"contacts": contacts, "fall_code": "fall"}},
            {"contract_kind": "adverse_condition", "patient_key": key("ada"),
             "rhythm": {"min_bpm": 45, "max_bpm": 120, "irregularity_flag": True,
                        "heart_rate_codes": ["pulse-rate"], "irregular_code": "pulse_irregular"},
             "parameters": [{"target_code": "blood-pressure/systolic", "upper_limit": 180, "lower_limit": 90,
                             "unit": "mm[Hg]", "action": "emergency"}]},
            {"contract_kind": "summarization", "patient_key": key("ada"),
             "summarization": {"window_days": 7, "codes": ["blood-pressure", "blood-glucose"],
                               "statistics": STATS, "compliance": schedule()}},
        ],
        "grace": [
            {"contract_kind": "emergency_alert", "patient_key": key("grace"),
             "escalation": {"contacts": ["endo-clinic@example.org"], "fall_code": "fall"},
             "parameters": [{"target_code": "interstitial-glucose", "lower_limit": 54, "unit": "mg/dL",
                             "action": "emergency"},
                            {"target_code": "blood-glucose", "lower_limit": 70, "upper_limit": 250,
                             "unit": "mg/dL", "action": "alert"}]},
            {"contract_kind": "summarization", "patient_key": key("grace"),
             "summarization": {"window_days": 7,
                               "codes": ["interstitial-glucose", "blood-glucose", "insulin-bolus", "body-weight"],
                               "statistics": STATS}},
        ],
        "omar": [
            {"contract_kind": "adverse_condition", "patient_key": key("omar"),
             "rhythm": {"min_bpm": 45, "max_bpm": 130, "irregularity_flag": True,
                        "heart_rate_codes": ["heart-rate", "pulse-rate"], "irregular_code": "pulse_irregular"},
             "parameters": [{"target_code": "blood-pressure/systolic", "upper_limit": 180, "unit": "mm[Hg]",
                             "action": "alert"}]},
            {"contract_kind": "summarization", "patient_key": key("omar"),
             "summarization": {"window_days": 7, "codes": ["blood-pressure", "body-weight", "heart-rate"],
                               "statistics": STATS}},
        ],
        "lin": [
            {"contract_kind": "emergency_alert", "patient_key": key("lin"),
             "escalation": {"contacts": ["pulm-clinic@example.org"], "fall_code": "fall"},
             "parameters": [{"target_code": "oxygen-saturation", "lower_limit": 88, "unit": "%",
                             "action": "emergency"}]},
            {"contract_kind": "summarization", "patient_key": key("lin"),
             "summarization": {"window_days": 7,
                               "codes": ["fev1", "oxygen-saturation", "body-temperature"],
                               "statistics": STATS}},
        ],
        "maria": [
            {"contract_kind": "adverse_condition", "patient_key": key("maria"),
             "rhythm": {"min_bpm": 45, "max_bpm": 120, "irregularity_flag": True,
                        "heart_rate_codes": ["heart-rate", "pulse-rate"], "irregular_code": "pulse_irregular"},
             "parameters": [{"target_code": "body-weight", "upper_limit": 95, "unit": "kg", "action": "notify"}]},
            {"contract_kind": "summarization", "patient_key": key("maria"),
             "summarization": {"window_days": 7,
                               "codes": ["body-weight", "blood-pressure", "heart-rate", "oxygen-saturation"],
                               "statistics": STATS}},
        ],
    }


def main():
    Path("registrations.json").write_text(json.dumps(registrations(), indent=2) + "\n")
    Path("contracts").mkdir(exist_ok=True)
    for name, specs in contracts().items():
        Path(f"contracts/{name}.json").write_text(json.dumps(specs, indent=2) + "\n")
    keys = {p: key(p) for p in PATIENTS}
    print(json.dumps(keys, indent=2))


if __name__ == "__main__":
    main()
