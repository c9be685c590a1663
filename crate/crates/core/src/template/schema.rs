//! Interpreter for the JSON Schema subset used by the shipped template schema:
//! `type`, `required`, `properties`, `additionalProperties: false`, `items`,
//! `enum`, `minLength` and `minimum`. Every failure is collected with its
//! JSON-pointer path instead of stopping at the first one.

use std::fmt;

use serde_json::Value;

pub const DEVICE_TEMPLATE_SCHEMA: &str =
    include_str!("../../../../schemas/device_template.schema.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub path: String,
    pub message: String,
}

impl Problem {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Problem { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: {}", self.message)
    }
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn escape(seg: &str) -> String {
    seg.replace('~', "~0").replace('/', "~1")
}

pub fn validate(schema: &Value, instance: &Value) -> Vec<Problem> {
    let mut out = Vec::new();
    walk(schema, instance, "", &mut out);
    out
}

fn walk(schema: &Value, v: &Value, path: &str, out: &mut Vec<Problem>) {
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(t, v) {
            out.push(Problem::new(path, format!("expected {t}")));
            return;
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            let listed: Vec<String> = options.iter().map(Value::to_string).collect();
            out.push(Problem::new(path, format!("must be one of {}", listed.join(", "))));
        }
    }
    if let (Some(min), Some(s)) = (schema.get("minLength").and_then(Value::as_u64), v.as_str()) {
        if (s.chars().count() as u64) < min {
            out.push(Problem::new(path, format!("must have at least {min} character(s)")));
        }
    }
    if let (Some(min), Some(n)) = (schema.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if n < min {
            out.push(Problem::new(path, format!("must be >= {min}")));
        }
    }
    if let Some(obj) = v.as_object() {
        if let Some(req) = schema.get("required").and_then(Value::as_array) {
            for key in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    out.push(Problem::new(format!("{path}/{}", escape(key)), "missing required field"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (key, child) in obj {
            let child_path = format!("{path}/{}", escape(key));
            match props.and_then(|p| p.get(key)) {
                Some(sub) => walk(sub, child, &child_path, out),
                None if closed => out.push(Problem::new(child_path, "unknown field")),
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            walk(items, item, &format!("{path}/{i}"), out);
        }
    }
}
