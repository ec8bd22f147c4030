//! Helpers for driving the built binary, plus a validator for the subset
//! of JSON Schema used by the files in `schemas/`.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ahcnn"))
}

pub fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = bin().current_dir(dir).args(args).output().expect("spawn ahcnn");
    assert!(
        out.status.success(),
        "ahcnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn run_err(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("spawn ahcnn");
    assert!(!out.status.success(), "ahcnn {args:?} unexpectedly succeeded");
    out
}

pub fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("bad JSON ({e}): {text}"))
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

pub fn load_schema(name: &str) -> Value {
    let text = std::fs::read_to_string(schema_dir().join(name)).expect("schema file");
    json(&text)
}

/// Returns every violation of `schema` (file `name`) by `doc`.
pub fn violations(name: &str, doc: &Value) -> Vec<String> {
    let root = load_schema(name);
    let mut errs = Vec::new();
    check(&root, &root, doc, "$", &mut errs);
    errs
}

pub fn assert_valid(name: &str, doc: &Value) {
    let errs = violations(name, doc);
    assert!(errs.is_empty(), "{name}: {errs:#?}");
}

fn resolve(root: &Value, r: &str) -> (Value, Value) {
    let (file, frag) = r.split_once('#').unwrap_or((r, ""));
    let doc = if file.is_empty() { root.clone() } else { load_schema(file) };
    let mut node = doc.clone();
    for part in frag.split('/').filter(|p| !p.is_empty()) {
        node = node[part].clone();
    }
    assert!(!node.is_null(), "unresolved $ref {r}");
    (doc, node)
}

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        "null" => v.is_null(),
        other => panic!("unsupported type {other}"),
    }
}

fn check(root: &Value, schema: &Value, v: &Value, path: &str, errs: &mut Vec<String>) {
    let s = schema.as_object().expect("schema node is an object");
    for key in s.keys() {
        let known = [
            "$schema", "$id", "$defs", "title", "description", "$ref", "type", "enum", "required",
            "properties", "additionalProperties", "items", "minItems", "maxItems", "minimum",
            "maximum", "minLength", "maxLength",
        ];
        assert!(known.contains(&key.as_str()), "unsupported schema keyword {key}");
    }
    if let Some(r) = s.get("$ref").and_then(Value::as_str) {
        let (doc, node) = resolve(root, r);
        check(&doc, &node, v, path, errs);
    }
    if let Some(t) = s.get("type").and_then(Value::as_str) {
        if !type_ok(t, v) {
            errs.push(format!("{path}: expected {t}, got {v}"));
            return;
        }
    }
    if let Some(options) = s.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            errs.push(format!("{path}: {v} not one of {options:?}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(m) = s.get("minimum").and_then(Value::as_f64) {
            if x < m {
                errs.push(format!("{path}: {x} < {m}"));
            }
        }
        if let Some(m) = s.get("maximum").and_then(Value::as_f64) {
            if x > m {
                errs.push(format!("{path}: {x} > {m}"));
            }
        }
    }
    if let Some(text) = v.as_str() {
        let n = text.chars().count() as u64;
        if s.get("minLength").and_then(Value::as_u64).is_some_and(|m| n < m)
            || s.get("maxLength").and_then(Value::as_u64).is_some_and(|m| n > m)
        {
            errs.push(format!("{path}: string length {n} out of bounds"));
        }
    }
    if let Some(items) = v.as_array() {
        let n = items.len() as u64;
        if s.get("minItems").and_then(Value::as_u64).is_some_and(|m| n < m)
            || s.get("maxItems").and_then(Value::as_u64).is_some_and(|m| n > m)
        {
            errs.push(format!("{path}: {n} items out of bounds"));
        }
        if let Some(item) = s.get("items") {
            for (i, x) in items.iter().enumerate() {
                check(root, item, x, &format!("{path}[{i}]"), errs);
            }
        }
    }
    if let Some(obj) = v.as_object() {
        for req in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            let req = req.as_str().unwrap();
            if !obj.contains_key(req) {
                errs.push(format!("{path}: missing {req}"));
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, x) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => check(root, sub, x, &format!("{path}.{k}"), errs),
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errs.push(format!("{path}: unexpected key {k}"))
                }
                None => {}
            }
        }
    }
}
