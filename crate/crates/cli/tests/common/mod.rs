#![allow(dead_code)]

use std::path::{Path, PathBuf};

use exagree_cli::pipeline::{self, SynthOptions};
use exagree_cli::RunDir;
use exagree_core::models::TrainConfig;
use exagree_core::{DmanConfig, RashomonConfig};
use serde_json::Value;

/// Small synthetic run with every stage up to the surrogate.
pub fn small_run(root: &Path, seed: u64) -> RunDir {
    let opts = SynthOptions {
        n: 2000,
        seed,
        ..Default::default()
    };
    pipeline::synth(root, &opts, false).unwrap();
    let mut run = RunDir::open(root).unwrap();
    pipeline::train_reference(&mut run, TrainConfig::logistic(seed), seed, 3).unwrap();
    pipeline::sample(
        &mut run,
        RashomonConfig {
            n_samples: 200,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    pipeline::dman(
        &mut run,
        DmanConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    run
}

pub fn schema(name: &str) -> Value {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "schemas", &format!("{name}.json")].iter().collect();
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Panics with every violation of `schema` found in `value`. Covers type,
/// required, properties, items, enum, minimum/maximum, anyOf and local
/// `$ref`s.
pub fn assert_valid(name: &str, value: &Value) {
    let root = schema(name);
    let mut errors = Vec::new();
    check(&root, &root, value, "$", &mut errors);
    assert!(errors.is_empty(), "{name} schema violations:\n{}", errors.join("\n"));
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        _ => false,
    }
}

fn check(root: &Value, s: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    if let Some(r) = s.get("$ref").and_then(Value::as_str) {
        let target = r
            .strip_prefix("#/")
            .unwrap_or_else(|| panic!("only local refs are supported: {r}"))
            .split('/')
            .fold(root, |node, key| &node[key]);
        check(root, target, v, at, errors);
        return;
    }
    if let Some(alts) = s.get("anyOf").and_then(Value::as_array) {
        let ok = alts.iter().any(|alt| {
            let mut e = Vec::new();
            check(root, alt, v, at, &mut e);
            e.is_empty()
        });
        if !ok {
            errors.push(format!("{at}: matches no alternative"));
        }
    }
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, v)),
            _ => true,
        };
        if !ok {
            errors.push(format!("{at}: expected type {t}, got {v}"));
            return;
        }
    }
    if let Some(allowed) = s.get("enum").and_then(Value::as_array) {
        if !allowed.contains(v) {
            errors.push(format!("{at}: {v} not in {allowed:?}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(min) = s.get("minimum").and_then(Value::as_f64) {
            if x < min {
                errors.push(format!("{at}: {x} < minimum {min}"));
            }
        }
        if let Some(max) = s.get("maximum").and_then(Value::as_f64) {
            if x > max {
                errors.push(format!("{at}: {x} > maximum {max}"));
            }
        }
    }
    if let Some(obj) = v.as_object() {
        for key in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !obj.contains_key(key) {
                errors.push(format!("{at}: missing {key:?}"));
            }
        }
        if let Some(props) = s.get("properties").and_then(Value::as_object) {
            for (k, sub) in props {
                if let Some(child) = obj.get(k) {
                    check(root, sub, child, &format!("{at}.{k}"), errors);
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, child) in arr.iter().enumerate() {
            check(root, items, child, &format!("{at}[{i}]"), errors);
        }
    }
}
