//! The standard worker set served by the `flowpipe` binary: the built-ins plus
//! small arithmetic, string, timing and diagnostic functions that manifests
//! can reference by name.

use std::thread;
use std::time::Duration;

use crate::registry::{Arity, Kwargs, WorkerError, WorkerRegistry};
use crate::value::Value;

/// Built-ins plus the functions in this module.
pub fn standard_registry() -> WorkerRegistry {
    let mut r = WorkerRegistry::new();
    install(&mut r).expect("standard names are distinct");
    r
}

fn install(r: &mut WorkerRegistry) -> Result<(), crate::registry::RegistryError> {
    r.register_with_arity("where", Arity::Exactly(1), |inbox, _| Ok(Value::Str(where_(&inbox[0]))))?;
    r.register_unary("math.inc", |v, _| int_op(v, "math.inc", |i| i.checked_add(1)))?;
    r.register_unary("math.double", |v, _| int_op(v, "math.double", |i| i.checked_mul(2)))?;
    r.register_unary("math.square", |v, _| int_op(v, "math.square", |i| i.checked_mul(i)))?;
    r.register_unary("math.neg", |v, _| int_op(v, "math.neg", |i| i.checked_neg()))?;
    r.register_unary("math.add", |v, kw| {
        let n = int_kwarg(kw, "n")?.unwrap_or(0);
        int_op(v, "math.add", |i| i.checked_add(n))
    })?;
    r.register_unary("math.mod", |v, kw| {
        let n = int_kwarg(kw, "n")?.ok_or_else(|| WorkerError::user("missing kwarg `n`"))?;
        int_op(v, "math.mod", |i| i.checked_rem_euclid(n))
    })?;
    r.register_unary("math.reciprocal", |v, _| {
        let x = v.as_f64().ok_or_else(|| type_error("math.reciprocal", "a number", v))?;
        if x == 0.0 {
            return Err(WorkerError::user("division by zero"));
        }
        Ok(Value::Float(1.0 / x))
    })?;
    r.register("math.sum", |inbox, _| sum(flatten(inbox)))?;
    r.register("str.concat", |inbox, kw| {
        let sep = str_kwarg(kw, "sep")?.unwrap_or("");
        let parts: Vec<String> = flatten(inbox).iter().map(Value::to_display_string).collect();
        Ok(Value::Str(parts.join(sep)))
    })?;
    r.register_unary("str.upper", |v, _| Ok(Value::Str(v.to_display_string().to_uppercase())))?;
    r.register_unary("str.reverse", |v, _| Ok(Value::Str(v.to_display_string().chars().rev().collect())))?;
    r.register_unary("str.len", |v, _| Ok(Value::from(v.to_display_string().chars().count())))?;
    r.register_unary("time.sleep", |v, kw| {
        let ms = int_kwarg(kw, "ms")?.unwrap_or(0).max(0) as u64;
        thread::sleep(Duration::from_millis(ms));
        Ok(v.clone())
    })?;
    // produce helper: n sub-items x*n, x*n+1, ..
    r.register_unary("seq.fan", |v, kw| {
        let n = int_kwarg(kw, "n")?.ok_or_else(|| WorkerError::user("missing kwarg `n`"))?;
        let x = v.as_i64().ok_or_else(|| type_error("seq.fan", "an integer", v))?;
        let base = x.checked_mul(n).ok_or_else(|| WorkerError::user("integer overflow"))?;
        Ok(Value::List((0..n).map(|j| Value::Int(base + j)).collect()))
    })?;
    r.register_unary("debug.fail_if", |v, kw| match kw.get("value") {
        Some(bad) if bad == v => Err(WorkerError::user(format!("poisoned value {v}"))),
        _ => Ok(v.clone()),
    })?;
    Ok(())
}

/// Identification string in the form `input: X, host:H, parent P, process:Q, thread:T`.
pub fn where_(input: &Value) -> String {
    let host = hostname();
    let parent = std::os::unix::process::parent_id();
    let process = std::process::id();
    let current = thread::current();
    let thread = current.name().map(str::to_owned).unwrap_or_else(|| format!("{:?}", current.id()));
    format!("input: {input}, host:{host}, parent {parent}, process:{process}, thread:{thread}")
}

fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buf is writable for its full length; gethostname NUL-terminates on success.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return "unknown".into();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

fn type_error(name: &str, wanted: &str, got: &Value) -> WorkerError {
    WorkerError::user(format!("{name} expects {wanted}, got {}", got.type_name()))
}

fn int_op(v: &Value, name: &str, f: impl Fn(i64) -> Option<i64>) -> Result<Value, WorkerError> {
    let i = v.as_i64().ok_or_else(|| type_error(name, "an integer", v))?;
    f(i).map(Value::Int).ok_or_else(|| WorkerError::user(format!("{name}: integer overflow")))
}

fn int_kwarg(kw: &Kwargs, key: &str) -> Result<Option<i64>, WorkerError> {
    match kw.get(key) {
        None => Ok(None),
        Some(v) => v.as_i64().map(Some).ok_or_else(|| WorkerError::user(format!("kwarg `{key}` must be an integer"))),
    }
}

fn str_kwarg<'a>(kw: &'a Kwargs, key: &str) -> Result<Option<&'a str>, WorkerError> {
    match kw.get(key) {
        None => Ok(None),
        Some(v) => v.as_str().map(Some).ok_or_else(|| WorkerError::user(format!("kwarg `{key}` must be a string"))),
    }
}

/// A single list input is treated as the operand list (gathered sub-results).
fn flatten(inbox: &[Value]) -> Vec<Value> {
    match inbox {
        [Value::List(items)] => items.clone(),
        many => many.to_vec(),
    }
}

fn sum(values: Vec<Value>) -> Result<Value, WorkerError> {
    if values.iter().all(|v| matches!(v, Value::Int(_))) {
        let mut acc: i64 = 0;
        for v in &values {
            acc = acc
                .checked_add(v.as_i64().unwrap_or_default())
                .ok_or_else(|| WorkerError::user("math.sum: integer overflow"))?;
        }
        return Ok(Value::Int(acc));
    }
    let mut acc = 0.0;
    for v in &values {
        acc += v.as_f64().ok_or_else(|| type_error("math.sum", "numbers", v))?;
    }
    Ok(Value::Float(acc))
}
