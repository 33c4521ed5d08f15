//! Named worker functions, function chains and guarded chain evaluation.
//!
//! Functions are looked up by name so a chain can be described in a
//! manifest or sent to another host; the executing host must have the same
//! names registered.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;

use crate::envelope::{Body, Envelope, ErrorClass, FaultInfo};
use crate::log::Logger;
use crate::value::Value;

pub type Kwargs = BTreeMap<String, Value>;

/// An error raised by a worker function. Converted into a fault by [`apply_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerError {
    pub class: ErrorClass,
    pub message: String,
}

impl WorkerError {
    pub fn user(message: impl fmt::Display) -> Self {
        WorkerError { class: ErrorClass::User, message: message.to_string() }
    }

    pub fn ipc(message: impl fmt::Display) -> Self {
        WorkerError { class: ErrorClass::Ipc, message: message.to_string() }
    }
}

impl fmt::Display for WorkerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl std::error::Error for WorkerError {}

/// A worker function: receives the inbox payloads and its keyword arguments.
///
/// Functions may be invoked from many lanes at once and must be re-entrant.
pub type WorkerFn = Arc<dyn Fn(&[Value], &Kwargs) -> Result<Value, WorkerError> + Send + Sync>;

/// How many inbox values a function accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Any,
    Exactly(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("worker function `{0}` is already registered")]
    DuplicateName(String),
    #[error("registry is frozen")]
    RegistryFrozen,
    #[error("unknown worker function `{0}`")]
    UnknownFunction(String),
    #[error("a worker chain needs at least one stage")]
    EmptyChain,
}

#[derive(Clone)]
struct Entry {
    f: WorkerFn,
    arity: Arity,
}

#[derive(Clone)]
pub struct WorkerRegistry {
    entries: BTreeMap<String, Entry>,
    frozen: bool,
}

impl fmt::Debug for WorkerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkerRegistry")
            .field("names", &self.entries.keys().collect::<Vec<_>>())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl Default for WorkerRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl WorkerRegistry {
    /// A registry holding the built-in workers.
    pub fn new() -> Self {
        let mut r = Self::empty();
        crate::builtins::install(&mut r);
        r
    }

    pub fn empty() -> Self {
        WorkerRegistry { entries: BTreeMap::new(), frozen: false }
    }

    /// Registers a function that accepts an inbox of any length.
    pub fn register<F>(&mut self, name: &str, f: F) -> Result<&mut Self, RegistryError>
    where
        F: Fn(&[Value], &Kwargs) -> Result<Value, WorkerError> + Send + Sync + 'static,
    {
        self.register_with_arity(name, Arity::Any, f)
    }

    pub fn register_with_arity<F>(&mut self, name: &str, arity: Arity, f: F) -> Result<&mut Self, RegistryError>
    where
        F: Fn(&[Value], &Kwargs) -> Result<Value, WorkerError> + Send + Sync + 'static,
    {
        if self.frozen {
            return Err(RegistryError::RegistryFrozen);
        }
        if self.entries.contains_key(name) {
            return Err(RegistryError::DuplicateName(name.to_owned()));
        }
        self.entries.insert(name.to_owned(), Entry { f: Arc::new(f), arity });
        Ok(self)
    }

    /// Single-input convenience: the function sees `inbox[0]`.
    pub fn register_unary<F>(&mut self, name: &str, f: F) -> Result<&mut Self, RegistryError>
    where
        F: Fn(&Value, &Kwargs) -> Result<Value, WorkerError> + Send + Sync + 'static,
    {
        self.register_with_arity(name, Arity::Exactly(1), move |inbox, kw| f(&inbox[0], kw))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes the registry and wraps it for sharing across lanes.
    pub fn into_shared(mut self) -> Arc<WorkerRegistry> {
        self.freeze();
        Arc::new(self)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn resolve(&self, name: &str) -> Option<(WorkerFn, Arity)> {
        self.entries.get(name).map(|e| (e.f.clone(), e.arity))
    }

    /// Names in `chain` that this registry cannot resolve.
    pub fn missing(&self, chain: &WorkerChain) -> Vec<String> {
        chain.stages.iter().filter(|s| !self.contains(&s.name)).map(|s| s.name.clone()).collect()
    }
}

/// A reference to a registered function plus its keyword arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionRef {
    pub name: String,
    pub kwargs: Kwargs,
}

impl FunctionRef {
    pub fn new(name: impl Into<String>) -> Self {
        FunctionRef { name: name.into(), kwargs: Kwargs::new() }
    }

    pub fn kwarg(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.kwargs.insert(key.to_owned(), value.into());
        self
    }

    pub fn to_value(&self) -> Value {
        crate::vmap! { "fn" => self.name.as_str(), "kwargs" => Value::Map(self.kwargs.clone()) }
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let name = v.get("fn").and_then(Value::as_str).ok_or("function ref needs `fn`")?;
        let kwargs = match v.get("kwargs") {
            None => Kwargs::new(),
            Some(Value::Map(m)) => m.clone(),
            Some(_) => return Err("kwargs must be a map".into()),
        };
        Ok(FunctionRef { name: name.to_owned(), kwargs })
    }
}

impl From<&str> for FunctionRef {
    fn from(name: &str) -> Self {
        FunctionRef::new(name)
    }
}

/// Functions evaluated in order within one piper.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerChain {
    stages: Vec<FunctionRef>,
    /// When set, faults in the inbox are handed to the first stage as marker
    /// values instead of short-circuiting.
    pub handles_faults: bool,
}

impl WorkerChain {
    pub fn new(stages: Vec<FunctionRef>) -> Result<Self, RegistryError> {
        if stages.is_empty() {
            return Err(RegistryError::EmptyChain);
        }
        Ok(WorkerChain { stages, handles_faults: false })
    }

    /// A one-stage chain without kwargs.
    pub fn single(name: &str) -> Self {
        WorkerChain { stages: vec![FunctionRef::new(name)], handles_faults: false }
    }

    pub fn of(names: &[&str]) -> Result<Self, RegistryError> {
        Self::new(names.iter().map(|n| FunctionRef::new(*n)).collect())
    }

    pub fn handling_faults(mut self, yes: bool) -> Self {
        self.handles_faults = yes;
        self
    }

    pub fn stages(&self) -> &[FunctionRef] {
        &self.stages
    }

    pub fn push(&mut self, stage: FunctionRef) {
        self.stages.push(stage);
    }

    pub fn prepend(&mut self, stage: FunctionRef) {
        self.stages.insert(0, stage);
    }
}

/// Builds a chain, checking that every stage resolves in `registry`.
pub fn compose_chain(registry: &WorkerRegistry, stages: Vec<FunctionRef>) -> Result<WorkerChain, RegistryError> {
    let chain = WorkerChain::new(stages)?;
    if let Some(name) = registry.missing(&chain).into_iter().next() {
        return Err(RegistryError::UnknownFunction(name));
    }
    Ok(chain)
}

/// Evaluates `chain` on `inbox` for the piper `piper`. Never fails and never
/// panics: errors raised by user functions (including panics) become fault
/// envelopes, and a fault already in the inbox is passed on with one more
/// hop without invoking anything, unless the chain handles faults.
pub fn apply_chain(
    registry: &WorkerRegistry,
    chain: &WorkerChain,
    piper: &str,
    inbox: &[Envelope],
    logger: &Logger,
) -> Envelope {
    let Some(first) = inbox.first() else {
        let fault = FaultInfo::new(piper, 0, ErrorClass::User, "empty inbox");
        logger.error(piper, format_args!("item ?: {fault}"));
        return Envelope::fault(0, fault);
    };
    let (item_index, sub_index) = (first.item_index, first.sub_index);

    if !chain.handles_faults {
        if let Some(f) = inbox.iter().find_map(Envelope::as_fault) {
            let mut f = f.clone();
            f.hops += 1;
            return Envelope::fault(item_index, f).with_sub_index(sub_index);
        }
    }

    let mut values: Vec<Value> = inbox
        .iter()
        .map(|e| match &e.body {
            Body::Payload(v) => v.clone(),
            Body::Fault(f) => f.to_marker(),
        })
        .collect();

    let fail = |stage: usize, class: ErrorClass, message: String| {
        let fault = FaultInfo::new(piper, stage as u32, class, message);
        logger.error(piper, format_args!("item {item_index}: {fault}"));
        Envelope::fault(item_index, fault).with_sub_index(sub_index)
    };

    for (k, stage) in chain.stages.iter().enumerate() {
        let Some((f, arity)) = registry.resolve(&stage.name) else {
            return fail(k, ErrorClass::User, format!("unknown worker function `{}`", stage.name));
        };
        if let Arity::Exactly(n) = arity {
            if values.len() != n {
                return fail(
                    k,
                    ErrorClass::User,
                    format!("`{}` expects {n} inbox value(s), got {}", stage.name, values.len()),
                );
            }
        }
        match panic::catch_unwind(AssertUnwindSafe(|| f(&values, &stage.kwargs))) {
            Ok(Ok(v)) => values = vec![v],
            Ok(Err(e)) => return fail(k, e.class, format!("{}: {}", stage.name, e.message)),
            Err(p) => {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".to_owned());
                return fail(k, ErrorClass::User, format!("{} panicked: {msg}", stage.name));
            }
        }
    }
    let out = values.pop().expect("chain is non-empty");
    Envelope::payload(item_index, out).with_sub_index(sub_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::Level;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn registry() -> (WorkerRegistry, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let mut r = WorkerRegistry::new();
        let c = calls.clone();
        r.register_unary("inc", move |v, _| {
            c.fetch_add(1, Ordering::SeqCst);
            v.as_i64().map(|i| Value::Int(i + 1)).ok_or_else(|| WorkerError::user("not an int"))
        })
        .unwrap();
        r.register_unary("reciprocal", |v, _| {
            let i = v.as_i64().ok_or_else(|| WorkerError::user("not an int"))?;
            if i == 0 {
                return Err(WorkerError::user("division by zero"));
            }
            Ok(Value::Float(1.0 / i as f64))
        })
        .unwrap();
        r.register_with_arity("sum2", Arity::Exactly(2), |inbox, _| {
            Ok(Value::Int(inbox.iter().filter_map(Value::as_i64).sum()))
        })
        .unwrap();
        r.register_unary("explode", |_, _| panic!("kaboom")).unwrap();
        (r, calls)
    }

    #[test]
    fn builtins_are_present() {
        let r = WorkerRegistry::new();
        for name in ["io.print", "io.dump_item", "io.load_item", "identity", "shell.exec"] {
            assert!(r.contains(name), "{name}");
        }
    }

    #[test]
    fn registration_errors() {
        let mut r = WorkerRegistry::empty();
        r.register_unary("identity", |v, _| Ok(v.clone())).unwrap();
        assert!(r.resolve("identity").is_some());
        assert_eq!(
            r.register_unary("identity", |v, _| Ok(v.clone())).err(),
            Some(RegistryError::DuplicateName("identity".into()))
        );
        r.freeze();
        assert_eq!(r.register_unary("other", |v, _| Ok(v.clone())).err(), Some(RegistryError::RegistryFrozen));
    }

    #[test]
    fn compose_checks_names() {
        let (r, _) = registry();
        assert_eq!(compose_chain(&r, vec![]), Err(RegistryError::EmptyChain));
        assert_eq!(
            compose_chain(&r, vec!["inc".into(), "nosuch".into()]),
            Err(RegistryError::UnknownFunction("nosuch".into()))
        );
    }

    #[test]
    fn chain_composes_left_to_right() {
        let (r, _) = registry();
        let chain = compose_chain(&r, vec!["inc".into(), "inc".into()]).unwrap();
        let out = apply_chain(&r, &chain, "p", &[Envelope::payload(4, 3)], &Logger::memory(Level::Debug));
        assert_eq!(out, Envelope::payload(4, 5));
    }

    #[test]
    fn user_error_becomes_fault_and_is_logged_once() {
        let (r, _) = registry();
        let log = Logger::memory(Level::Debug);
        let chain = WorkerChain::of(&["inc", "reciprocal"]).unwrap();
        let out = apply_chain(&r, &chain, "p", &[Envelope::payload(2, -1)], &log);
        let f = out.as_fault().unwrap();
        assert_eq!((f.origin_piper.as_str(), f.stage_index, f.error_class, f.hops), ("p", 1, ErrorClass::User, 0));
        assert_eq!(out.item_index, 2);
        let errors: Vec<_> = log.records().into_iter().filter(|r| r.level == Level::Error).collect();
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].source, "p");
    }

    #[test]
    fn fault_inbox_short_circuits() {
        let (r, calls) = registry();
        let mut f = FaultInfo::new("up", 0, ErrorClass::User, "x");
        f.hops = 2;
        let log = Logger::memory(Level::Debug);
        let out = apply_chain(&r, &WorkerChain::single("inc"), "p", &[Envelope::fault(5, f)], &log);
        let f = out.as_fault().unwrap();
        assert_eq!((f.hops, f.origin_piper.as_str()), (3, "up"));
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert!(log.records().is_empty());
    }

    #[test]
    fn fault_handling_chain_sees_markers() {
        let mut r = WorkerRegistry::empty();
        r.register("count_faults", |inbox, _| {
            Ok(Value::Int(inbox.iter().filter(|v| FaultInfo::from_marker(v).is_some()).count() as i64))
        })
        .unwrap();
        let chain = WorkerChain::single("count_faults").handling_faults(true);
        let inbox = [Envelope::payload(0, 1), Envelope::fault(0, FaultInfo::new("a", 0, ErrorClass::User, "x"))];
        let out = apply_chain(&r, &chain, "p", &inbox, &Logger::memory(Level::Debug));
        assert_eq!(out.as_payload(), Some(&Value::Int(1)));
    }

    #[test]
    fn arity_mismatch_is_a_fault() {
        let (r, calls) = registry();
        let log = Logger::memory(Level::Debug);
        let two = [Envelope::payload(0, 41), Envelope::payload(0, 1)];
        let out = apply_chain(&r, &WorkerChain::single("inc"), "p", &two, &log);
        assert_eq!(out.as_fault().unwrap().error_class, ErrorClass::User);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        let out = apply_chain(&r, &WorkerChain::single("sum2"), "p", &two, &log);
        assert_eq!(out.as_payload(), Some(&Value::Int(42)));
        let out = apply_chain(&r, &WorkerChain::single("sum2"), "p", &two[..1], &log);
        assert!(out.is_fault());
    }

    #[test]
    fn panics_and_unknown_names_are_faults() {
        let (r, _) = registry();
        let log = Logger::memory(Level::Error);
        let out = apply_chain(&r, &WorkerChain::single("explode"), "p", &[Envelope::payload(0, 1)], &log);
        assert!(out.as_fault().unwrap().message.contains("kaboom"));
        let out = apply_chain(&r, &WorkerChain::single("ghost"), "p", &[Envelope::payload(0, 1)], &log);
        assert!(out.is_fault());
        let out = apply_chain(&r, &WorkerChain::single("inc"), "p", &[], &log);
        assert!(out.is_fault());
    }

    #[test]
    fn reciprocal_of_zero_faults_at_stage_zero() {
        let (r, _) = registry();
        let out = apply_chain(
            &r,
            &WorkerChain::single("reciprocal"),
            "p",
            &[Envelope::payload(0, 0)],
            &Logger::memory(Level::Error),
        );
        let f = out.as_fault().unwrap();
        assert_eq!((f.stage_index, f.error_class), (0, ErrorClass::User));
    }
}
