//! Workers present on every fresh registry.

use std::io::Write;
use std::process::{Command, Stdio};
use std::thread;

use crate::codec::Codec;
use crate::ipc::{Locator, Method, Stage};
use crate::registry::{Arity, Kwargs, WorkerError, WorkerRegistry};
use crate::value::Value;

pub const IDENTITY: &str = "identity";
pub const PRINT: &str = "io.print";
pub const DUMP_ITEM: &str = "io.dump_item";
pub const LOAD_ITEM: &str = "io.load_item";
pub const SHELL_EXEC: &str = "shell.exec";

pub(crate) fn install(r: &mut WorkerRegistry) {
    r.register_with_arity(IDENTITY, Arity::Exactly(1), |inbox, _| Ok(inbox[0].clone()))
        .and_then(|r| r.register(PRINT, print))
        .and_then(|r| r.register_with_arity(DUMP_ITEM, Arity::Exactly(1), dump_item))
        .and_then(|r| r.register_with_arity(LOAD_ITEM, Arity::Exactly(1), load_item))
        .and_then(|r| r.register_with_arity(SHELL_EXEC, Arity::Exactly(1), shell_exec))
        .expect("built-in names are distinct");
}

fn single_or_list(inbox: &[Value]) -> Value {
    match inbox {
        [one] => one.clone(),
        many => Value::List(many.to_vec()),
    }
}

fn print(inbox: &[Value], _: &Kwargs) -> Result<Value, WorkerError> {
    let out = single_or_list(inbox);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{out}").and_then(|_| stdout.flush()).map_err(WorkerError::user)?;
    Ok(out)
}

fn str_kwarg<'a>(kwargs: &'a Kwargs, key: &str) -> Result<Option<&'a str>, WorkerError> {
    match kwargs.get(key) {
        None => Ok(None),
        Some(Value::Str(s)) => Ok(Some(s)),
        Some(other) => Err(WorkerError::user(format!("kwarg `{key}` must be a string, got {}", other.type_name()))),
    }
}

/// kwargs: `type` (socket | pipe | file, default socket), `codec` (default bin-v1).
fn dump_item(inbox: &[Value], kwargs: &Kwargs) -> Result<Value, WorkerError> {
    let method: Method = str_kwarg(kwargs, "type")?.unwrap_or("socket").parse().map_err(WorkerError::user)?;
    let codec: Codec = str_kwarg(kwargs, "codec")?.unwrap_or("bin-v1").parse().map_err(WorkerError::user)?;
    let locator = Stage::global().dump_item(&inbox[0], method, codec).map_err(WorkerError::ipc)?;
    Ok(locator.to_value())
}

fn load_item(inbox: &[Value], _: &Kwargs) -> Result<Value, WorkerError> {
    let locator = Locator::from_value(&inbox[0]).map_err(WorkerError::ipc)?;
    Stage::global().load_item(&locator).map_err(WorkerError::ipc)
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// kwargs: `cmd`, run with `sh -c`. A `{}` in the template is replaced by the
/// quoted payload text; without one the payload text is fed on stdin.
fn shell_exec(inbox: &[Value], kwargs: &Kwargs) -> Result<Value, WorkerError> {
    let template = str_kwarg(kwargs, "cmd")?.ok_or_else(|| WorkerError::user("missing kwarg `cmd`"))?;
    let text = inbox[0].to_display_string();
    let (cmd, stdin) = if template.contains("{}") {
        (template.replace("{}", &shell_quote(&text)), None)
    } else {
        (template.to_owned(), Some(text))
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| WorkerError::user(format!("spawn `{cmd}`: {e}")))?;
    let feeder = stdin.zip(child.stdin.take()).map(|(text, mut pipe)| {
        thread::spawn(move || {
            let _ = pipe.write_all(text.as_bytes());
        })
    });
    let out = child.wait_with_output().map_err(|e| WorkerError::user(format!("`{cmd}`: {e}")))?;
    if let Some(f) = feeder {
        let _ = f.join();
    }
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        return Err(WorkerError::user(format!("`{cmd}` exited with {}: {}", out.status, err.trim())));
    }
    let mut s =
        String::from_utf8(out.stdout).map_err(|e| WorkerError::user(format!("`{cmd}`: non-UTF-8 output: {e}")))?;
    if s.ends_with('\n') {
        s.pop();
    }
    Ok(Value::Str(s))
}
