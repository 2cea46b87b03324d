//! JSON-lines sink. The first line carries the schema version and the
//! resolved config; `runtime_s` in the summary is the only timing field.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::Globals;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Output {
    sink: Box<dyn Write>,
    csv: Option<csv::Writer<File>>,
    started: Instant,
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl Output {
    pub fn open<T: Serialize>(command: &str, globals: &Globals, args: &T) -> Result<Self, CliError> {
        let sink: Box<dyn Write> = match &globals.out {
            Some(path) => Box::new(BufWriter::new(File::create(path)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        let csv = match &globals.csv {
            Some(path) => Some(csv::Writer::from_path(path).map_err(|e| CliError::Config(e.to_string()))?),
            None => None,
        };
        let mut config = match serde_json::to_value(args).map_err(internal)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        if let Value::Object(g) = serde_json::to_value(globals).map_err(internal)? {
            config.extend(g);
        }
        let mut out = Output { sink, csv, started: Instant::now() };
        out.line(&json!({ "schema_version": SCHEMA_VERSION, "command": command, "config": config }))?;
        Ok(out)
    }

    fn line(&mut self, v: &Value) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.sink, v).map_err(internal)?;
        self.sink.write_all(b"\n")?;
        Ok(())
    }

    /// A data record tagged with its kind.
    pub fn record<T: Serialize>(&mut self, kind: &str, body: &T) -> Result<(), CliError> {
        let mut m = Map::new();
        m.insert("record".into(), kind.into());
        match serde_json::to_value(body).map_err(internal)? {
            Value::Object(b) => m.extend(b),
            other => {
                m.insert("value".into(), other);
            }
        }
        self.line(&Value::Object(m))
    }

    pub fn summary<T: Serialize>(&mut self, body: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(body).map_err(internal)?;
        if let Value::Object(m) = &mut v {
            m.insert("runtime_s".into(), self.started.elapsed().as_secs_f64().into());
        }
        self.record("summary", &v)
    }

    pub fn csv_row<I, S>(&mut self, row: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        if let Some(w) = &mut self.csv {
            w.write_record(row).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn finish(mut self, result: Result<(), CliError>) -> Result<(), CliError> {
        self.sink.flush()?;
        if let Some(w) = &mut self.csv {
            w.flush()?;
        }
        result
    }
}
