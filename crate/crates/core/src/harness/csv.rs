// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plot-ready CSV output. Values are printed with a fixed number of
//! decimals so files are byte-stable across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::localize::GridRow;
use super::trace::TraceRow;
use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "stream,layer,pos,prob";
pub const GRID_HEADER: &str = "layer,pos,metric,value";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.8}", r.stream, r.layer, r.pos, r.prob).expect("write to string");
    }
    out
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.layer, r.pos, r.metric, r.value).expect("write to string");
    }
    out
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
