//! Assembling listings with a system assembler (GNU `as`), for cross-checking the
//! built-in encoder and for regenerating the golden encoding corpus.

use std::path::{Path, PathBuf};
use std::process::Command;

use object::{Object, ObjectSection};
use thiserror::Error;

use crate::x86::Inst;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("running {path}: {source}")]
    Spawn {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} failed: {stderr}")]
    Failed { path: PathBuf, stderr: String },
    #[error("temporary files: {0}")]
    Io(#[from] std::io::Error),
    #[error("reading object file: {0}")]
    Object(#[from] object::Error),
    #[error("object file has no .text section")]
    NoText,
}

/// `.text` bytes of `listing` (a complete Intel-syntax source) assembled by `assembler`.
pub fn assemble_listing(assembler: &Path, listing: &str) -> Result<Vec<u8>, ExternalError> {
    let dir = tempfile::tempdir()?;
    let src = dir.path().join("input.s");
    let obj = dir.path().join("input.o");
    std::fs::write(&src, listing)?;
    let out = Command::new(assembler)
        .arg("--64")
        .arg("-o")
        .arg(&obj)
        .arg(&src)
        .output()
        .map_err(|source| ExternalError::Spawn {
            path: assembler.into(),
            source,
        })?;
    if !out.status.success() {
        return Err(ExternalError::Failed {
            path: assembler.into(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    let data = std::fs::read(&obj)?;
    let file = object::File::parse(&*data)?;
    let text = file.section_by_name(".text").ok_or(ExternalError::NoText)?;
    Ok(text.data()?.to_vec())
}

/// Machine code for each instruction, assembled one per line in a single run.
///
/// Instructions are separated by distinct marker bytes so the output can be split
/// without relying on the internal encoder's lengths.
pub fn assemble_each(assembler: &Path, insts: &[Inst]) -> Result<Vec<Vec<u8>>, ExternalError> {
    const MARK: [u8; 4] = [0xde, 0xc0, 0xad, 0x0b];
    let mut src = String::from(".intel_syntax noprefix\n.text\n");
    for i in insts {
        src.push_str(&format!("    {i}\n    .byte 0xde, 0xc0, 0xad, 0x0b\n"));
    }
    let text = assemble_listing(assembler, &src)?;
    let mut out = Vec::with_capacity(insts.len());
    let mut start = 0;
    let mut i = 0;
    while i + MARK.len() <= text.len() && out.len() < insts.len() {
        if text[i..i + MARK.len()] == MARK {
            out.push(text[start..i].to_vec());
            i += MARK.len();
            start = i;
        } else {
            i += 1;
        }
    }
    if out.len() != insts.len() {
        return Err(ExternalError::Failed {
            path: assembler.into(),
            stderr: format!("expected {} instructions, split {}", insts.len(), out.len()),
        });
    }
    Ok(out)
}

/// The first `as` found on `PATH`.
pub fn find_assembler() -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join("as"))
        .find(|p| p.is_file())
}
