//! Parameter traversal and on-disk parameter directories.
//!
//! A directory holds one tensor file per parameter plus `manifest.txt`,
//! one `name = file` line per tensor in traversal order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::io::{read_tensor, write_tensor};
use crate::numeric::Tensor;

pub const MANIFEST: &str = "manifest.txt";

/// Anything that owns tensors. Traversal order must be deterministic and
/// identical between `visit` and `visit_mut`.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.requires_grad {
                n += t.numel()
            }
        });
        n
    }
}

/// Prefixes names of a nested module's tensors.
pub fn visit_child(
    prefix: &str,
    child: &dyn Module,
    f: &mut dyn FnMut(&str, &Tensor),
) {
    child.visit(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}

pub fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Module,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    child.visit_mut(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}

fn file_name(name: &str) -> String {
    format!("{}.hmba", name.replace(['/', '\\'], "_"))
}

pub fn save_dir(module: &dyn Module, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut err = None;
    module.visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let file = file_name(name);
        manifest.push_str(&format!("{name} = {file}\n"));
        if let Err(e) = write_tensor(&dir.join(&file), t) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("line {}: expected `name = file`", lineno + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Manifest(format!("duplicate entry {}", k.trim())));
        }
    }
    Ok(out)
}

/// Loads tensors into an already-constructed module of the right structure.
pub fn load_dir(module: &mut dyn Module, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = parse_manifest(&text)?;
    let mut err = None;
    module.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(file) = entries.remove(name) else {
            err = Some(Error::Manifest(format!("missing entry for {name}")));
            return;
        };
        match read_tensor(&dir.join(&file)) {
            Ok(loaded) if loaded.shape() == t.shape() => {
                t.data_mut().copy_from_slice(loaded.data());
            }
            Ok(loaded) => {
                err = Some(Error::Manifest(format!(
                    "{name}: file shape {:?} != model shape {:?}",
                    loaded.shape(),
                    t.shape()
                )))
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Manifest(format!("unexpected entry {extra}")));
    }
    Ok(())
}
