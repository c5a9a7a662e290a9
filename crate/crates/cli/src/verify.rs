//! Re-checks an artifact directory against its manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use xmprobe_core::tinylm::TinyLm;
use xmprobe_core::tinyvit::TinyVit;

use crate::manifest::{file_sha256, DirLock, RunManifest, MANIFEST_DIR};
use crate::pipeline::{paths, read_stage_report, STAGES};

#[derive(Debug, Default)]
pub struct VerifyReport {
    pub stages: Vec<String>,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const ADAPTER_STAGES: [(&str, &str); 2] =
    [("train-adapter-1", paths::STAGE1_REPORT), ("train-adapter-2", paths::STAGE2_REPORT)];

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

/// Checks, in order: frozen LM and ViT checkpoints against what each
/// adapter stage consumed, the parent digests of every manifest, checksum
/// drift of inputs and outputs, and files no manifest accounts for.
pub fn verify(root: &Path) -> Result<VerifyReport> {
    let mut manifests = Vec::new();
    for s in &STAGES {
        if let Some(m) = RunManifest::read(root, s.name)? {
            manifests.push((s, m));
        }
    }
    if manifests.is_empty() {
        bail!("no manifests under {}", root.join(MANIFEST_DIR).display());
    }
    let mut r = VerifyReport { stages: manifests.iter().map(|(s, _)| s.name.to_string()).collect(), ..Default::default() };
    let find = |name: &str| manifests.iter().find(|(s, _)| s.name == name).map(|(_, m)| m);

    let lm_sum = TinyLm::load(&root.join(paths::LM)).ok().map(|m| m.checksum());
    let vit_sum = TinyVit::load(&root.join(paths::VIT)).ok().map(|m| m.checksum());
    for (stage, report_rel) in ADAPTER_STAGES {
        let Some(m) = find(stage) else { continue };
        for rel in [paths::LM, paths::VIT] {
            let now = file_sha256(&root.join(rel)).ok();
            if m.inputs.get(rel) != now.as_ref() {
                r.failures.push(format!("{stage}: frozen checkpoint {rel} differs from the one this stage used"));
            }
        }
        match read_stage_report(root, report_rel) {
            Ok(rep) => {
                if lm_sum.as_deref() != Some(rep.lm_checksum.as_str()) {
                    r.failures.push(format!("{stage}: LM weights no longer match the frozen checksum {}", rep.lm_checksum));
                }
                if vit_sum.as_deref() != Some(rep.vit_checksum.as_str()) {
                    r.failures.push(format!("{stage}: ViT weights no longer match the frozen checksum {}", rep.vit_checksum));
                }
            }
            Err(e) => r.failures.push(format!("{stage}: unreadable stage report {report_rel}: {e:#}")),
        }
    }

    for (def, m) in &manifests {
        let want: BTreeSet<&str> = def.parents.iter().copied().collect();
        let have: BTreeSet<&str> = m.parents.keys().map(String::as_str).collect();
        if want != have {
            r.failures.push(format!("{}: manifest lists parents {have:?}, expected {want:?}", def.name));
        }
        for (p, digest) in &m.parents {
            match find(p) {
                None => r.failures.push(format!("{}: parent manifest `{p}` is missing", def.name)),
                Some(pm) if pm.digest() != *digest => {
                    r.failures.push(format!("{}: parent `{p}` digest does not match its manifest", def.name))
                }
                _ => {}
            }
        }
        for rel in m.drifted_inputs(root) {
            r.failures.push(format!("{}: input {rel} changed or missing", def.name));
        }
        for rel in m.drifted_outputs(root) {
            r.failures.push(format!("{}: output {rel} changed or missing", def.name));
        }
    }

    let owned: BTreeSet<&str> = manifests.iter().flat_map(|(_, m)| m.outputs.keys().map(String::as_str)).collect();
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    for f in files {
        if f == DirLock::FILE || f.starts_with(&format!("{MANIFEST_DIR}/")) {
            continue;
        }
        if !owned.contains(f.as_str()) {
            r.failures.push(format!("orphan file {f}: no manifest produced it"));
        }
    }
    Ok(r)
}
