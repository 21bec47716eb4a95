#![allow(dead_code)]

use std::path::PathBuf;

use swire_core::dataset::{generate_corpus, CorpusConfig, Manifest};
use swire_core::encoder::{Encoder, EncoderConfig};
use swire_core::pipeline::{build_index, manifest_screens, DEFAULT_GRID};
use swire_service::{Snapshot, Sources};
use tempfile::TempDir;

/// A small corpus with untrained weights and a 3x3 index on disk.
pub struct Fixture {
    pub dir: TempDir,
    pub manifest: Manifest,
    pub sources: Sources,
}

impl Fixture {
    pub fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let cfg = CorpusConfig { n, designers: 2, apps: 4, seed: 3, trace_len: 3, ..CorpusConfig::default() };
        let manifest = generate_corpus(&cfg, &corpus).unwrap();
        let enc = Encoder::build(&EncoderConfig::desk(), 1).unwrap();
        let weights = dir.path().join("w.swenc");
        enc.save(&weights).unwrap();
        let idx = build_index(&enc, &manifest_screens(&manifest).unwrap(), Some(DEFAULT_GRID)).unwrap();
        let index = dir.path().join("screens.swidx");
        idx.save(&index).unwrap();
        let sources = Sources { weights, index, manifest: Some(corpus.join("manifest.json")) };
        Self { dir, manifest, sources }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::load(&self.sources).unwrap()
    }

    pub fn sketch(&self, i: usize) -> PathBuf {
        self.manifest.resolve(self.manifest.pairs[i].sketch.as_ref().unwrap())
    }

    pub fn sketch_png(&self, i: usize) -> Vec<u8> {
        std::fs::read(self.sketch(i)).unwrap()
    }

    /// Sketch paths of the first `len` positions of one trace, in order.
    pub fn flow_sketches(&self, len: usize) -> Vec<PathBuf> {
        let trace = self.manifest.pairs[0].trace.clone().unwrap().id;
        let mut steps: Vec<_> =
            self.manifest.pairs.iter().filter(|r| r.trace.as_ref().is_some_and(|t| t.id == trace)).collect();
        steps.sort_by_key(|r| r.trace.as_ref().unwrap().position);
        steps.iter().take(len).map(|r| self.manifest.resolve(r.sketch.as_ref().unwrap())).collect()
    }
}
