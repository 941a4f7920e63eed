use std::path::Path;

use iflow::datasets::{load_bundle, write_bundle, BundleMeta, LabeledDataset, SyntheticSpec};

use crate::config::{check_kind, create_dir, parse, read_json, write_manifest};
use crate::error::{CliError, CliResult};

/// Seed of the test split, derived from the run seed.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

pub fn synth(spec_path: &Path, out: &Path, seed: u64) -> CliResult<()> {
    let value = read_json(spec_path)?;
    let what = spec_path.display().to_string();
    check_kind(&value, &what)?;
    let spec: SyntheticSpec = parse(&value, &what)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    for (name, s) in [("train", seed), ("test", test_seed(seed))] {
        let ds = spec.generate(s)?;
        let meta = BundleMeta {
            seed: Some(s),
            spec: Some(spec.clone()),
            classes: ds.classes,
            channels: ds.channels,
            train_fraction: 1.0,
        };
        let dir = out.join(name);
        write_bundle(&dir, &ds, &meta)?;
        eprintln!(
            "{name}: {} rows, {} label vectors",
            ds.len(),
            ds.label_vector_counts().len()
        );
        outputs.push(dir);
    }
    write_manifest(
        &out.join("manifest.json"),
        "data synth",
        seed,
        &value,
        &outputs,
    )
}

/// Train and held-out rows. A directory written by `data synth` holds
/// `train/` and `test/` bundles; a plain bundle is split by its
/// `train_fraction`.
pub fn load_splits(dir: &Path) -> CliResult<(LabeledDataset, Option<LabeledDataset>)> {
    if dir.join("train").join("meta.json").is_file() {
        let (train, _) = load_bundle(&dir.join("train"))?;
        let test = if dir.join("test").join("meta.json").is_file() {
            Some(load_bundle(&dir.join("test"))?.0)
        } else {
            None
        };
        return Ok((train, test));
    }
    if !dir.join("meta.json").is_file() {
        return Err(CliError::Io(format!(
            "{}: no dataset bundle (meta.json) found",
            dir.display()
        )));
    }
    let (ds, meta) = load_bundle(dir)?;
    let (train, test) = ds.split(meta.train_fraction)?;
    Ok((train, (!test.is_empty()).then_some(test)))
}

/// Rows to evaluate on: the `test/` bundle of a synth directory, or every
/// row of a plain bundle.
pub fn load_eval(dir: &Path) -> CliResult<LabeledDataset> {
    if dir.join("test").join("meta.json").is_file() {
        return Ok(load_bundle(&dir.join("test"))?.0);
    }
    if !dir.join("meta.json").is_file() {
        return Err(CliError::Io(format!(
            "{}: no dataset bundle (meta.json) found",
            dir.display()
        )));
    }
    Ok(load_bundle(dir)?.0)
}
