use std::fs;
use std::path::{Path, PathBuf};

use super::eval::mixture_sample;
use super::Checkpoint;
use crate::arrayfile;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::metrics::normalize_map;
use crate::scenegen::{make_world, Split};

/// Binary 8-bit PGM of a min-max normalized 2-D map.
pub fn write_pgm(path: &Path, map: &Array) -> Result<()> {
    let (h, w) = map.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_map(map).data().iter().map(|v| (v * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the first `count` examples of `split`. Per example `NNNNNN`:
/// `NNNNNN.mapH.{pgm,bin}` for each audio head and `NNNNNN.maskI.{pgm,bin}`
/// for each ground-truth class, all on the side-by-side canvas. Returns the
/// written paths in order.
pub fn export_maps(ck: &Checkpoint, split: Split, count: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let world = make_world(&ck.config.world)?;
    let manifest = ck.config.manifest();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for entry in manifest.entries(split).iter().take(count) {
        let mix = world.sample_mixture(manifest.k, entry.seed)?;
        let sample = mixture_sample(&ck.model, &mix, world.spec.grid)?;
        let stem = format!("{:06}", entry.index);
        let named = sample
            .maps
            .iter()
            .enumerate()
            .map(|(h, m)| (format!("map{h}"), m))
            .chain(sample.truths.iter().enumerate().map(|(i, t)| (format!("mask{i}"), &t.mask)));
        for (name, array) in named {
            let pgm = out_dir.join(format!("{stem}.{name}.pgm"));
            write_pgm(&pgm, array)?;
            let bin = out_dir.join(format!("{stem}.{name}.bin"));
            arrayfile::write(&bin, &[(name.clone(), array.clone())])?;
            written.push(pgm);
            written.push(bin);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let map = Array::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_pgm(&p, &map).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 51, 102, 153, 204, 255]);
    }
}
