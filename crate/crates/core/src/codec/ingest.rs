//! Building a training directory of PNG files from local or remote images.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{load_image_bytes, png_bytes};
use super::synth::synthetic_image;
use super::{hex, Image};
use crate::Error;

pub const MANIFEST_NAME: &str = "manifest.json";
const MAX_DOWNLOAD: u64 = 64 << 20;

#[derive(Clone, Debug)]
pub enum Source {
    /// Every regular file in a directory, in name order.
    Dir(PathBuf),
    /// A text file with one URL per line; `#` starts a comment.
    UrlList(PathBuf),
    /// `count` procedural images of the given size.
    Synthetic { seed: u64, count: usize, width: usize, height: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub source: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Skipped {
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub block: usize,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<Skipped>,
}

/// Largest centred window whose sides are multiples of `block`.
pub fn center_crop(img: &Image, block: usize) -> Option<Image> {
    let (w, h) = (img.width - img.width % block, img.height - img.height % block);
    if w == 0 || h == 0 {
        return None;
    }
    let (x0, y0) = ((img.width - w) / 2, (img.height - h) / 2);
    let c = img.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for y in y0..y0 + h {
        let row = (y * img.width + x0) * c;
        data.extend_from_slice(&img.data[row..row + w * c]);
    }
    Some(Image { width: w, height: h, channels: c, data })
}

fn fetch(url: &str) -> Result<Vec<u8>, String> {
    let mut resp = ureq::get(url).call().map_err(|e| e.to_string())?;
    resp.body_mut().with_config().limit(MAX_DOWNLOAD).read_to_vec().map_err(|e| e.to_string())
}

fn stem(name: &str) -> String {
    let last = name.trim_end_matches('/').rsplit(['/', '\\']).next().unwrap_or("");
    let base = last.split(['?', '#']).next().unwrap_or("");
    let base = base.rsplit_once('.').map_or(base, |(s, _)| s);
    let clean: String =
        base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if clean.is_empty() { "image".into() } else { clean }
}

type Item = (String, Result<Vec<u8>, String>);

fn items(source: &Source) -> Result<Vec<Item>, Error> {
    match source {
        Source::Dir(dir) => {
            let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            paths.sort();
            Ok(paths
                .into_iter()
                .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST_NAME))
                .map(|p| {
                    let bytes = std::fs::read(&p).map_err(|e| e.to_string());
                    (p.display().to_string(), bytes)
                })
                .collect())
        }
        Source::UrlList(list) => {
            let text =
                std::fs::read_to_string(list).map_err(|e| Error::io(format!("reading {}", list.display()), e))?;
            Ok(text
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(|url| (url.to_string(), fetch(url)))
                .collect())
        }
        Source::Synthetic { seed, count, width, height } => (0..*count as u64)
            .map(|i| {
                let img = synthetic_image(*seed, i, *width, *height);
                Ok((format!("synthetic:{seed}:{i}"), Ok(png_bytes(&img)?)))
            })
            .collect(),
    }
}

/// Converts every image of `sources` into `out_dir`, cropping to multiples
/// of `block`, and writes a manifest. Unreadable inputs are skipped and
/// recorded. Re-running on the same inputs reproduces the same files.
pub fn ingest(sources: &[Source], out_dir: &Path, block: usize) -> Result<Manifest, Error> {
    if block == 0 {
        return Err(Error::Invalid("block size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut manifest = Manifest { block, ..Default::default() };
    let mut used = BTreeSet::new();
    for source in sources {
        for (name, bytes) in items(source)? {
            let img = bytes.and_then(|b| load_image_bytes(&b).map_err(|e| e.to_string()));
            let img = match img {
                Ok(img) => img,
                Err(reason) => {
                    log::warn!("skipping {name}: {reason}");
                    manifest.skipped.push(Skipped { source: name, reason });
                    continue;
                }
            };
            let Some(img) = center_crop(&img, block) else {
                let reason = format!("{}x{} is smaller than one {block}x{block} block", img.width, img.height);
                log::warn!("skipping {name}: {reason}");
                manifest.skipped.push(Skipped { source: name, reason });
                continue;
            };
            let base = if name.starts_with("synthetic:") { name.replace(':', "_") } else { stem(&name) };
            let mut file = format!("{base}.png");
            let mut n = 1;
            while !used.insert(file.clone()) {
                file = format!("{base}_{n}.png");
                n += 1;
            }
            let png = png_bytes(&img)?;
            let path = out_dir.join(&file);
            std::fs::write(&path, &png).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            manifest.entries.push(ManifestEntry {
                source: name,
                file,
                width: img.width,
                height: img.height,
                channels: img.channels,
                sha256: hex(&Sha256::digest(&png)),
            });
        }
    }
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// PNG files of a training directory, in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_is_centred() {
        let img = Image::new(5, 3, 1, (0..15).collect()).unwrap();
        let c = center_crop(&img, 2).unwrap();
        assert_eq!((c.width, c.height), (4, 2));
        assert_eq!(c.data, vec![0, 1, 2, 3, 5, 6, 7, 8]);
        assert!(center_crop(&img, 8).is_none());
    }

    #[test]
    fn stems_are_sanitised() {
        assert_eq!(stem("https://x.org/a/b c.jpg?x=1"), "b_c");
        assert_eq!(stem("/tmp/dir/photo.png"), "photo");
        assert_eq!(stem("https://x.org/"), "x");
        assert_eq!(stem("?q"), "image");
    }
}
