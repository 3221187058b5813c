use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::augment::Image;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
const IMAGE_BYTES: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const RECORD_BYTES: usize = 1 + IMAGE_BYTES;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];
const ARCHIVE_NAME: &str = "cifar-10-binary.tar.gz";
const EXTRACTED_DIR: &str = "cifar-10-batches-bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }

    fn standard_len(self) -> usize {
        match self {
            Split::Train => 50_000,
            Split::Test => 10_000,
        }
    }
}

/// One CIFAR-10 split held as raw bytes (`[n, 3, 32, 32]` plus labels).
#[derive(Debug, Clone)]
pub struct Cifar10 {
    split: Split,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

impl Cifar10 {
    pub fn from_raw(split: Split, labels: Vec<u8>, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Shape(format!(
                "{} labels need {} pixel bytes, got {}",
                labels.len(),
                labels.len() * IMAGE_BYTES,
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CIFAR_CLASSES) {
            return Err(Error::Domain(format!("class label {bad} out of range")));
        }
        Ok(Cifar10 {
            split,
            labels,
            pixels,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Image `index` with values scaled to `[0, 1]`.
    pub fn image(&self, index: usize) -> Image {
        let raw = &self.pixels[index * IMAGE_BYTES..(index + 1) * IMAGE_BYTES];
        Image {
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            pixels: raw.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn truncate(&mut self, len: usize) {
        self.labels.truncate(len);
        self.pixels.truncate(len * IMAGE_BYTES);
    }

    /// Per-class image counts.
    pub fn class_histogram(&self) -> [usize; CIFAR_CLASSES] {
        let mut h = [0; CIFAR_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    fn push_records(&mut self, bytes: &[u8], origin: &Path) -> Result<()> {
        if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::load(
                "CIFAR-10 batch",
                origin,
                format!(
                    "size {} is not a positive multiple of the {RECORD_BYTES}-byte record",
                    bytes.len()
                ),
            ));
        }
        for record in bytes.chunks_exact(RECORD_BYTES) {
            let label = record[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(Error::load(
                    "CIFAR-10 batch",
                    origin,
                    format!("record has class label {label}"),
                ));
            }
            self.labels.push(label);
            self.pixels.extend_from_slice(&record[1..]);
        }
        Ok(())
    }
}

/// Load one split from `path`.
///
/// `path` may be the extracted `cifar-10-batches-bin` directory, its parent,
/// a directory holding `cifar-10-binary.tar.gz`, or the archive itself. Every
/// batch file of the split must be present and well formed; nothing is
/// loaded partially.
pub fn load_cifar10(path: &Path, split: Split) -> Result<Cifar10> {
    let mut data = Cifar10 {
        split,
        labels: Vec::new(),
        pixels: Vec::new(),
    };

    if let Some(dir) = find_extracted_dir(path) {
        for name in split.files() {
            let file = dir.join(name);
            let bytes = fs::read(&file).map_err(|e| Error::load("CIFAR-10 batch", &file, e))?;
            data.push_records(&bytes, &file)?;
        }
    } else if let Some(archive) = find_archive(path) {
        load_from_archive(&archive, &mut data)?;
    } else {
        return Err(Error::load(
            "CIFAR-10",
            path,
            format!(
                "no {} files, {EXTRACTED_DIR}/ directory or {ARCHIVE_NAME} archive found",
                split.files().join(", ")
            ),
        ));
    }

    if data.len() != split.standard_len() {
        log::warn!(
            "{:?} split at {} has {} images (standard CIFAR-10 has {})",
            split,
            path.display(),
            data.len(),
            split.standard_len()
        );
    }
    Ok(data)
}

fn find_extracted_dir(path: &Path) -> Option<PathBuf> {
    [path.to_path_buf(), path.join(EXTRACTED_DIR)]
        .into_iter()
        .find(|dir| dir.is_dir() && TRAIN_FILES.iter().chain(&TEST_FILES).any(|f| dir.join(f).is_file()))
}

fn find_archive(path: &Path) -> Option<PathBuf> {
    if path.is_file() {
        return Some(path.to_path_buf());
    }
    let candidate = path.join(ARCHIVE_NAME);
    candidate.is_file().then_some(candidate)
}

fn load_from_archive(archive: &Path, data: &mut Cifar10) -> Result<()> {
    let file = fs::File::open(archive).map_err(|e| Error::load("CIFAR-10 archive", archive, e))?;
    let mut tar = tar::Archive::new(GzDecoder::new(file));
    let wanted = data.split.files();
    let mut found: Vec<Option<Vec<u8>>> = vec![None; wanted.len()];

    let entries = tar
        .entries()
        .map_err(|e| Error::load("CIFAR-10 archive", archive, e))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::load("CIFAR-10 archive", archive, e))?;
        let name = entry
            .path()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()));
        let Some(name) = name else { continue };
        if let Some(slot) = wanted.iter().position(|w| *w == name) {
            let mut bytes = Vec::new();
            entry
                .read_to_end(&mut bytes)
                .map_err(|e| Error::load("CIFAR-10 archive", archive, e))?;
            found[slot] = Some(bytes);
        }
    }

    for (name, bytes) in wanted.iter().zip(found) {
        let bytes = bytes.ok_or_else(|| {
            Error::load("CIFAR-10 archive", archive, format!("missing member {name}"))
        })?;
        data.push_records(&bytes, &archive.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures;

    #[test]
    fn empty_directory_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
    }

    #[test]
    fn truncated_batch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::write_cifar_dir(dir.path(), 20, 10, 0).unwrap();
        let f = dir.path().join("test_batch.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test).is_err());
        // The intact train split still loads.
        assert_eq!(load_cifar10(dir.path(), Split::Train).unwrap().len(), 20);
    }

    #[test]
    fn missing_train_batch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::write_cifar_dir(dir.path(), 20, 10, 0).unwrap();
        fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
        let err = load_cifar10(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("data_batch_3.bin"), "{err}");
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::write_cifar_dir(dir.path(), 20, 10, 0).unwrap();
        let f = dir.path().join("test_batch.bin");
        let mut bytes = fs::read(&f).unwrap();
        bytes[RECORD_BYTES] = 10;
        fs::write(&f, &bytes).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn nested_extracted_directory_and_archive_both_load() {
        let root = tempfile::tempdir().unwrap();
        let nested = root.path().join(EXTRACTED_DIR);
        fs::create_dir(&nested).unwrap();
        fixtures::write_cifar_dir(&nested, 15, 5, 1).unwrap();
        let from_dir = load_cifar10(root.path(), Split::Test).unwrap();
        assert_eq!(from_dir.len(), 5);

        let archive_root = tempfile::tempdir().unwrap();
        let archive = archive_root.path().join(ARCHIVE_NAME);
        {
            let gz = flate2::write::GzEncoder::new(
                fs::File::create(&archive).unwrap(),
                flate2::Compression::fast(),
            );
            let mut builder = tar::Builder::new(gz);
            builder.append_dir_all(EXTRACTED_DIR, &nested).unwrap();
            builder.into_inner().unwrap().finish().unwrap();
        }
        let from_archive = load_cifar10(archive_root.path(), Split::Test).unwrap();
        assert_eq!(from_archive.labels(), from_dir.labels());
        assert_eq!(from_archive.image(3), from_dir.image(3));
        let train = load_cifar10(&archive, Split::Train).unwrap();
        assert_eq!(train.len(), 15);
    }

    #[test]
    fn standard_sized_splits_have_standard_counts() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::write_cifar_dir(dir.path(), 50_000, 10_000, 2).unwrap();
        assert_eq!(load_cifar10(dir.path(), Split::Train).unwrap().len(), 50_000);
        assert_eq!(load_cifar10(dir.path(), Split::Test).unwrap().len(), 10_000);
    }
}
