//! Dataset download with checksum verification. Files land under their
//! distribution names; a file is only moved into place after its digest
//! matches, so an interrupted or corrupted transfer leaves nothing behind.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fashion,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fashion" | "fashion-mnist" => Ok(Self::Fashion),
            other => Err(Error::Config(format!("unknown dataset {other:?} (expected mnist or fashion)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemoteFile {
    pub name: &'static str,
    /// Hex MD5 digest published alongside the file.
    pub md5: &'static str,
}

pub const MNIST_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
pub const MNIST_FILES: [RemoteFile; 4] = [
    RemoteFile { name: "train-images-idx3-ubyte.gz", md5: "f68b3c2dcbeaaa9fbdd348bbdeb94873" },
    RemoteFile { name: "train-labels-idx1-ubyte.gz", md5: "d53e105ee54ea40749a09fcbcd1e9432" },
    RemoteFile { name: "t10k-images-idx3-ubyte.gz", md5: "9fb629c4189551a2d022fa330f9573f3" },
    RemoteFile { name: "t10k-labels-idx1-ubyte.gz", md5: "ec29112dd5afa0611ce80d1b7f02629c" },
];

pub const FASHION_BASE_URL: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/";
pub const FASHION_FILES: [RemoteFile; 4] = [
    RemoteFile { name: "train-images-idx3-ubyte.gz", md5: "8d4fb7e6c68d591d4c3dfef9ec88bf0d" },
    RemoteFile { name: "train-labels-idx1-ubyte.gz", md5: "25c81989df183df01b3e8a0aad5dffbe" },
    RemoteFile { name: "t10k-images-idx3-ubyte.gz", md5: "bef4ecab320f06d8554ea6380940ec79" },
    RemoteFile { name: "t10k-labels-idx1-ubyte.gz", md5: "bb300cfdad3c16e7a12a480ee83cd310" },
];

impl DatasetName {
    pub fn base_url(self) -> &'static str {
        match self {
            Self::Mnist => MNIST_BASE_URL,
            Self::Fashion => FASHION_BASE_URL,
        }
    }

    pub fn files(self) -> &'static [RemoteFile] {
        match self {
            Self::Mnist => &MNIST_FILES,
            Self::Fashion => &FASHION_FILES,
        }
    }
}

/// Fetch `name` into `dir` from its canonical location.
pub fn fetch(name: DatasetName, dir: &Path) -> Result<Vec<PathBuf>> {
    fetch_from(name.base_url(), name.files(), dir)
}

/// Fetch `files` from `base_url` (ending in `/`) into `dir`. Files already
/// present with the right digest are kept; present files with the wrong
/// digest are an error rather than silently replaced.
pub fn fetch_from(base_url: &str, files: &[RemoteFile], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let path = dir.join(f.name);
        if path.exists() {
            let actual = md5_file(&path)?;
            if actual != f.md5 {
                return Err(Error::Checksum {
                    path,
                    expected: f.md5.into(),
                    actual,
                });
            }
            out.push(path);
            continue;
        }
        let part = dir.join(format!("{}.part", f.name));
        let url = format!("{base_url}{}", f.name);
        match download(&url, &part).and_then(|_| verify(&part, f.md5)) {
            Ok(()) => std::fs::rename(&part, &path)?,
            Err(e) => {
                let _ = std::fs::remove_file(&part);
                return Err(match e {
                    Error::Checksum { expected, actual, .. } => Error::Checksum {
                        path: path.clone(),
                        expected,
                        actual,
                    },
                    e => e,
                });
            }
        }
        out.push(path);
    }
    Ok(out)
}

fn download(url: &str, to: &Path) -> Result<()> {
    let err = |message: String| Error::Download {
        url: url.to_string(),
        message,
    };
    let resp = ureq::get(url).call().map_err(|e| err(e.to_string()))?;
    let mut reader = resp.into_reader();
    let mut file = File::create(to)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| err(e.to_string()))?;
        if n == 0 {
            break;
        }
        file.write_all(&buf[..n])?;
    }
    file.sync_all()?;
    Ok(())
}

fn verify(path: &Path, expected: &str) -> Result<()> {
    let actual = md5_file(path)?;
    if actual == expected {
        Ok(())
    } else {
        Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: expected.into(),
            actual,
        })
    }
}

fn md5_file(path: &Path) -> Result<String> {
    let mut h = Md5::new();
    std::io::copy(&mut File::open(path)?, &mut h)?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
