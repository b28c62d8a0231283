use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use serde::Serialize;
use vipnet::data::{self, CifarSplit, Dataset};
use vipnet::Error;

/// Where images come from: a CIFAR-10 binary directory or generated
/// gratings (`synthetic:<seed>`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar(PathBuf),
    Synthetic(u64),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.strip_prefix("synthetic:") {
            Some(seed) => seed
                .parse()
                .map(DataSource::Synthetic)
                .map_err(|_| format!("bad synthetic seed '{seed}'")),
            None if s == "synthetic" => Ok(DataSource::Synthetic(0)),
            None => Ok(DataSource::Cifar(PathBuf::from(s))),
        }
    }
}

pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_TEST: usize = 1000;

/// Load `(train, test)`. `None` sizes mean everything for CIFAR and the
/// defaults above for synthetic data.
pub fn load(src: &DataSource, train_n: Option<usize>, test_n: Option<usize>) -> Result<(Dataset, Dataset)> {
    match src {
        DataSource::Synthetic(seed) => {
            let (a, b) = (train_n.unwrap_or(DEFAULT_TRAIN), test_n.unwrap_or(DEFAULT_TEST));
            let all = data::gen_synthetic(*seed, a + b, data::CIFAR_CLASSES)?;
            Ok(all.split_at(a))
        }
        DataSource::Cifar(dir) => {
            if !dir.is_dir() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("data directory {} not found", dir.display()),
                ))
                .into());
            }
            let cut = |d: Dataset, n: Option<usize>| match n {
                Some(n) => d.take(n),
                None => d,
            };
            let train = cut(data::load_cifar10(dir, CifarSplit::Train)?, train_n);
            let test = cut(data::load_cifar10(dir, CifarSplit::Test)?, test_n);
            Ok((train, test))
        }
    }
}
