//! Dataset folders.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/<stem>.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! PNG and JPEG are accepted. Entries are ordered by file name, so indexing
//! is stable across runs and platforms.

use std::path::{Path, PathBuf};

use crate::error::{DatasetIssue, Error, Result};
use crate::imageio::{read_image, read_mask, resize_image, resize_mask, write_image, write_mask};
use crate::tensor::{ImageTensor, Map2d};
use crate::toy::ToyDataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestEntry {
    pub path: PathBuf,
    /// `"good"` or the defect folder name.
    pub defect_type: String,
    pub mask: Option<PathBuf>,
}

impl TestEntry {
    /// `<defect>/<stem>`, unique within a category.
    pub fn id(&self) -> String {
        let stem = self.path.file_stem().unwrap_or_default().to_string_lossy();
        format!("{}/{}", self.defect_type, stem)
    }

    pub fn is_anomalous(&self) -> bool {
        self.defect_type != "good"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryLayout {
    pub name: String,
    pub dir: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub categories: Vec<CategoryLayout>,
}

impl DatasetLayout {
    pub fn category(&self, name: &str) -> Result<&CategoryLayout> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| {
                let known: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
                Error::Config(format!(
                    "unknown category {name:?}; available: {}",
                    known.join(", ")
                ))
            })
    }
}

fn is_image(p: &Path) -> bool {
    let hidden = p
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'));
    let ext = p
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    !hidden && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

fn issue(path: &Path, message: impl Into<String>) -> DatasetIssue {
    DatasetIssue {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn dims(path: &Path, issues: &mut Vec<DatasetIssue>) -> Option<(u32, u32)> {
    match image::image_dimensions(path) {
        Ok(d) => Some(d),
        Err(e) => {
            issues.push(issue(path, format!("unreadable image: {e}")));
            None
        }
    }
}

fn index_category(dir: &Path, issues: &mut Vec<DatasetIssue>) -> Result<CategoryLayout> {
    let name = dir
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let train_dir = dir.join("train").join("good");
    let train = if train_dir.is_dir() {
        images_in(&train_dir)?
    } else {
        Vec::new()
    };
    if train.is_empty() {
        issues.push(issue(&train_dir, "no training images"));
    }
    for p in &train {
        dims(p, issues);
    }
    let test_dir = dir.join("test");
    let mut test = Vec::new();
    if !test_dir.is_dir() {
        issues.push(issue(&test_dir, "missing test folder"));
    } else {
        for sub in sorted_entries(&test_dir)?
            .into_iter()
            .filter(|p| p.is_dir())
        {
            let defect_type = sub
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            for path in images_in(&sub)? {
                let size = dims(&path, issues);
                let mask = if defect_type == "good" {
                    None
                } else {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                    let m = dir
                        .join("ground_truth")
                        .join(&defect_type)
                        .join(format!("{stem}_mask.png"));
                    if !m.is_file() {
                        issues.push(issue(&m, format!("missing mask for {}", path.display())));
                        None
                    } else {
                        if let (Some(a), Some(b)) = (size, dims(&m, issues)) {
                            if a != b {
                                issues.push(issue(
                                    &m,
                                    format!("mask is {}x{} but image is {}x{}", b.0, b.1, a.0, a.1),
                                ));
                            }
                        }
                        Some(m)
                    }
                };
                test.push(TestEntry {
                    path,
                    defect_type: defect_type.clone(),
                    mask,
                });
            }
        }
        if test.is_empty() {
            issues.push(issue(&test_dir, "no test images"));
        }
    }
    Ok(CategoryLayout {
        name,
        dir: dir.to_path_buf(),
        train,
        test,
    })
}

/// Index and validate every category under `root` (a folder with a `train`
/// subfolder). All problems are collected before failing.
pub fn load_dataset(root: &Path) -> Result<DatasetLayout> {
    if !root.is_dir() {
        return Err(Error::Dataset(vec![issue(
            root,
            "dataset root is not a directory",
        )]));
    }
    let mut issues = Vec::new();
    let mut categories = Vec::new();
    for dir in sorted_entries(root)? {
        if dir.join("train").is_dir() {
            categories.push(index_category(&dir, &mut issues)?);
        }
    }
    if categories.is_empty() {
        issues.push(issue(
            root,
            "no category folders (expected <category>/train/good)",
        ));
    }
    if !issues.is_empty() {
        return Err(Error::Dataset(issues));
    }
    Ok(DatasetLayout {
        root: root.to_path_buf(),
        categories,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTest {
    pub id: String,
    pub defect_type: String,
    pub image: ImageTensor,
    /// Binary mask at working resolution; `None` for good images.
    pub mask: Option<Map2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCategory {
    pub name: String,
    pub train: Vec<ImageTensor>,
    pub test: Vec<LoadedTest>,
}

/// Decode every image of a category, resized to `resolution` squared.
pub fn load_category(layout: &CategoryLayout, resolution: usize) -> Result<LoadedCategory> {
    let load = |p: &Path| -> Result<ImageTensor> {
        Ok(resize_image(&read_image(p)?, resolution, resolution))
    };
    let train = layout
        .train
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut test = Vec::with_capacity(layout.test.len());
    for e in &layout.test {
        let mask = match &e.mask {
            Some(m) => Some(resize_mask(&read_mask(m)?, resolution, resolution)),
            None => None,
        };
        test.push(LoadedTest {
            id: e.id(),
            defect_type: e.defect_type.clone(),
            image: load(&e.path)?,
            mask,
        });
    }
    Ok(LoadedCategory {
        name: layout.name.clone(),
        train,
        test,
    })
}

/// Write a toy dataset as `<root>/<category>/...`; returns the category dir.
pub fn write_toy_dataset(ds: &ToyDataset, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&ds.category);
    for (i, x) in ds.train.iter().enumerate() {
        write_image(x, &dir.join("train/good").join(format!("{i:03}.png")))?;
    }
    for s in &ds.test {
        write_image(
            &s.image,
            &dir.join("test")
                .join(&s.defect_type)
                .join(format!("{}.png", s.name)),
        )?;
        if let Some(m) = &s.mask {
            let p = dir
                .join("ground_truth")
                .join(&s.defect_type)
                .join(format!("{}_mask.png", s.name));
            write_mask(m, &p)?;
        }
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{make_toy_dataset, ToyConfig};

    fn toy() -> ToyDataset {
        make_toy_dataset(&ToyConfig {
            size: 16,
            train_count: 3,
            test_good_count: 2,
            defect_count: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn toy_round_trip_has_no_issues() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        write_toy_dataset(&ds, dir.path()).unwrap();
        let layout = load_dataset(dir.path()).unwrap();
        assert_eq!(layout, load_dataset(dir.path()).unwrap());
        let cat = layout.category(&ds.category).unwrap();
        let loaded = load_category(cat, 16).unwrap();
        assert_eq!(loaded.train, ds.train);
        assert_eq!(loaded.test.len(), ds.test.len());
        for t in &loaded.test {
            let src = ds
                .test
                .iter()
                .find(|s| format!("{}/{}", s.defect_type, s.name) == t.id)
                .unwrap();
            assert_eq!(t.image, src.image);
            assert_eq!(t.mask, src.mask);
        }
        assert!(layout.category("nope").is_err());
    }

    #[test]
    fn deleted_mask_is_the_only_issue() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        let cat = write_toy_dataset(&ds, dir.path()).unwrap();
        let s = ds.test.iter().find(|s| s.mask.is_some()).unwrap();
        let victim = cat
            .join("ground_truth")
            .join(&s.defect_type)
            .join(format!("{}_mask.png", s.name));
        std::fs::remove_file(&victim).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Dataset(issues)) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].path, victim);
            }
            other => panic!("expected a dataset error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_and_unreadable_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        let cat = write_toy_dataset(&ds, dir.path()).unwrap();
        let s = ds.test.iter().find(|s| s.mask.is_some()).unwrap();
        let mask = cat
            .join("ground_truth")
            .join(&s.defect_type)
            .join(format!("{}_mask.png", s.name));
        write_mask(&Map2d::zeros(8, 8), &mask).unwrap();
        let junk = cat.join("train/good/zzz.png");
        std::fs::write(&junk, b"not an image").unwrap();
        let Err(Error::Dataset(issues)) = load_dataset(dir.path()) else {
            panic!("expected dataset issues")
        };
        let paths: Vec<&Path> = issues.iter().map(|i| i.path.as_path()).collect();
        assert_eq!(paths, vec![junk.as_path(), mask.as_path()]);
    }
}
