//! Dataset split manifests and genuine/impostor trial generation.
//!
//! Trials are defined over (class, capture-index) pairs, not concrete
//! images: which spectrum (or translated variant) supplies the probe and
//! gallery image for a given capture is a scenario-level decision made by
//! the caller. That keeps one trial list comparable across intra-spectral,
//! cross-spectral, and translated runs of the same dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::descriptors::Spectrum;
use crate::error::{Error, Result};
use crate::matching::TrialLabel;

/// Train/test role of one image in the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "train" => Ok(Role::Train),
            "test" => Ok(Role::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown role {other:?} (expected train|test)"
            ))),
        }
    }
}

/// One manifest record: a single image file with its protocol coordinates.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Verification class (identity and eye combined, e.g. `id017_L`).
    pub class_id: String,
    pub spectrum: Spectrum,
    /// Path as written in the manifest, relative to the manifest's location.
    pub path: String,
    pub role: Role,
    pub capture_index: usize,
}

/// A parsed split manifest.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub records: Vec<ImageRecord>,
}

impl DatasetSplit {
    /// Parse the manifest format: one record per line,
    /// `class_id spectrum image_path role capture_index`.
    pub fn load(path: &Path) -> Result<DatasetSplit> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    pub fn parse(text: &str) -> std::result::Result<DatasetSplit, String> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let [class_id, spectrum, path, role, capture] = fields.as_slice() else {
                return Err(format!(
                    "line {}: expected `class_id spectrum image_path role capture_index`, got {} fields",
                    idx + 1,
                    fields.len()
                ));
            };
            records.push(ImageRecord {
                class_id: class_id.to_string(),
                spectrum: Spectrum::from_tag(spectrum).map_err(|e| format!("line {}: {e}", idx + 1))?,
                path: path.to_string(),
                role: Role::from_tag(role).map_err(|e| format!("line {}: {e}", idx + 1))?,
                capture_index: capture
                    .parse()
                    .map_err(|e| format!("line {}: bad capture index {capture:?}: {e}", idx + 1))?,
            });
        }
        Ok(DatasetSplit { records })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# class_id spectrum image_path role capture_index\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                r.class_id,
                r.spectrum.tag(),
                r.path,
                r.role.tag(),
                r.capture_index
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_text().as_bytes())
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.records.iter().map(|r| r.class_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Sorted distinct capture indices of one class under the given role
    /// (union over spectra — captures are simultaneous by construction).
    pub fn captures(&self, class_id: &str, role: Role) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.class_id == class_id && r.role == role)
            .map(|r| r.capture_index)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// The record for (class, spectrum, capture), if present.
    pub fn find(&self, class_id: &str, spectrum: Spectrum, capture: usize) -> Option<&ImageRecord> {
        self.records.iter().find(|r| {
            r.class_id == class_id && r.spectrum == spectrum && r.capture_index == capture
        })
    }

    /// Structural sanity: no duplicate (class, spectrum, capture, role)
    /// coordinates, and no capture appearing as both train and test.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<(String, &'static str, usize), Role> = BTreeMap::new();
        for r in &self.records {
            let key = (r.class_id.clone(), r.spectrum.tag(), r.capture_index);
            if let Some(prev) = seen.get(&key) {
                if *prev != r.role {
                    return Err(Error::InvalidInput(format!(
                        "capture {} of {} ({}) listed as both train and test",
                        r.capture_index,
                        r.class_id,
                        r.spectrum.tag()
                    )));
                }
                return Err(Error::InvalidInput(format!(
                    "duplicate manifest record for {} {} capture {}",
                    r.class_id,
                    r.spectrum.tag(),
                    r.capture_index
                )));
            }
            seen.insert(key, r.role);
        }
        Ok(())
    }
}

/// One verification trial over protocol coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub probe_class: String,
    pub probe_capture: usize,
    pub gallery_class: String,
    pub gallery_capture: usize,
    pub label: TrialLabel,
}

/// Generated trials plus the classes that had to be dropped.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    /// Classes excluded for having fewer than two usable captures.
    pub excluded_classes: Vec<String>,
}

impl TrialSet {
    pub fn genuine_count(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.label == TrialLabel::Genuine)
            .count()
    }

    pub fn impostor_count(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.label == TrialLabel::Impostor)
            .count()
    }
}

/// Build the verification trial list over test captures.
///
/// Genuine: all unordered pairs of test captures within each class —
/// U·T(T−1)/2 trials. Impostor: the first test capture of each class as
/// probe against the second test capture of every other class as gallery
/// (ordered) — U·(U−1) trials. Classes with fewer than two test captures
/// are excluded and reported, not errors.
pub fn build_trials(split: &DatasetSplit) -> Result<TrialSet> {
    build_trials_for_role(split, Role::Test, 0, 1)
}

/// `build_trials` with configurable impostor probe/gallery capture
/// positions (indices into each class's sorted test-capture list).
pub fn build_trials_indexed(
    split: &DatasetSplit,
    probe_index: usize,
    gallery_index: usize,
) -> Result<TrialSet> {
    build_trials_for_role(split, Role::Test, probe_index, gallery_index)
}

/// Same construction over train captures — used to fit score fusion on
/// scores disjoint from the evaluation trials.
pub fn build_training_trials(split: &DatasetSplit) -> Result<TrialSet> {
    build_trials_for_role(split, Role::Train, 0, 1)
}

fn build_trials_for_role(
    split: &DatasetSplit,
    role: Role,
    probe_index: usize,
    gallery_index: usize,
) -> Result<TrialSet> {
    let idx_bound = probe_index.max(gallery_index);
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for class in split.classes() {
        let captures = split.captures(&class, role);
        if captures.len() >= 2 && captures.len() > idx_bound {
            classes.push((class, captures));
        } else {
            excluded.push(class);
        }
    }
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes with 2+ {} captures to build trials, have {}",
            role.tag(),
            classes.len()
        )));
    }

    let mut trials = Vec::new();
    // Genuine: unordered capture pairs within class, no symmetric
    // duplicates.
    for (class, captures) in &classes {
        for i in 0..captures.len() {
            for j in i + 1..captures.len() {
                trials.push(Trial {
                    probe_class: class.clone(),
                    probe_capture: captures[i],
                    gallery_class: class.clone(),
                    gallery_capture: captures[j],
                    label: TrialLabel::Genuine,
                });
            }
        }
    }
    // Impostor: ordered class pairs, fixed capture positions.
    for (a, captures_a) in &classes {
        for (b, captures_b) in &classes {
            if a == b {
                continue;
            }
            trials.push(Trial {
                probe_class: a.clone(),
                probe_capture: captures_a[probe_index],
                gallery_class: b.clone(),
                gallery_capture: captures_b[gallery_index],
                label: TrialLabel::Impostor,
            });
        }
    }
    Ok(TrialSet {
        trials,
        excluded_classes: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A synthetic manifest: `users` classes, `t_test` test captures each
    /// (plus 2 train captures), both spectra.
    fn synthetic_split(users: usize, t_test: usize) -> DatasetSplit {
        let mut records = Vec::new();
        for u in 0..users {
            let class = format!("id{u:03}_L");
            for (role, count, base) in [(Role::Train, 2, 0), (Role::Test, t_test, 100)] {
                for c in 0..count {
                    for spectrum in [Spectrum::Nir, Spectrum::Vis] {
                        records.push(ImageRecord {
                            class_id: class.clone(),
                            spectrum,
                            path: format!("{class}_{}_c{:02}.png", spectrum.tag(), base + c),
                            role,
                            capture_index: base + c,
                        });
                    }
                }
            }
        }
        DatasetSplit { records }
    }

    #[test]
    fn paper_scale_counts() {
        let split = synthetic_split(418, 5);
        let ts = build_trials(&split).unwrap();
        assert_eq!(ts.genuine_count(), 4180);
        assert_eq!(ts.impostor_count(), 174306);
        assert!(ts.excluded_classes.is_empty());
    }

    #[test]
    fn smallest_valid_case() {
        let split = synthetic_split(2, 2);
        let ts = build_trials(&split).unwrap();
        assert_eq!(ts.genuine_count(), 2);
        assert_eq!(ts.impostor_count(), 2);
    }

    #[test]
    fn desk_scale_counts() {
        let split = synthetic_split(40, 5);
        let ts = build_trials(&split).unwrap();
        assert_eq!(ts.genuine_count(), 400);
        assert_eq!(ts.impostor_count(), 1560);
    }

    #[test]
    fn trial_structure_matches_protocol() {
        let split = synthetic_split(5, 4);
        let ts = build_trials(&split).unwrap();
        // No duplicates, including symmetric genuine duplicates.
        for (i, a) in ts.trials.iter().enumerate() {
            for b in &ts.trials[i + 1..] {
                assert!(a != b, "duplicate trial {a:?}");
                if a.label == TrialLabel::Genuine && b.label == TrialLabel::Genuine {
                    assert!(
                        !(a.probe_class == b.gallery_class
                            && a.gallery_class == b.probe_class
                            && a.probe_capture == b.gallery_capture
                            && a.gallery_capture == b.probe_capture),
                        "symmetric genuine duplicate {a:?}"
                    );
                }
            }
        }
        for t in &ts.trials {
            match t.label {
                TrialLabel::Genuine => {
                    assert_eq!(t.probe_class, t.gallery_class);
                    assert!(t.probe_capture < t.gallery_capture);
                }
                TrialLabel::Impostor => {
                    assert_ne!(t.probe_class, t.gallery_class);
                    // First test capture vs second test capture.
                    assert_eq!(t.probe_capture, 100);
                    assert_eq!(t.gallery_capture, 101);
                }
            }
        }
    }

    #[test]
    fn short_classes_are_excluded_with_report() {
        let mut split = synthetic_split(4, 3);
        // Cripple one class down to a single test capture.
        split
            .records
            .retain(|r| !(r.class_id == "id002_L" && r.role == Role::Test && r.capture_index > 100));
        let ts = build_trials(&split).unwrap();
        assert_eq!(ts.excluded_classes, vec!["id002_L".to_string()]);
        assert_eq!(ts.genuine_count(), 3 * 3);
        assert_eq!(ts.impostor_count(), 3 * 2);
    }

    #[test]
    fn too_few_usable_classes_is_an_error() {
        let split = synthetic_split(1, 5);
        assert!(build_trials(&split).is_err());
    }

    #[test]
    fn indexed_impostor_positions() {
        let split = synthetic_split(3, 4);
        let ts = build_trials_indexed(&split, 2, 3).unwrap();
        for t in &ts.trials {
            if t.label == TrialLabel::Impostor {
                assert_eq!(t.probe_capture, 102);
                assert_eq!(t.gallery_capture, 103);
            }
        }
    }

    #[test]
    fn training_trials_use_train_captures() {
        let split = synthetic_split(3, 4);
        let ts = build_training_trials(&split).unwrap();
        // 2 train captures: 1 genuine pair per class, 6 ordered impostors.
        assert_eq!(ts.genuine_count(), 3);
        assert_eq!(ts.impostor_count(), 6);
        for t in &ts.trials {
            assert!(t.probe_capture < 100 && t.gallery_capture < 100);
        }
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let split = synthetic_split(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        split.save(&path).unwrap();
        let back = DatasetSplit::load(&path).unwrap();
        assert_eq!(back.records.len(), split.records.len());
        back.validate().unwrap();
        assert_eq!(back.classes(), split.classes());
        assert_eq!(back.captures("id001_L", Role::Test), vec![100, 101]);
        assert!(back.find("id001_L", Spectrum::Nir, 100).is_some());
        assert!(back.find("id001_L", Spectrum::Nir, 999).is_none());

        // Duplicate record must fail validation.
        let mut dup = back.clone();
        dup.records.push(dup.records[0].clone());
        assert!(dup.validate().is_err());
    }

    #[test]
    fn malformed_manifests_are_rejected() {
        assert!(DatasetSplit::parse("one two three four").is_err());
        assert!(DatasetSplit::parse("c nir p train notanumber").is_err());
        assert!(DatasetSplit::parse("c ultraviolet p train 0").is_err());
        assert!(DatasetSplit::parse("c nir p student 0").is_err());
    }
}
