//! Visual summary sentences and the attribute classifier seam.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::face_geometry::{patch_size_band, PatchKind, PatchSet, SizeBand};
use crate::frame::GrayFrame;
use crate::lbp::SubjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeLabel {
    Cellphone,
    Gun,
    Eyeglass,
    EyesWithoutGlass,
    Beard,
    NonBeard,
    Mustache,
    NonMustache,
    BaldHead,
    NonBaldHead,
}

impl AttributeLabel {
    pub const ALL: [AttributeLabel; 10] = [
        AttributeLabel::Cellphone,
        AttributeLabel::Gun,
        AttributeLabel::Eyeglass,
        AttributeLabel::EyesWithoutGlass,
        AttributeLabel::Beard,
        AttributeLabel::NonBeard,
        AttributeLabel::Mustache,
        AttributeLabel::NonMustache,
        AttributeLabel::BaldHead,
        AttributeLabel::NonBaldHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeLabel::Cellphone => "cellphone",
            AttributeLabel::Gun => "gun",
            AttributeLabel::Eyeglass => "eyeglass",
            AttributeLabel::EyesWithoutGlass => "eyes_without_glass",
            AttributeLabel::Beard => "beard",
            AttributeLabel::NonBeard => "non_beard",
            AttributeLabel::Mustache => "mustache",
            AttributeLabel::NonMustache => "non_mustache",
            AttributeLabel::BaldHead => "bald_head",
            AttributeLabel::NonBaldHead => "non_bald_head",
        }
    }

    /// The other member of a mutually exclusive pair.
    pub fn complement(self) -> Option<AttributeLabel> {
        use AttributeLabel::*;
        match self {
            Eyeglass => Some(EyesWithoutGlass),
            EyesWithoutGlass => Some(Eyeglass),
            Beard => Some(NonBeard),
            NonBeard => Some(Beard),
            Mustache => Some(NonMustache),
            NonMustache => Some(Mustache),
            BaldHead => Some(NonBaldHead),
            NonBaldHead => Some(BaldHead),
            Cellphone | Gun => None,
        }
    }
}

impl fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeLabel {
    type Err = AttributeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributeLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| AttributeError::UnknownLabel(s.to_string()))
    }
}

/// Region handed to the attribute classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    Patch(PatchKind),
    /// Whole person crop; carries the cellphone and gun classes.
    Person,
}

impl ClassifierInput {
    fn admits(self, label: AttributeLabel) -> bool {
        use AttributeLabel::*;
        match self {
            ClassifierInput::Patch(PatchKind::Eye) => matches!(label, Eyeglass | EyesWithoutGlass),
            ClassifierInput::Patch(PatchKind::Beard) => matches!(label, Beard | NonBeard),
            ClassifierInput::Patch(PatchKind::Mustache) => matches!(label, Mustache | NonMustache),
            ClassifierInput::Patch(PatchKind::Head) => matches!(label, BaldHead | NonBaldHead),
            ClassifierInput::Person => matches!(label, Cellphone | Gun),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributeError {
    #[error("unknown attribute label {0:?}")]
    UnknownLabel(String),
    #[error("classifier failed: {0}")]
    Classifier(String),
    #[error("classifier returned {label} for the {input:?} region")]
    MisroutedLabel {
        label: AttributeLabel,
        input: ClassifierInput,
    },
    #[error("both {0} and {1} were assigned to one face")]
    ContradictoryPair(AttributeLabel, AttributeLabel),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub trait AttributeClassifier: Send + Sync {
    fn classify(
        &self,
        input: ClassifierInput,
        image: &GrayFrame,
    ) -> Result<Vec<AttributeLabel>, AttributeError>;
}

/// Content hash of an image: hex SHA-256 over width and height as little-endian
/// u32 followed by the row-major pixel bytes.
pub fn patch_fingerprint(image: &GrayFrame) -> String {
    let mut h = Sha256::new();
    h.update((image.width() as u32).to_le_bytes());
    h.update((image.height() as u32).to_le_bytes());
    h.update(image.pixels());
    hex::encode(h.finalize())
}

/// Classifier that looks labels up by [`patch_fingerprint`]. Unlisted images get
/// no labels.
#[derive(Debug, Clone, Default)]
pub struct ManifestClassifier {
    labels: HashMap<String, Vec<AttributeLabel>>,
}

impl ManifestClassifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, label: AttributeLabel) {
        self.labels.entry(fingerprint.into()).or_default().push(label);
    }

    /// Parses `fingerprint<TAB>label` lines; blank lines and `#` comments are skipped.
    pub fn parse(manifest: &str) -> Result<Self, AttributeError> {
        let mut out = Self::new();
        for (i, raw) in manifest.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (fp, label) = line.split_once('\t').ok_or_else(|| AttributeError::Manifest {
                line: i + 1,
                reason: "expected fingerprint<TAB>label".into(),
            })?;
            let label = label.trim().parse().map_err(|e: AttributeError| AttributeError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.insert(fp.trim(), label);
        }
        Ok(out)
    }

    pub fn to_manifest(&self) -> String {
        let mut lines: Vec<String> = self
            .labels
            .iter()
            .flat_map(|(fp, labels)| labels.iter().map(move |l| format!("{fp}\t{l}")))
            .collect();
        lines.sort();
        lines.into_iter().map(|l| l + "\n").collect()
    }
}

impl AttributeClassifier for ManifestClassifier {
    fn classify(
        &self,
        _input: ClassifierInput,
        image: &GrayFrame,
    ) -> Result<Vec<AttributeLabel>, AttributeError> {
        Ok(self
            .labels
            .get(&patch_fingerprint(image))
            .cloned()
            .unwrap_or_default())
    }
}

/// Runs the classifier on every usable patch and on the person crop.
///
/// Patches in the reject size band are skipped. Labels outside a region's
/// classes, or both members of a pair, are errors.
pub fn classify_attributes(
    patches: &PatchSet,
    person: Option<&GrayFrame>,
    classifier: &dyn AttributeClassifier,
) -> Result<BTreeSet<AttributeLabel>, AttributeError> {
    let mut regions: Vec<(ClassifierInput, &GrayFrame)> = patches
        .iter()
        .filter(|p| patch_size_band(&p.rect) != SizeBand::Reject)
        .map(|p| (ClassifierInput::Patch(p.kind), &p.image))
        .collect();
    if let Some(img) = person {
        regions.push((ClassifierInput::Person, img));
    }
    classify_regions(&regions, classifier)
}

/// Classifies arbitrary regions with the same routing and pair checks as
/// [`classify_attributes`].
pub fn classify_regions(
    regions: &[(ClassifierInput, &GrayFrame)],
    classifier: &dyn AttributeClassifier,
) -> Result<BTreeSet<AttributeLabel>, AttributeError> {
    let mut out = BTreeSet::new();
    for &(input, image) in regions {
        for label in classifier.classify(input, image)? {
            if !input.admits(label) {
                return Err(AttributeError::MisroutedLabel { label, input });
            }
            out.insert(label);
        }
    }
    check_pairs(&out)?;
    Ok(out)
}

pub fn check_pairs(labels: &BTreeSet<AttributeLabel>) -> Result<(), AttributeError> {
    for &l in labels {
        if let Some(c) = l.complement() {
            if labels.contains(&c) && l < c {
                return Err(AttributeError::ContradictoryPair(l, c));
            }
        }
    }
    Ok(())
}

/// Who the summary is about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Identity {
    Known { subject_id: SubjectId, name: String },
    Unknown,
    PersonNoFace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualSummary {
    pub identity: Identity,
    pub location: String,
    /// Positive attributes in sentence order.
    pub attributes: Vec<AttributeLabel>,
    pub sentence: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SummaryError {
    #[error("location label must not be empty")]
    EmptyLocation,
}

/// Facial and carried attributes in the order they are listed in a sentence.
const LISTED_ORDER: [(AttributeLabel, &str); 5] = [
    (AttributeLabel::Beard, "beard"),
    (AttributeLabel::Mustache, "mustache"),
    (AttributeLabel::Eyeglass, "eyeglass"),
    (AttributeLabel::BaldHead, "bald head"),
    (AttributeLabel::Gun, "gun"),
];
const PHONE_PHRASE: &str = " talking over the phone";

pub fn compose_summary(
    identity: &Identity,
    location: &str,
    attributes: &BTreeSet<AttributeLabel>,
) -> Result<VisualSummary, SummaryError> {
    if location.trim().is_empty() {
        return Err(SummaryError::EmptyLocation);
    }
    let listed: Vec<(AttributeLabel, &str)> = LISTED_ORDER
        .iter()
        .copied()
        .filter(|(l, _)| attributes.contains(l))
        .collect();
    let phone = attributes.contains(&AttributeLabel::Cellphone);

    let (sentence, mentioned) = match identity {
        Identity::Known { name, .. } => {
            let mut s = format!("{name} at {location}");
            if phone {
                s.push_str(PHONE_PHRASE);
            }
            (s, Vec::new())
        }
        Identity::Unknown => {
            let mut s = String::from("An unknown person");
            if !listed.is_empty() {
                s.push_str(" with ");
                let words: Vec<&str> = listed.iter().map(|(_, w)| *w).collect();
                s.push_str(&words.join("/"));
            }
            s.push_str(" at the ");
            s.push_str(location);
            if phone {
                s.push_str(PHONE_PHRASE);
            }
            (s, listed.iter().map(|(l, _)| *l).collect())
        }
        Identity::PersonNoFace => (format!("A person (no face visible) at {location}"), Vec::new()),
    };
    let mut mentioned = mentioned;
    if phone && !matches!(identity, Identity::PersonNoFace) {
        mentioned.push(AttributeLabel::Cellphone);
    }
    Ok(VisualSummary {
        identity: identity.clone(),
        location: location.to_string(),
        attributes: mentioned,
        sentence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_geometry::{crop_patches, FaceBox, LandmarkSet};
    use crate::frame::Rect;
    use AttributeLabel::*;

    fn set(labels: &[AttributeLabel]) -> BTreeSet<AttributeLabel> {
        labels.iter().copied().collect()
    }

    #[test]
    fn sample_sentences() {
        let john = Identity::Known {
            subject_id: 1,
            name: "John".into(),
        };
        assert_eq!(
            compose_summary(&john, "entrance", &set(&[Cellphone])).unwrap().sentence,
            "John at entrance talking over the phone"
        );
        assert_eq!(
            compose_summary(
                &Identity::Unknown,
                "back door",
                &set(&[Beard, Mustache, Eyeglass, BaldHead, Gun])
            )
            .unwrap()
            .sentence,
            "An unknown person with beard/mustache/eyeglass/bald head/gun at the back door"
        );
        let amy = Identity::Known {
            subject_id: 2,
            name: "Amy".into(),
        };
        assert_eq!(
            compose_summary(&amy, "driveway", &set(&[])).unwrap().sentence,
            "Amy at driveway"
        );
        assert_eq!(
            compose_summary(&Identity::PersonNoFace, "garage", &set(&[Gun]))
                .unwrap()
                .sentence,
            "A person (no face visible) at garage"
        );
    }

    #[test]
    fn negatives_never_mentioned_and_order_fixed() {
        let s = compose_summary(
            &Identity::Unknown,
            "yard",
            &set(&[Gun, NonBeard, Eyeglass, NonMustache, NonBaldHead]),
        )
        .unwrap();
        assert_eq!(s.sentence, "An unknown person with eyeglass/gun at the yard");
        assert_eq!(s.attributes, vec![Eyeglass, Gun]);
        let bare = compose_summary(&Identity::Unknown, "yard", &set(&[NonBeard])).unwrap();
        assert_eq!(bare.sentence, "An unknown person at the yard");
    }

    #[test]
    fn empty_location_rejected() {
        assert_eq!(
            compose_summary(&Identity::Unknown, " ", &set(&[])),
            Err(SummaryError::EmptyLocation)
        );
    }

    #[test]
    fn label_names_roundtrip() {
        for l in AttributeLabel::ALL {
            assert_eq!(l.as_str().parse::<AttributeLabel>().unwrap(), l);
        }
        assert!("hat".parse::<AttributeLabel>().is_err());
    }

    fn face_image() -> (GrayFrame, LandmarkSet, FaceBox) {
        let img = GrayFrame::from_fn(200, 200, |x, y| ((x * 7 + y * 13) % 251) as u8).unwrap();
        let face = Rect::new(40, 40, 120, 120);
        (img, LandmarkSet::canonical(face), FaceBox::from(face))
    }

    #[test]
    fn manifest_stub_labels_patches() {
        let (img, l, b) = face_image();
        let patches = crop_patches(&img, &l, &b).unwrap();
        let manifest = format!(
            "# fixture\n{}\tbeard\n{}\teyeglass\n",
            patch_fingerprint(&patches.beard.image),
            patch_fingerprint(&patches.eye.image)
        );
        let stub = ManifestClassifier::parse(&manifest).unwrap();
        let got = classify_attributes(&patches, None, &stub).unwrap();
        assert_eq!(got, set(&[Beard, Eyeglass]));
        assert_eq!(ManifestClassifier::parse(&stub.to_manifest()).unwrap().to_manifest(), stub.to_manifest());
    }

    #[test]
    fn rejected_patches_are_not_classified() {
        // a 24px face gives patches well under 20px
        let img = GrayFrame::from_fn(60, 60, |x, y| (x * y % 256) as u8).unwrap();
        let face = Rect::new(10, 10, 24, 24);
        let l = LandmarkSet::canonical(face);
        let patches = crop_patches(&img, &l, &FaceBox::from(face)).unwrap();
        struct Everything;
        impl AttributeClassifier for Everything {
            fn classify(
                &self,
                _: ClassifierInput,
                _: &GrayFrame,
            ) -> Result<Vec<AttributeLabel>, AttributeError> {
                panic!("classifier must not run on rejected patches")
            }
        }
        assert!(patches
            .iter()
            .all(|p| patch_size_band(&p.rect) == SizeBand::Reject));
        assert!(classify_attributes(&patches, None, &Everything).unwrap().is_empty());
    }

    struct Fixed(Vec<(ClassifierInput, AttributeLabel)>);

    impl AttributeClassifier for Fixed {
        fn classify(
            &self,
            input: ClassifierInput,
            _: &GrayFrame,
        ) -> Result<Vec<AttributeLabel>, AttributeError> {
            Ok(self.0.iter().filter(|(i, _)| *i == input).map(|(_, l)| *l).collect())
        }
    }

    #[test]
    fn contradictory_stub_is_rejected() {
        let (img, l, b) = face_image();
        let patches = crop_patches(&img, &l, &b).unwrap();
        let stub = Fixed(vec![
            (ClassifierInput::Patch(PatchKind::Beard), Beard),
            (ClassifierInput::Patch(PatchKind::Beard), NonBeard),
        ]);
        assert_eq!(
            classify_attributes(&patches, None, &stub),
            Err(AttributeError::ContradictoryPair(Beard, NonBeard))
        );
    }

    #[test]
    fn person_crop_routes_phone_and_gun() {
        let (img, l, b) = face_image();
        let patches = crop_patches(&img, &l, &b).unwrap();
        let stub = Fixed(vec![
            (ClassifierInput::Person, Cellphone),
            (ClassifierInput::Patch(PatchKind::Head), BaldHead),
        ]);
        assert_eq!(
            classify_attributes(&patches, Some(&img), &stub).unwrap(),
            set(&[Cellphone, BaldHead])
        );
        let misrouted = Fixed(vec![(ClassifierInput::Patch(PatchKind::Eye), Gun)]);
        assert!(matches!(
            classify_attributes(&patches, Some(&img), &misrouted),
            Err(AttributeError::MisroutedLabel { label: Gun, .. })
        ));
    }
}
