//! Prompt-template catalog for the four generation strategies, including the
//! severe-bias transfer protocol (double-parenthesis emphasis, opposite label
//! in the negative prompt, and `[V]`-token removal for personalized models).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GroupKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Waterbirds,
    Celeba,
    Utkface,
    /// The procedural ColoredShapes toy benchmark.
    Shapes,
}

impl DatasetId {
    pub fn all() -> [DatasetId; 4] {
        [
            DatasetId::Waterbirds,
            DatasetId::Celeba,
            DatasetId::Utkface,
            DatasetId::Shapes,
        ]
    }

    pub fn classes(self) -> [&'static str; 2] {
        match self {
            DatasetId::Waterbirds => ["landbird", "waterbird"],
            DatasetId::Celeba => ["blond", "non-blond"],
            DatasetId::Utkface => ["female", "male"],
            DatasetId::Shapes => ["cross", "square"],
        }
    }

    pub fn biases(self) -> [&'static str; 2] {
        match self {
            DatasetId::Waterbirds => ["land", "water"],
            DatasetId::Celeba => ["female", "male"],
            DatasetId::Utkface => ["adult", "child"],
            DatasetId::Shapes => ["cool", "warm"],
        }
    }

    /// Facial datasets carry a default negative fragment discouraging
    /// grayscale generations.
    fn grayscale_negative(self) -> bool {
        matches!(self, DatasetId::Celeba | DatasetId::Utkface)
    }

    fn opposite_class(self, class: &str) -> Result<&'static str> {
        let [a, b] = self.classes();
        if class == a {
            Ok(b)
        } else if class == b {
            Ok(a)
        } else {
            Err(Error::Config(format!("unknown class `{class}` for {self}")))
        }
    }

    fn opposite_bias(self, bias: &str) -> Result<&'static str> {
        let [a, b] = self.biases();
        if bias == a {
            Ok(b)
        } else if bias == b {
            Ok(a)
        } else {
            Err(Error::Config(format!("unknown bias `{bias}` for {self}")))
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Waterbirds => f.write_str("waterbirds"),
            DatasetId::Celeba => f.write_str("celeba"),
            DatasetId::Utkface => f.write_str("utkface"),
            DatasetId::Shapes => f.write_str("shapes"),
        }
    }
}

impl FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waterbirds" => Ok(DatasetId::Waterbirds),
            "celeba" => Ok(DatasetId::Celeba),
            "utkface" => Ok(DatasetId::Utkface),
            "shapes" => Ok(DatasetId::Shapes),
            other => Err(Error::Config(format!("unknown dataset id `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    LoraPerGroup,
    DreamboothPerGroup,
    ClusteredDreambooth,
}

impl Strategy {
    pub fn all() -> [Strategy; 4] {
        [
            Strategy::Vanilla,
            Strategy::LoraPerGroup,
            Strategy::DreamboothPerGroup,
            Strategy::ClusteredDreambooth,
        ]
    }

    pub fn is_dreambooth(self) -> bool {
        matches!(
            self,
            Strategy::DreamboothPerGroup | Strategy::ClusteredDreambooth
        )
    }

    /// Strategies that finetune on group images (and therefore use transfer
    /// generation in severe-bias mode).
    pub fn is_finetuned(self) -> bool {
        !matches!(self, Strategy::Vanilla)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::LoraPerGroup => "lora_per_group",
            Strategy::DreamboothPerGroup => "dreambooth_per_group",
            Strategy::ClusteredDreambooth => "clustered_dreambooth",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Standard,
    /// Severe-bias generation of a conflicting group from the aligned-group
    /// model of the same class.
    Transfer,
}

/// A prompt template before rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// Template with `{class-label}`, `{bias-label}`, and `[V]` placeholders.
    pub positive: String,
    pub negative: Option<String>,
    /// Placeholders wrapped in double parentheses at render time.
    pub emphasis: Vec<String>,
}

/// A fully rendered prompt pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub positive: String,
    pub negative: Option<String>,
}

/// Render the catalog prompt for (dataset, strategy, group, mode).
///
/// Transfer mode emphasizes the contested label in double parentheses, adds
/// the opposite label (double-parenthesized) to the negative prompt, and
/// omits `[V]` for the Dreambooth variants. Vanilla prompts are identical in
/// both modes.
pub fn render_prompts(
    dataset: DatasetId,
    strategy: Strategy,
    group: &GroupKey,
    mode: PromptMode,
) -> Result<RenderedPrompt> {
    let spec = catalog_template(dataset, strategy, group, mode)?;
    render_spec(&spec, group)
}

fn render_spec(spec: &PromptSpec, group: &GroupKey) -> Result<RenderedPrompt> {
    let substitute = |template: &str| -> Result<String> {
        let mut out = template.to_string();
        for (placeholder, value) in [
            ("{class-label}", group.class_label.as_str()),
            ("{bias-label}", group.bias_label.as_str()),
        ] {
            let rendered = if spec.emphasis.iter().any(|e| e == placeholder) {
                format!("(({value}))")
            } else {
                value.to_string()
            };
            out = out.replace(placeholder, &rendered);
        }
        if out.contains('{') || out.contains('}') {
            return Err(Error::Config(format!(
                "unresolved placeholder in rendered prompt `{out}`"
            )));
        }
        Ok(out)
    };
    Ok(RenderedPrompt {
        positive: substitute(&spec.positive)?,
        negative: spec.negative.as_deref().map(substitute).transpose()?,
    })
}

fn join_negative(parts: &[&str]) -> Option<String> {
    let nonempty: Vec<&str> = parts.iter().copied().filter(|p| !p.is_empty()).collect();
    if nonempty.is_empty() {
        None
    } else {
        Some(nonempty.join(", "))
    }
}

/// The template catalog. Errors on labels outside the dataset's group space.
pub fn catalog_template(
    dataset: DatasetId,
    strategy: Strategy,
    group: &GroupKey,
    mode: PromptMode,
) -> Result<PromptSpec> {
    let class = group.class_label.as_str();
    let bias = group.bias_label.as_str();
    if !dataset.classes().contains(&class) {
        return Err(Error::Config(format!(
            "unknown class `{class}` for dataset {dataset}"
        )));
    }
    if !dataset.biases().contains(&bias) {
        return Err(Error::Config(format!(
            "unknown bias `{bias}` for dataset {dataset}"
        )));
    }
    let gray = if dataset.grayscale_negative() {
        "grayscale"
    } else {
        ""
    };
    // Vanilla is never finetuned; the same prompts serve both modes.
    let mode = if strategy == Strategy::Vanilla {
        PromptMode::Standard
    } else {
        mode
    };

    let spec = match (dataset, strategy, mode) {
        // --- Waterbirds -----------------------------------------------------
        (DatasetId::Waterbirds, Strategy::Vanilla, _) => PromptSpec {
            positive: "photo of a {class-label} on {bias-label}.".into(),
            negative: None,
            emphasis: vec![],
        },
        (DatasetId::Waterbirds, _, PromptMode::Standard) => {
            if strategy.is_dreambooth() {
                PromptSpec {
                    positive: "photo of a [V] bird".into(),
                    negative: None,
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "Photo of a {class-label} on {bias-label}".into(),
                    negative: None,
                    emphasis: vec![],
                }
            }
        }
        (DatasetId::Waterbirds, _, PromptMode::Transfer) => PromptSpec {
            // [V] omitted for the Dreambooth variants; emphasis on the
            // contested bias label, opposite bias in the negative prompt.
            positive: "Photo of a {class-label} on (({bias-label}))".into(),
            negative: Some(format!("(({}))", dataset.opposite_bias(bias)?)),
            emphasis: vec![],
        },

        // --- CelebA ---------------------------------------------------------
        (DatasetId::Celeba, Strategy::Vanilla, _) => {
            if class == "blond" {
                PromptSpec {
                    positive: "photo of a {bias-label} person with blond hair".into(),
                    negative: join_negative(&[gray]),
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "photo of a {bias-label} person".into(),
                    negative: join_negative(&["blond hair", gray]),
                    emphasis: vec![],
                }
            }
        }
        (DatasetId::Celeba, _, PromptMode::Standard) => {
            if strategy.is_dreambooth() {
                if class == "blond" {
                    PromptSpec {
                        positive: "photo of a [V] person with blond hair".into(),
                        negative: join_negative(&[gray]),
                        emphasis: vec![],
                    }
                } else {
                    PromptSpec {
                        positive: "photo of a [V] person".into(),
                        negative: join_negative(&["blond hair", gray]),
                        emphasis: vec![],
                    }
                }
            } else if class == "blond" {
                PromptSpec {
                    positive: "Photo of a {bias-label} person with blond hair".into(),
                    negative: join_negative(&[gray]),
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "Photo of a non-blond {bias-label} person".into(),
                    negative: join_negative(&[gray]),
                    emphasis: vec![],
                }
            }
        }
        (DatasetId::Celeba, _, PromptMode::Transfer) => {
            let opposite = format!("(({}))", dataset.opposite_bias(bias)?);
            if class == "blond" {
                PromptSpec {
                    positive: "Photo of a (({bias-label})) person with blond hair".into(),
                    negative: join_negative(&[&opposite, gray]),
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "Photo of a non-blond (({bias-label})) person".into(),
                    negative: join_negative(&[&opposite, "blond hair", gray]),
                    emphasis: vec![],
                }
            }
        }

        // --- UTKFace --------------------------------------------------------
        (DatasetId::Utkface, Strategy::Vanilla, _) => PromptSpec {
            positive: "photo of a {class-label} {bias-label}.".into(),
            negative: join_negative(&[gray]),
            emphasis: vec![],
        },
        (DatasetId::Utkface, _, PromptMode::Standard) => {
            if strategy.is_dreambooth() {
                PromptSpec {
                    positive: "photo of a [V] {class-label} person".into(),
                    negative: join_negative(&[gray]),
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "Photo of a {class-label} person who is a {bias-label}".into(),
                    negative: join_negative(&[gray]),
                    emphasis: vec![],
                }
            }
        }
        (DatasetId::Utkface, _, PromptMode::Transfer) => {
            // Emphasis sits on the class label here, and the published
            // transfer template reads "an {bias-label}" for either bias.
            let opposite = format!("(({}))", dataset.opposite_class(class)?);
            PromptSpec {
                positive: "Photo of a (({class-label})) person who is an {bias-label}".into(),
                negative: join_negative(&[&opposite, gray]),
                emphasis: vec![],
            }
        }

        // --- ColoredShapes (toy) -------------------------------------------
        (DatasetId::Shapes, Strategy::Vanilla, _) => PromptSpec {
            positive: "photo of a {class-label} on a {bias-label} background.".into(),
            negative: None,
            emphasis: vec![],
        },
        (DatasetId::Shapes, _, PromptMode::Standard) => {
            if strategy.is_dreambooth() {
                PromptSpec {
                    positive: "photo of a [V] {class-label} shape".into(),
                    negative: None,
                    emphasis: vec![],
                }
            } else {
                PromptSpec {
                    positive: "Photo of a {class-label} on a {bias-label} background".into(),
                    negative: None,
                    emphasis: vec![],
                }
            }
        }
        (DatasetId::Shapes, _, PromptMode::Transfer) => PromptSpec {
            positive: "Photo of a {class-label} on a (({bias-label})) background".into(),
            negative: Some(format!("(({}))", dataset.opposite_bias(bias)?)),
            emphasis: vec![],
        },
    };
    Ok(spec)
}

/// Every renderable catalog entry, in deterministic order: standard prompts
/// for all groups, transfer prompts for bias-conflicting groups of finetuned
/// strategies. Used for the golden-file check.
pub fn catalog_entries() -> Vec<(DatasetId, Strategy, GroupKey, PromptMode, RenderedPrompt)> {
    let mut out = Vec::new();
    for dataset in DatasetId::all() {
        for strategy in Strategy::all() {
            for class in dataset.classes() {
                for bias in dataset.biases() {
                    let group = GroupKey::new(class, bias);
                    let rendered =
                        render_prompts(dataset, strategy, &group, PromptMode::Standard)
                            .expect("catalog entry must render");
                    out.push((dataset, strategy, group.clone(), PromptMode::Standard, rendered));
                    if strategy.is_finetuned() && conflicting_in_catalog(dataset, &group) {
                        let rendered =
                            render_prompts(dataset, strategy, &group, PromptMode::Transfer)
                                .expect("catalog entry must render");
                        out.push((dataset, strategy, group, PromptMode::Transfer, rendered));
                    }
                }
            }
        }
    }
    out
}

/// Canonical text rendering of the whole catalog, one block per entry.
/// Compared byte-for-byte against the checked-in golden file.
pub fn catalog_text() -> String {
    let mut out = String::new();
    for (dataset, strategy, group, mode, rendered) in catalog_entries() {
        let mode = match mode {
            PromptMode::Standard => "standard",
            PromptMode::Transfer => "transfer",
        };
        out.push_str(&format!("[{dataset} {strategy} {group} {mode}]\n"));
        out.push_str(&format!("positive: {}\n", rendered.positive));
        out.push_str(&format!(
            "negative: {}\n\n",
            rendered.negative.as_deref().unwrap_or("-")
        ));
    }
    out
}

/// The conventional conflicting groups of each benchmark.
fn conflicting_in_catalog(dataset: DatasetId, group: &GroupKey) -> bool {
    let conflicting: [(&str, &str); 2] = match dataset {
        DatasetId::Waterbirds => [("waterbird", "land"), ("landbird", "water")],
        DatasetId::Celeba => [("blond", "male"), ("non-blond", "female")],
        DatasetId::Utkface => [("male", "adult"), ("female", "child")],
        DatasetId::Shapes => [("square", "cool"), ("cross", "warm")],
    };
    conflicting
        .iter()
        .any(|(c, b)| group.class_label == *c && group.bias_label == *b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(d: DatasetId, s: Strategy, c: &str, b: &str, m: PromptMode) -> RenderedPrompt {
        render_prompts(d, s, &GroupKey::new(c, b), m).unwrap()
    }

    #[test]
    fn waterbirds_vanilla_matches_published_template() {
        let p = render(
            DatasetId::Waterbirds,
            Strategy::Vanilla,
            "waterbird",
            "land",
            PromptMode::Standard,
        );
        assert_eq!(p.positive, "photo of a waterbird on land.");
        assert_eq!(p.negative, None);
    }

    #[test]
    fn celeba_vanilla_nonblond_uses_negative_prompt() {
        let p = render(
            DatasetId::Celeba,
            Strategy::Vanilla,
            "non-blond",
            "male",
            PromptMode::Standard,
        );
        assert_eq!(p.positive, "photo of a male person");
        assert!(p.negative.as_deref().unwrap().contains("blond hair"));
    }

    #[test]
    fn utkface_lora_transfer_is_verbatim() {
        let p = render(
            DatasetId::Utkface,
            Strategy::LoraPerGroup,
            "female",
            "child",
            PromptMode::Transfer,
        );
        assert_eq!(p.positive, "Photo of a ((female)) person who is an child");
        assert!(p.negative.as_deref().unwrap().contains("((male))"));
    }

    #[test]
    fn dreambooth_keeps_v_token_in_standard_mode_only() {
        let standard = render(
            DatasetId::Waterbirds,
            Strategy::DreamboothPerGroup,
            "waterbird",
            "water",
            PromptMode::Standard,
        );
        assert_eq!(standard.positive, "photo of a [V] bird");
        let transfer = render(
            DatasetId::Waterbirds,
            Strategy::DreamboothPerGroup,
            "waterbird",
            "land",
            PromptMode::Transfer,
        );
        assert!(!transfer.positive.contains("[V]"));
        assert_eq!(transfer.positive, "Photo of a waterbird on ((land))");
        assert_eq!(transfer.negative.as_deref(), Some("((water))"));
    }

    #[test]
    fn vanilla_prompts_identical_in_transfer_mode() {
        for (c, b) in [("blond", "male"), ("non-blond", "female")] {
            let standard = render(DatasetId::Celeba, Strategy::Vanilla, c, b, PromptMode::Standard);
            let transfer = render(DatasetId::Celeba, Strategy::Vanilla, c, b, PromptMode::Transfer);
            assert_eq!(standard, transfer);
        }
    }

    #[test]
    fn facial_datasets_carry_grayscale_negative() {
        let p = render(
            DatasetId::Utkface,
            Strategy::LoraPerGroup,
            "male",
            "child",
            PromptMode::Standard,
        );
        assert_eq!(p.negative.as_deref(), Some("grayscale"));
        let wb = render(
            DatasetId::Waterbirds,
            Strategy::LoraPerGroup,
            "waterbird",
            "water",
            PromptMode::Standard,
        );
        assert_eq!(wb.negative, None);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let err = render_prompts(
            DatasetId::Waterbirds,
            Strategy::Vanilla,
            &GroupKey::new("flamingo", "land"),
            PromptMode::Standard,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn no_unresolved_placeholders_anywhere() {
        for (_, _, _, _, rendered) in catalog_entries() {
            assert!(!rendered.positive.contains('{'));
            assert!(!rendered.positive.contains('}'));
            if let Some(n) = &rendered.negative {
                assert!(!n.contains('{'));
            }
        }
    }
}
