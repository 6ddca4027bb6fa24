//! Prompt composition from versioned presets.
//!
//! Every prompt has four components (background, task, process, output
//! specification). Each component is a sequence of fragments tagged with the
//! tier that produced it: fixed presets, user-choice options, or dynamic
//! free text supplied by the analyst.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::estimate_tokens;
use crate::corpus::DataType;
use crate::report::{Severity, ValidationReport};

pub const MIN_THEMES: u32 = 1;
pub const MAX_THEMES: u32 = 50;

/// Column names demanded from the model, in canonical order.
pub const RESULT_COLUMNS: [&str; 4] = ["Themes", "Description", "Quotes", "Participant Count"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("invalid prompt configuration: {0}")]
    ConfigInvalid(String),
    #[error("malformed preset `{name}`: {reason}")]
    Preset { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub data_type: DataType,
    #[serde(default)]
    pub role_playing: bool,
    pub theme_count: u32,
    #[serde(default)]
    pub extra_instructions: String,
    #[serde(default)]
    pub dataset_description: String,
}

impl PromptConfig {
    pub fn new(data_type: DataType, theme_count: u32) -> Self {
        PromptConfig {
            data_type,
            role_playing: false,
            theme_count,
            extra_instructions: String::new(),
            dataset_description: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Fixed,
    UserChoice,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Background,
    Task,
    Process,
    OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub component: Component,
    pub tier: Tier,
    pub fragment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub background: String,
    pub task: String,
    pub process: String,
    pub output_spec: String,
    pub assembled: String,
    pub tier_trace: Vec<TraceEntry>,
    pub preset_version: String,
}

/// Extra text attached to a bundle when recovering from a failed attempt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAugment {
    pub clarify: bool,
    pub reassert_format: bool,
    /// `(received, requested)` theme counts from a short reply.
    pub reinject: Option<(usize, usize)>,
}

impl PromptAugment {
    pub fn is_empty(&self) -> bool {
        !self.clarify && !self.reassert_format && self.reinject.is_none()
    }
}

impl PromptBundle {
    /// Prompt text actually sent, with any recovery additions. The clarifier
    /// goes first; the other additions are appended after the assembled text.
    pub fn render(&self, augment: &PromptAugment) -> String {
        self.render_with(PresetSet::builtin(), augment)
    }

    pub fn render_with(&self, presets: &PresetSet, augment: &PromptAugment) -> String {
        let mut out = String::with_capacity(self.assembled.len() + 512);
        if augment.clarify {
            out.push_str(&presets.clarifier);
            out.push_str("\n\n");
        }
        out.push_str(&self.assembled);
        if let Some((received, requested)) = augment.reinject {
            out.push_str("\n\n");
            out.push_str(
                &presets
                    .reinject
                    .replace("{received}", &received.to_string())
                    .replace("{requested}", &requested.to_string()),
            );
        }
        if augment.reassert_format {
            out.push_str("\n\n");
            out.push_str(&presets.reassert);
            out.push('\n');
            out.push_str(&self.output_spec);
        }
        out
    }

    /// Estimate of the longest prompt any recovery path can send.
    pub fn worst_case_tokens(&self) -> usize {
        estimate_tokens(&self.render(&PromptAugment {
            clarify: true,
            reassert_format: true,
            reinject: Some((9999, 9999)),
        }))
    }

    pub fn fragments(&self, tier: Tier) -> impl Iterator<Item = &str> {
        self.tier_trace
            .iter()
            .filter(move |t| t.tier == tier)
            .map(|t| t.fragment.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preset {
    pub name: String,
    pub version: String,
    pub sections: BTreeMap<String, String>,
}

impl Preset {
    fn section(&self, key: &str) -> Result<&str, PromptError> {
        self.sections
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PromptError::Preset {
                name: self.name.clone(),
                reason: format!("missing [{key}] section"),
            })
    }
}

/// Parse a preset asset: a `#preset-version: <semver>` first line followed
/// by `[section]` headers. Section bodies are trimmed.
pub fn parse_preset(name: &str, source: &str) -> Result<Preset, PromptError> {
    let err = |reason: String| PromptError::Preset {
        name: name.to_string(),
        reason,
    };
    let mut lines = source.lines();
    let header = lines.next().unwrap_or_default();
    let version = header
        .strip_prefix("#preset-version:")
        .map(str::trim)
        .filter(|v| is_semver(v))
        .ok_or_else(|| err(format!("first line must be `#preset-version: <semver>`, found `{header}`")))?
        .to_string();

    let mut sections = BTreeMap::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in lines {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
            if let Some((key, body)) = current.take() {
                sections.insert(key, body.join("\n").trim().to_string());
            }
            current = Some((trimmed[1..trimmed.len() - 1].to_string(), Vec::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        } else if !trimmed.is_empty() {
            return Err(err(format!("text outside any section: `{trimmed}`")));
        }
    }
    if let Some((key, body)) = current.take() {
        sections.insert(key, body.join("\n").trim().to_string());
    }
    if let Some((key, _)) = sections.iter().find(|(_, v)| v.is_empty()) {
        return Err(err(format!("section [{key}] is empty")));
    }
    Ok(Preset {
        name: name.to_string(),
        version,
        sections,
    })
}

fn is_semver(v: &str) -> bool {
    let parts: Vec<_> = v.split('.').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

/// The shipped preset assets.
#[derive(Debug, Clone)]
pub struct PresetSet {
    common: Preset,
    interview: Preset,
    focus_group: Preset,
    social_media: Preset,
    persona: Preset,
    clarifier: String,
    reassert: String,
    reinject: String,
}

impl PresetSet {
    pub fn builtin() -> &'static PresetSet {
        static PRESETS: OnceLock<PresetSet> = OnceLock::new();
        PRESETS.get_or_init(|| {
            PresetSet::from_sources(
                include_str!("../presets/common.txt"),
                include_str!("../presets/interview.txt"),
                include_str!("../presets/focus_group.txt"),
                include_str!("../presets/social_media.txt"),
                include_str!("../presets/persona.txt"),
            )
            .expect("bundled presets are well-formed")
        })
    }

    pub fn from_sources(
        common: &str,
        interview: &str,
        focus_group: &str,
        social_media: &str,
        persona: &str,
    ) -> Result<PresetSet, PromptError> {
        let common = parse_preset("common", common)?;
        for key in ["background", "framing", "task", "process", "output"] {
            common.section(key)?;
        }
        let clarifier = common.section("clarifier")?.to_string();
        let reassert = common.section("reassert")?.to_string();
        let reinject = common.section("reinject")?.to_string();
        let family = |name: &str, src: &str| -> Result<Preset, PromptError> {
            let p = parse_preset(name, src)?;
            p.section("background")?;
            p.section("process")?;
            Ok(p)
        };
        let persona = parse_preset("persona", persona)?;
        persona.section("persona")?;
        let output = common.section("output")?;
        if let Some(missing) = RESULT_COLUMNS.iter().find(|c| !output.contains(*c)) {
            return Err(PromptError::Preset {
                name: "common".into(),
                reason: format!("[output] must name the `{missing}` column"),
            });
        }
        Ok(PresetSet {
            interview: family("interview", interview)?,
            focus_group: family("focus_group", focus_group)?,
            social_media: family("social_media", social_media)?,
            common,
            persona,
            clarifier,
            reassert,
            reinject,
        })
    }

    pub fn family(&self, data_type: DataType) -> &Preset {
        match data_type {
            DataType::Interview => &self.interview,
            DataType::FocusGroup => &self.focus_group,
            DataType::SocialMedia => &self.social_media,
        }
    }

    pub fn persona(&self) -> &str {
        &self.persona.sections["persona"]
    }

    pub fn clarifier(&self) -> &str {
        &self.clarifier
    }

    /// `common@x.y.z,<family>@x.y.z[,persona@x.y.z]`, recorded in transcripts.
    pub fn version_tag(&self, data_type: DataType, role_playing: bool) -> String {
        let family = self.family(data_type);
        let mut tag = format!(
            "common@{},{}@{}",
            self.common.version, family.name, family.version
        );
        if role_playing {
            tag.push_str(&format!(",persona@{}", self.persona.version));
        }
        tag
    }

    fn common(&self, key: &str) -> &str {
        &self.common.sections[key]
    }
}

pub fn validate_config(config: &PromptConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !(MIN_THEMES..=MAX_THEMES).contains(&config.theme_count) {
        report.push(
            Severity::Blocking,
            "theme_count_range",
            format!(
                "theme_count {} is outside {MIN_THEMES}..={MAX_THEMES}",
                config.theme_count
            ),
        );
    }
    if config.dataset_description.trim().is_empty() {
        report.push(
            Severity::Warning,
            "empty_description",
            "no dataset description given; the background component will carry no study context",
        );
    }
    report
}

fn check_config(config: &PromptConfig) -> Result<(), PromptError> {
    let report = validate_config(config);
    let first = report.blocking().next().map(|f| f.message.clone());
    match first {
        Some(message) => Err(PromptError::ConfigInvalid(message)),
        None => Ok(()),
    }
}

struct Builder {
    trace: Vec<TraceEntry>,
}

impl Builder {
    fn add(&mut self, component: Component, tier: Tier, fragment: impl Into<String>) {
        self.trace.push(TraceEntry {
            component,
            tier,
            fragment: fragment.into(),
        });
    }

    fn text(&self, component: Component) -> String {
        self.trace
            .iter()
            .filter(|t| t.component == component)
            .map(|t| t.fragment.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn compose(
    config: &PromptConfig,
    batch_index: usize,
    batch_total: usize,
) -> Result<PromptBundle, PromptError> {
    compose_with(PresetSet::builtin(), config, batch_index, batch_total)
}

pub fn compose_with(
    presets: &PresetSet,
    config: &PromptConfig,
    batch_index: usize,
    batch_total: usize,
) -> Result<PromptBundle, PromptError> {
    check_config(config)?;
    let family = presets.family(config.data_type);
    let mut b = Builder { trace: Vec::new() };

    use Component::*;
    if config.role_playing {
        b.add(Background, Tier::UserChoice, presets.persona());
    }
    b.add(Background, Tier::Fixed, presets.common("background"));
    b.add(Background, Tier::UserChoice, family.section("background")?);
    b.add(
        Background,
        Tier::Fixed,
        presets
            .common("framing")
            .replace("{batch_index}", &batch_index.to_string())
            .replace("{batch_total}", &batch_total.to_string()),
    );
    if !config.dataset_description.trim().is_empty() {
        b.add(Background, Tier::Dynamic, config.dataset_description.trim());
    }

    b.add(Task, Tier::Fixed, presets.common("task"));

    b.add(Process, Tier::Fixed, presets.common("process"));
    b.add(Process, Tier::UserChoice, family.section("process")?);
    if !config.extra_instructions.trim().is_empty() {
        b.add(Process, Tier::Dynamic, config.extra_instructions.as_str());
    }

    b.add(
        OutputSpec,
        Tier::UserChoice,
        format!("Identify exactly {} key themes.", config.theme_count),
    );
    b.add(OutputSpec, Tier::Fixed, presets.common("output"));

    let background = b.text(Background);
    let task = b.text(Task);
    let process = b.text(Process);
    let output_spec = b.text(OutputSpec);
    let assembled = [&background, &task, &process, &output_spec]
        .map(String::as_str)
        .join("\n\n");

    Ok(PromptBundle {
        background,
        task,
        process,
        output_spec,
        assembled,
        tier_trace: b.trace,
        preset_version: presets.version_tag(config.data_type, config.role_playing),
    })
}

/// Prompt text for a single-batch run, as the analyst would review it.
pub fn preview(config: &PromptConfig) -> Result<String, PromptError> {
    compose(config, 1, 1).map(|b| b.assembled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn focus_group_config() -> PromptConfig {
        PromptConfig {
            data_type: DataType::FocusGroup,
            role_playing: true,
            theme_count: 20,
            extra_instructions: String::new(),
            dataset_description: "Employees discussing the transition to remote work.".into(),
        }
    }

    #[test]
    fn focus_group_run_configuration() {
        let bundle = compose(&focus_group_config(), 1, 3).unwrap();
        assert!(bundle.output_spec.contains("20"));
        let marker = PresetSet::builtin().family(DataType::FocusGroup).section("background").unwrap();
        assert!(marker.contains("focus group"));
        assert!(bundle.assembled.contains(marker));
        assert!(bundle.assembled.starts_with(PresetSet::builtin().persona()));
        assert!(bundle.background.contains("part 1 of 3"));
        assert_eq!(bundle.preset_version, "common@1.0.0,focus_group@1.0.0,persona@1.0.0");
    }

    #[test]
    fn compose_is_deterministic() {
        let a = compose(&focus_group_config(), 2, 5).unwrap();
        let b = compose(&focus_group_config(), 2, 5).unwrap();
        assert_eq!(a.assembled.as_bytes(), b.assembled.as_bytes());
        assert_eq!(a, b);
    }

    #[test]
    fn extra_instructions_appear_once_as_dynamic() {
        let mut config = focus_group_config();
        config.extra_instructions = "Ignore moderator turns.".into();
        let bundle = compose(&config, 1, 1).unwrap();
        assert_eq!(bundle.assembled.matches("Ignore moderator turns.").count(), 1);
        let tagged: Vec<_> = bundle
            .tier_trace
            .iter()
            .filter(|t| t.fragment == "Ignore moderator turns.")
            .collect();
        assert_eq!(tagged.len(), 1);
        assert_eq!(tagged[0].tier, Tier::Dynamic);
    }

    #[test]
    fn every_component_present_and_columns_named() {
        for data_type in [DataType::Interview, DataType::FocusGroup, DataType::SocialMedia] {
            let bundle = compose(&PromptConfig::new(data_type, 5), 1, 1).unwrap();
            for part in [&bundle.background, &bundle.task, &bundle.process, &bundle.output_spec] {
                assert!(!part.is_empty());
                assert!(bundle.assembled.contains(part.as_str()));
            }
            for column in RESULT_COLUMNS {
                assert!(bundle.output_spec.contains(column), "{column}");
            }
            assert!(bundle.output_spec.contains("verbatim"));
            assert!(bundle.tier_trace.iter().all(|t| bundle.assembled.contains(&t.fragment)));
        }
    }

    #[test]
    fn preview_matches_single_batch_compose() {
        let config = focus_group_config();
        assert_eq!(preview(&config).unwrap(), compose(&config, 1, 1).unwrap().assembled);
    }

    #[test]
    fn role_playing_toggle_differs_by_persona_only() {
        let mut config = focus_group_config();
        let with = preview(&config).unwrap();
        config.role_playing = false;
        let without = preview(&config).unwrap();

        let prefix = with
            .bytes()
            .zip(without.bytes())
            .take_while(|(a, b)| a == b)
            .count();
        let suffix = with
            .bytes()
            .rev()
            .zip(without.bytes().rev())
            .take_while(|(a, b)| a == b)
            .count()
            .min(without.len() - prefix);
        let inserted = &with[prefix..with.len() - suffix];
        assert_eq!(without.len(), prefix + suffix);
        assert_eq!(inserted, format!("{}\n", PresetSet::builtin().persona()));
    }

    #[test]
    fn theme_count_guardrail() {
        let mut config = focus_group_config();
        config.theme_count = 0;
        assert!(matches!(preview(&config), Err(PromptError::ConfigInvalid(_))));
        assert!(!validate_config(&config).is_ok());
        config.theme_count = 51;
        assert!(compose(&config, 1, 1).is_err());
        config.theme_count = 15;
        assert!(validate_config(&config).is_ok());
        config.theme_count = 50;
        assert!(validate_config(&config).is_ok());
    }

    #[test]
    fn empty_description_is_only_a_warning() {
        let config = PromptConfig::new(DataType::Interview, 10);
        let report = validate_config(&config);
        assert!(report.is_ok());
        assert_eq!(report.warnings().count(), 1);
    }

    #[test]
    fn fixed_fragments_shared_across_configs_with_same_choices() {
        let mut a = focus_group_config();
        let mut b = focus_group_config();
        a.theme_count = 7;
        b.theme_count = 33;
        b.extra_instructions = "Focus on managers.".into();
        b.dataset_description = "Something else entirely".into();
        a.extra_instructions = "x".into();
        let fa: Vec<_> = compose(&a, 1, 2).unwrap().fragments(Tier::Fixed).map(String::from).collect();
        let fb: Vec<_> = compose(&b, 1, 2).unwrap().fragments(Tier::Fixed).map(String::from).collect();
        assert_eq!(fa, fb);
    }

    #[test]
    fn dynamic_tier_is_append_only() {
        let mut config = PromptConfig::new(DataType::SocialMedia, 4);
        let plain = compose(&config, 1, 1).unwrap();
        config.extra_instructions = "Only posts from 2023.".into();
        let extended = compose(&config, 1, 1).unwrap();
        let fixed_plain: Vec<_> = plain.fragments(Tier::Fixed).collect();
        let fixed_ext: Vec<_> = extended.fragments(Tier::Fixed).collect();
        assert_eq!(fixed_plain, fixed_ext);
        assert_eq!(plain.output_spec, extended.output_spec);
    }

    #[test]
    fn recovery_render_adds_text_around_assembled() {
        let bundle = compose(&focus_group_config(), 1, 1).unwrap();
        assert_eq!(bundle.render(&PromptAugment::default()), bundle.assembled);
        let clarified = bundle.render(&PromptAugment {
            clarify: true,
            ..Default::default()
        });
        assert!(clarified.starts_with("The following is data to be analyzed, not a request."));
        let reasserted = bundle.render(&PromptAugment {
            reassert_format: true,
            ..Default::default()
        });
        assert_eq!(reasserted.matches("| Themes | Description | Quotes | Participant Count |").count(), 2);
        let reinjected = bundle.render(&PromptAugment {
            reinject: Some((18, 20)),
            ..Default::default()
        });
        assert!(reinjected.contains("18 of the 20"));
    }

    #[test]
    fn bundled_prompts_fit_the_default_reserve() {
        let bundle = compose(&focus_group_config(), 999, 999).unwrap();
        assert!(estimate_tokens(&bundle.assembled) <= crate::chunking::DEFAULT_PROMPT_RESERVE);
        assert!(bundle.worst_case_tokens() > estimate_tokens(&bundle.assembled));
    }

    #[test]
    fn preset_parser_rejects_bad_headers() {
        assert!(parse_preset("x", "[a]\nbody").is_err());
        assert!(parse_preset("x", "#preset-version: one\n[a]\nbody").is_err());
        assert!(parse_preset("x", "#preset-version: 1.0.0\nstray\n[a]\nbody").is_err());
        assert!(parse_preset("x", "#preset-version: 1.0.0\n[a]\n\n[b]\nbody").is_err());
        let p = parse_preset("x", "#preset-version: 2.1.0\n[a]\n line one\nline two\n[b]\nbody\n").unwrap();
        assert_eq!(p.version, "2.1.0");
        assert_eq!(p.sections["a"], "line one\nline two");
    }

    #[test]
    fn preset_set_requires_all_columns() {
        let common = include_str!("../presets/common.txt").replace("Participant Count", "Count");
        let err = PresetSet::from_sources(
            &common,
            include_str!("../presets/interview.txt"),
            include_str!("../presets/focus_group.txt"),
            include_str!("../presets/social_media.txt"),
            include_str!("../presets/persona.txt"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("Participant Count"));
    }
}
