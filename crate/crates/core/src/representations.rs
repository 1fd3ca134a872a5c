//! Rater representations and their rendering into decoder conditioning text.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, Rater, RaterPartition, Rating};
use crate::decoder::RetryPolicy;
use crate::error::{BackendError, Error, Result};
use crate::io::read_jsonl;
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemographicSelection {
    All,
    Keys(Vec<String>),
}

impl DemographicSelection {
    fn tag(&self) -> String {
        match self {
            DemographicSelection::All => "dem".into(),
            DemographicSelection::Keys(keys) => format!("dem:{}", keys.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    NoInfo,
    Demographics(DemographicSelection),
    /// At most `n` fit demonstrations.
    Examples(usize),
    ValueProfile(String),
    DemographicsPlusProfile(DemographicSelection, String),
}

impl Representation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Representation::Examples(0) => Err(Error::InvalidArgument("Examples(n) needs n >= 1".into())),
            Representation::ValueProfile(text) | Representation::DemographicsPlusProfile(_, text)
                if text.trim().is_empty() =>
            {
                Err(Error::InvalidArgument("value profile text is empty".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> RepresentationKind {
        match self {
            Representation::NoInfo => RepresentationKind::NoInfo,
            Representation::Demographics(s) => RepresentationKind::Demographics(s.clone()),
            Representation::Examples(n) => RepresentationKind::Examples(*n),
            Representation::ValueProfile(_) => RepresentationKind::ValueProfile,
            Representation::DemographicsPlusProfile(s, _) => RepresentationKind::DemographicsPlusProfile(s.clone()),
        }
    }

    pub fn tag(&self) -> String {
        self.kind().to_string()
    }
}

/// A representation without its per-rater payload, as named in configs and
/// reports: `noinfo`, `dem`, `dem:KEY,KEY`, `ex:N`, `profile`, `dem+profile`,
/// `dem:KEY,KEY+profile`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RepresentationKind {
    NoInfo,
    Demographics(DemographicSelection),
    Examples(usize),
    ValueProfile,
    DemographicsPlusProfile(DemographicSelection),
}

impl RepresentationKind {
    pub fn needs_profile(&self) -> bool {
        matches!(
            self,
            RepresentationKind::ValueProfile | RepresentationKind::DemographicsPlusProfile(_)
        )
    }

    /// Attach the rater's profile text where the kind requires one.
    pub fn instantiate(&self, profile: Option<&str>) -> Result<Representation> {
        let profile = || {
            profile
                .map(str::to_string)
                .ok_or_else(|| Error::InvalidArgument(format!("representation `{self}` needs a value profile")))
        };
        let rep = match self {
            RepresentationKind::NoInfo => Representation::NoInfo,
            RepresentationKind::Demographics(s) => Representation::Demographics(s.clone()),
            RepresentationKind::Examples(n) => Representation::Examples(*n),
            RepresentationKind::ValueProfile => Representation::ValueProfile(profile()?),
            RepresentationKind::DemographicsPlusProfile(s) => {
                Representation::DemographicsPlusProfile(s.clone(), profile()?)
            }
        };
        rep.validate()?;
        Ok(rep)
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepresentationKind::NoInfo => f.write_str("noinfo"),
            RepresentationKind::Demographics(s) => f.write_str(&s.tag()),
            RepresentationKind::Examples(n) => write!(f, "ex:{n}"),
            RepresentationKind::ValueProfile => f.write_str("profile"),
            RepresentationKind::DemographicsPlusProfile(s) => write!(f, "{}+profile", s.tag()),
        }
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown representation `{s}`"));
        let selection = |spec: &str| -> Result<DemographicSelection> {
            match spec {
                "dem" => Ok(DemographicSelection::All),
                _ => {
                    let keys = spec.strip_prefix("dem:").ok_or_else(bad)?;
                    let keys: Vec<String> = keys.split(',').map(|k| k.trim().to_string()).collect();
                    if keys.iter().any(String::is_empty) {
                        return Err(bad());
                    }
                    Ok(DemographicSelection::Keys(keys))
                }
            }
        };
        match s {
            "noinfo" => Ok(RepresentationKind::NoInfo),
            "profile" => Ok(RepresentationKind::ValueProfile),
            _ if s.starts_with("ex:") => {
                let n: usize = s[3..].parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err(bad());
                }
                Ok(RepresentationKind::Examples(n))
            }
            _ if s.ends_with("+profile") => Ok(RepresentationKind::DemographicsPlusProfile(selection(
                &s[..s.len() - "+profile".len()],
            )?)),
            _ if s.starts_with("dem") => Ok(RepresentationKind::Demographics(selection(s)?)),
            _ => Err(bad()),
        }
    }
}

/// Decoder-facing conditioning text plus a reporting tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedConditioning {
    pub text: String,
    pub representation_tag: String,
}

impl RenderedConditioning {
    pub fn no_info() -> Self {
        RenderedConditioning {
            text: String::new(),
            representation_tag: "noinfo".into(),
        }
    }
}

/// Named, versioned text formats with `{placeholder}` substitution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningTemplate {
    pub id: String,
    /// Placeholders: `{key}`, `{value}`.
    pub demographic_line: String,
    /// Placeholders: `{prompt}`, `{options}`, `{answer}`.
    pub example_line: String,
    pub options_separator: String,
    pub section_separator: String,
    /// Encoder prompt. Placeholder: `{examples}`.
    pub encoder_prompt: String,
}

impl Default for ConditioningTemplate {
    fn default() -> Self {
        ConditioningTemplate {
            id: "default-v1".into(),
            demographic_line: "{key}: {value}".into(),
            example_line: "Q: {prompt} / Options: {options} / A: {answer}".into(),
            options_separator: " | ".into(),
            section_separator: "\n\n".into(),
            encoder_prompt: "Below are annotations written by one rater.\n\n{examples}\n\n\
                             Describe, as a short list of statements, the values and preferences \
                             of this rater that best explain how they annotate."
                .into(),
        }
    }
}

/// Substitute `{name}` placeholders in one left-to-right pass, so substituted
/// values are never re-scanned. Unknown placeholders are left as written.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match values.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

impl ConditioningTemplate {
    /// One rendered fit example.
    pub fn demonstration(&self, instance: &Instance, rating: &Rating) -> String {
        let options = instance.choices.join(&self.options_separator);
        fill(
            &self.example_line,
            &[
                ("prompt", &instance.prompt),
                ("options", &options),
                ("answer", &instance.choices[rating.choice_index]),
            ],
        )
    }

    fn demonstrations<'a>(
        &self,
        ratings: impl Iterator<Item = &'a Rating>,
        instances: &BTreeMap<String, Instance>,
    ) -> Result<Vec<String>> {
        ratings
            .map(|r| {
                let inst = instances
                    .get(&r.instance_id)
                    .ok_or_else(|| Error::Render(format!("unknown instance `{}`", r.instance_id)))?;
                Ok(self.demonstration(inst, r))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Renderer {
    pub template: ConditioningTemplate,
    /// Missing demographic keys are an error instead of a warning.
    pub strict: bool,
}

impl Renderer {
    pub fn new(template: ConditioningTemplate, strict: bool) -> Self {
        Renderer { template, strict }
    }

    /// Render one representation. Only `partition.fit` is ever read.
    pub fn render(
        &self,
        representation: &Representation,
        rater: &Rater,
        partition: &RaterPartition,
        instances: &BTreeMap<String, Instance>,
    ) -> Result<RenderedConditioning> {
        representation.validate()?;
        let text = match representation {
            Representation::NoInfo => String::new(),
            Representation::Demographics(sel) => self.demographics(sel, rater)?,
            Representation::Examples(n) => {
                if partition.fit.is_empty() {
                    return Err(Error::Render(format!("rater `{}` has no fit ratings", rater.id)));
                }
                self.template
                    .demonstrations(partition.fit.iter().take(*n), instances)?
                    .join("\n")
            }
            Representation::ValueProfile(text) => text.clone(),
            Representation::DemographicsPlusProfile(sel, text) => {
                let dem = self.demographics(sel, rater)?;
                if dem.is_empty() {
                    text.clone()
                } else {
                    format!("{dem}{}{text}", self.template.section_separator)
                }
            }
        };
        Ok(RenderedConditioning {
            text,
            representation_tag: representation.tag(),
        })
    }

    fn demographics(&self, selection: &DemographicSelection, rater: &Rater) -> Result<String> {
        let pairs: Vec<(&String, &String)> = match selection {
            DemographicSelection::All => rater.demographics.iter().collect(),
            DemographicSelection::Keys(keys) => {
                let mut sorted: Vec<&String> = keys.iter().collect();
                sorted.sort();
                sorted.dedup();
                let mut pairs = Vec::with_capacity(sorted.len());
                for key in sorted {
                    match rater.demographics.get_key_value(key) {
                        Some(kv) => pairs.push(kv),
                        None if self.strict => {
                            return Err(Error::Render(format!("rater `{}` lacks demographic `{key}`", rater.id)))
                        }
                        None => log::warn!("rater `{}` lacks demographic `{key}`; skipped", rater.id),
                    }
                }
                pairs
            }
        };
        Ok(pairs
            .into_iter()
            .map(|(k, v)| fill(&self.template.demographic_line, &[("key", k), ("value", v)]))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    /// Encoder prompt built from every fit demonstration.
    pub fn encoder_prompt(&self, partition: &RaterPartition, instances: &BTreeMap<String, Instance>) -> Result<String> {
        let demos = self.template.demonstrations(partition.fit.iter(), instances)?;
        Ok(fill(&self.template.encoder_prompt, &[("examples", &demos.join("\n"))]))
    }
}

/// Free-text completion service used to infer value profiles.
pub trait EncoderClient: Send + Sync {
    fn encoder_id(&self) -> &str;

    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub rater_id: String,
    pub profile_text: String,
    #[serde(default)]
    pub encoder_id: String,
    #[serde(default)]
    pub fit_fingerprint: String,
}

type ProfileKey = (String, String, String);

/// Profiles keyed by (rater, fit fingerprint, encoder), optionally persisted
/// as append-only JSONL.
#[derive(Debug, Default)]
pub struct ProfileStore {
    path: Option<PathBuf>,
    records: RwLock<BTreeMap<ProfileKey, ProfileRecord>>,
    writer: Mutex<Option<File>>,
}

impl ProfileStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = BTreeMap::new();
        if path.exists() {
            for located in read_jsonl::<ProfileRecord>(
                &path,
                &["rater_id", "profile_text", "encoder_id", "fit_fingerprint"],
                false,
            )? {
                let r = located.value;
                records.insert((r.rater_id.clone(), r.fit_fingerprint.clone(), r.encoder_id.clone()), r);
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(ProfileStore {
            path: Some(path),
            records: RwLock::new(records),
            writer: Mutex::new(Some(writer)),
        })
    }

    pub fn get(&self, rater_id: &str, fingerprint: &str, encoder_id: &str) -> Option<String> {
        self.records
            .read()
            .expect("profile store poisoned")
            .get(&(rater_id.to_string(), fingerprint.to_string(), encoder_id.to_string()))
            .map(|r| r.profile_text.clone())
    }

    pub fn put(&self, record: ProfileRecord) -> Result<()> {
        let mut writer = self.writer.lock().expect("profile store poisoned");
        if let (Some(file), Some(path)) = (writer.as_mut(), &self.path) {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.records.write().expect("profile store poisoned").insert(
            (
                record.rater_id.clone(),
                record.fit_fingerprint.clone(),
                record.encoder_id.clone(),
            ),
            record,
        );
        Ok(())
    }

    pub fn records(&self) -> Vec<ProfileRecord> {
        self.records
            .read()
            .expect("profile store poisoned")
            .values()
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeSettings {
    pub retry: RetryPolicy,
    pub max_profile_chars: usize,
}

impl Default for EncodeSettings {
    fn default() -> Self {
        EncodeSettings {
            retry: RetryPolicy::default(),
            max_profile_chars: 8000,
        }
    }
}

/// Infer (or fetch from the store) a value profile from all fit demonstrations.
pub fn encode_profile(
    rater: &Rater,
    partition: &RaterPartition,
    instances: &BTreeMap<String, Instance>,
    renderer: &Renderer,
    encoder: &dyn EncoderClient,
    store: &ProfileStore,
    settings: &EncodeSettings,
) -> Result<String> {
    if partition.fit.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rater `{}` has {} fit ratings; at least 2 needed to encode",
            rater.id,
            partition.fit.len()
        )));
    }
    let fingerprint = partition.fingerprint();
    if let Some(text) = store.get(&rater.id, &fingerprint, encoder.encoder_id()) {
        return Ok(text);
    }
    let prompt = renderer.encoder_prompt(partition, instances)?;
    let text = settings.retry.run(|| encoder.complete(&prompt))?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(BackendError::Fatal(format!("encoder returned an empty profile for rater `{}`", rater.id)).into());
    }
    if text.chars().count() > settings.max_profile_chars {
        return Err(BackendError::Fatal(format!(
            "encoder profile for rater `{}` exceeds {} characters",
            rater.id, settings.max_profile_chars
        ))
        .into());
    }
    store.put(ProfileRecord {
        rater_id: rater.id.clone(),
        profile_text: text.clone(),
        encoder_id: encoder.encoder_id().to_string(),
        fit_fingerprint: fingerprint,
    })?;
    Ok(text)
}

/// Encode many raters with at most `max_in_flight` concurrent requests.
/// Results are in input order.
#[allow(clippy::too_many_arguments)]
pub fn encode_profiles(
    jobs: &[(&Rater, &RaterPartition)],
    instances: &BTreeMap<String, Instance>,
    renderer: &Renderer,
    encoder: &dyn EncoderClient,
    store: &ProfileStore,
    settings: &EncodeSettings,
    max_in_flight: usize,
    execution: Execution,
) -> Vec<Result<String>> {
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(max_in_flight.max(1)) {
        out.extend(execution.map_slice(chunk, |(rater, partition)| {
            encode_profile(rater, partition, instances, renderer, encoder, store, settings)
        }));
    }
    out
}

/// Load externally authored profiles, one per rater.
pub fn load_profiles(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for located in read_jsonl::<ProfileRecord>(
        path,
        &["rater_id", "profile_text", "encoder_id", "fit_fingerprint"],
        false,
    )? {
        let r = located.value;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: located.line,
            message,
        };
        if r.profile_text.trim().is_empty() {
            return Err(err(format!("empty profile for rater `{}`", r.rater_id)));
        }
        if map.contains_key(&r.rater_id) {
            return Err(err(format!("duplicate rater_id `{}`", r.rater_id)));
        }
        map.insert(r.rater_id, r.profile_text);
    }
    Ok(map)
}
