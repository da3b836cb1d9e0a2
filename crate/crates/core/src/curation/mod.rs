//! Automatic triplet curation from an unlabeled corpus.
//!
//! Every item serves once as a reference. Its target is drawn from the
//! moderate-similarity rank window ([`mining`]) and the agent writes the
//! modification text, either from captions of both images (two-step) or
//! from the image pair alone (direct).

pub mod agent;
pub mod mining;
pub mod prompts;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxsim::{maxsim_matrix, with_workers};
use crate::tokens::EmbeddingStore;

pub use agent::{
    generate_caption, generate_modification, generate_modification_direct, Agent, AgentEndpoint, HttpAgent, ImageRef,
    ImageSource, MockAgent,
};
pub use mining::{select_target, select_targets, MiningConfig, TargetSelection};
pub use prompts::{PromptKind, PromptSet, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Caption both images, then generate text from images plus captions.
    #[default]
    TwoStep,
    /// Generate text from the two images alone.
    Direct,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::TwoStep => "two_step",
            Protocol::Direct => "direct",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_step" => Ok(Protocol::TwoStep),
            "direct" => Ok(Protocol::Direct),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }
}

/// What to do when one reference fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Log and drop the triplet.
    Skip,
}

/// A curated ⟨reference, modification, target⟩ record.
///
/// Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub ref_id: String,
    pub target_id: String,
    pub modification: String,
    pub caption_ref: Option<String>,
    pub caption_target: Option<String>,
    pub rank: usize,
    pub similarity: f64,
    pub agent_model: String,
    pub protocol: Protocol,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("triplet {}: {msg}", self.ref_id)));
        if self.modification.trim().is_empty() {
            return bad("empty modification");
        }
        if self.ref_id == self.target_id {
            return bad("reference equals target");
        }
        let captions = (self.caption_ref.is_some(), self.caption_target.is_some());
        match (self.protocol, captions) {
            (Protocol::TwoStep, (true, true)) | (Protocol::Direct, (false, false)) => Ok(()),
            (Protocol::TwoStep, _) => bad("two_step triplet without both captions"),
            (Protocol::Direct, _) => bad("direct triplet carries captions"),
        }
    }
}

/// Maps corpus ids to image payloads.
pub trait PayloadResolver: Send + Sync {
    fn resolve(&self, id: &str) -> Result<ImageRef>;
}

/// Resolves every id to an id-only reference. Enough for [`MockAgent`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IdResolver;

impl PayloadResolver for IdResolver {
    fn resolve(&self, id: &str) -> Result<ImageRef> {
        Ok(ImageRef::id_only(id))
    }
}

/// Resolves `id` to the first existing file among `dir/id` and
/// `dir/id.{jpg,jpeg,png,webp}`.
#[derive(Debug, Clone)]
pub struct DirResolver {
    pub dir: PathBuf,
}

impl DirResolver {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl PayloadResolver for DirResolver {
    fn resolve(&self, id: &str) -> Result<ImageRef> {
        let mut candidates = vec![self.dir.join(id)];
        candidates.extend(
            ["jpg", "jpeg", "png", "webp"]
                .iter()
                .map(|ext| self.dir.join(format!("{id}.{ext}"))),
        );
        let path = candidates.into_iter().find(|p| p.is_file()).ok_or_else(|| {
            Error::io(
                self.dir.join(id),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no image file for id"),
            )
        })?;
        Ok(ImageRef {
            id: id.to_owned(),
            source: ImageSource::File(path),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CurationOptions {
    pub protocol: Protocol,
    pub on_error: FailurePolicy,
    /// Maximum concurrent agent calls (0 = one per core).
    pub in_flight: usize,
    pub prompts: PromptSet,
}

impl Default for CurationOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::TwoStep,
            on_error: FailurePolicy::Abort,
            in_flight: 4,
            prompts: PromptSet::default(),
        }
    }
}

fn annotate(ref_id: &str, e: Error) -> Error {
    Error::Curation {
        ref_id: ref_id.to_owned(),
        source: Box::new(e),
    }
}

/// Builds one triplet per store item, in store order.
///
/// Similarities come from [`maxsim_matrix`] on the current rayon pool;
/// agent calls run on a separate pool of `opts.in_flight` workers and are
/// re-ordered before returning, so the result is independent of both pool
/// sizes when the agent is deterministic.
pub fn curate_triplets(
    store: &EmbeddingStore,
    resolver: &dyn PayloadResolver,
    cfg: &MiningConfig,
    agent: &dyn Agent,
    opts: &CurationOptions,
) -> Result<Vec<Triplet>> {
    cfg.validate(store.len().saturating_sub(1))?;
    let store = if store.is_normalized() {
        std::borrow::Cow::Borrowed(store)
    } else {
        std::borrow::Cow::Owned(store.normalized()?)
    };
    let scores = maxsim_matrix(&store, &store)?;
    let selections = mining::select_targets(&scores, store.ids(), cfg)?;

    let results: Vec<Result<Triplet>> = with_workers(opts.in_flight, || {
        let captions: BTreeMap<&str, Result<String>> = match opts.protocol {
            Protocol::Direct => BTreeMap::new(),
            Protocol::TwoStep => {
                let mut ids: Vec<&str> = selections
                    .iter()
                    .flat_map(|s| [s.ref_id.as_str(), s.target_id.as_str()])
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                ids.par_iter()
                    .map(|&id| {
                        let caption = resolver
                            .resolve(id)
                            .and_then(|img| generate_caption(agent, &img, &opts.prompts.caption));
                        (id, caption)
                    })
                    .collect()
            }
        };
        selections
            .par_iter()
            .map(|sel| build_triplet(sel, resolver, agent, opts, &captions).map_err(|e| annotate(&sel.ref_id, e)))
            .collect()
    })?;

    let mut triplets = Vec::with_capacity(results.len());
    for result in results {
        match (result, opts.on_error) {
            (Ok(t), _) => triplets.push(t),
            (Err(e), FailurePolicy::Abort) => return Err(e),
            (Err(e), FailurePolicy::Skip) => log::warn!("skipping: {e}"),
        }
    }
    Ok(triplets)
}

fn caption_of(captions: &BTreeMap<&str, Result<String>>, id: &str) -> Result<String> {
    match captions.get(id) {
        Some(Ok(c)) => Ok(c.clone()),
        // Captions are shared between references, so the error is rebuilt
        // per use rather than moved out.
        Some(Err(e)) => Err(match e {
            Error::EmptyResponse => Error::EmptyResponse,
            Error::Template { name, reason } => Error::Template {
                name: name.clone(),
                reason: reason.clone(),
            },
            Error::AgentUnavailable { attempts, reason } => Error::AgentUnavailable {
                attempts: *attempts,
                reason: format!("caption for {id}: {reason}"),
            },
            other => Error::InvalidConfig(format!("caption for {id}: {other}")),
        }),
        None => Err(Error::InvalidConfig(format!("no caption computed for {id}"))),
    }
}

fn build_triplet(
    sel: &TargetSelection,
    resolver: &dyn PayloadResolver,
    agent: &dyn Agent,
    opts: &CurationOptions,
    captions: &BTreeMap<&str, Result<String>>,
) -> Result<Triplet> {
    let reference = resolver.resolve(&sel.ref_id)?;
    let target = resolver.resolve(&sel.target_id)?;
    let (modification, caption_ref, caption_target) = match opts.protocol {
        Protocol::TwoStep => {
            let cap_ref = caption_of(captions, &sel.ref_id)?;
            let cap_tgt = caption_of(captions, &sel.target_id)?;
            let text = generate_modification(agent, &reference, &cap_ref, &target, &cap_tgt, &opts.prompts.modify)?;
            (text, Some(cap_ref), Some(cap_tgt))
        }
        Protocol::Direct => {
            let text = generate_modification_direct(agent, &reference, &target, &opts.prompts.modify_direct)?;
            (text, None, None)
        }
    };
    Ok(Triplet {
        ref_id: sel.ref_id.clone(),
        target_id: sel.target_id.clone(),
        modification,
        caption_ref,
        caption_target,
        rank: sel.rank,
        similarity: sel.similarity,
        agent_model: agent.model().to_owned(),
        protocol: opts.protocol,
    })
}

/// Writes one JSON object per line in [`Triplet`] field order.
pub fn write_triplets_jsonl<W: Write>(triplets: &[Triplet], mut out: W) -> std::io::Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_triplets_jsonl(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_triplets_jsonl(triplets, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_triplets_jsonl<R: BufRead>(input: R, path: &Path) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(t);
    }
    Ok(out)
}
