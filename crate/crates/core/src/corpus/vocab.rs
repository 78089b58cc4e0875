use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenTag {
    Reserved,
    /// Marker token of a domain.
    Marker(usize),
    /// Topic token belonging to a topic cluster.
    Topic(usize),
    Filler,
}

/// Token table with reserved ids `0..4` followed by domain markers,
/// fillers and clustered topic tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    tags: Vec<TokenTag>,
    index: HashMap<String, usize>,
    num_domains: usize,
    markers: Vec<Vec<usize>>,
    clusters: Vec<Vec<usize>>,
    fillers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocabLayout {
    pub size: usize,
    pub num_domains: usize,
    pub markers_per_domain: usize,
    pub fillers: usize,
    pub cluster_size: usize,
}

impl Vocabulary {
    pub fn build(layout: VocabLayout) -> Result<Self> {
        let VocabLayout {
            size,
            num_domains,
            markers_per_domain,
            fillers,
            cluster_size,
        } = layout;
        if num_domains < 2 {
            return Err(Error::Invalid(format!("need at least 2 domains, got {num_domains}")));
        }
        if markers_per_domain < 4 {
            return Err(Error::Invalid(format!(
                "need at least 4 markers per domain, got {markers_per_domain}"
            )));
        }
        if cluster_size < 2 {
            return Err(Error::Invalid("topic clusters need at least 2 tokens".into()));
        }
        let fixed = NUM_RESERVED + num_domains * markers_per_domain + fillers;
        if size < fixed + cluster_size {
            return Err(Error::Invalid(format!(
                "vocabulary of {size} cannot host {num_domains} marker groups of \
                 {markers_per_domain}, {fillers} fillers and one topic cluster of {cluster_size}"
            )));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut tags = vec![TokenTag::Reserved; NUM_RESERVED];
        let mut markers = vec![Vec::new(); num_domains];
        for (d, group) in markers.iter_mut().enumerate() {
            for j in 0..markers_per_domain {
                group.push(tokens.len());
                tokens.push(format!("d{d}.m{j}"));
                tags.push(TokenTag::Marker(d));
            }
        }
        let mut filler_ids = Vec::with_capacity(fillers);
        for j in 0..fillers {
            filler_ids.push(tokens.len());
            tokens.push(format!("f{j}"));
            tags.push(TokenTag::Filler);
        }
        let num_topics = size - fixed;
        let num_clusters = num_topics / cluster_size;
        let mut clusters = vec![Vec::new(); num_clusters];
        for t in 0..num_topics {
            // leftover topics join the last cluster
            let c = (t / cluster_size).min(num_clusters - 1);
            clusters[c].push(tokens.len());
            tokens.push(format!("t{t}"));
            tags.push(TokenTag::Topic(c));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            tokens,
            tags,
            index,
            num_domains,
            markers,
            clusters,
            fillers: filler_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK` for anything outside the table.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn tag(&self, id: usize) -> TokenTag {
        self.tags.get(id).copied().unwrap_or(TokenTag::Reserved)
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < NUM_RESERVED
    }

    pub fn markers(&self, domain: usize) -> &[usize] {
        &self.markers[domain]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn fillers(&self) -> &[usize] {
        &self.fillers
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w)).collect()
    }
}
