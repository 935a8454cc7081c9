//! Layered system prompt composition.
//!
//! The effective system prompt is the active layers' texts in ascending
//! `order_rank`, joined by a blank line. Phase directives swap layers in and
//! out; both operations are pure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PhaseDirective, StudyConfig};

pub const LAYER_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown prompt layer `{0}`")]
    UnknownLayer(String),
}

/// The set of currently active layer ids. Iteration order is lexical and
/// carries no meaning; use [`ordered_layers`] for rank order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSet(BTreeSet<String>);

impl LayerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, layer_id: &str) -> bool {
        self.0.contains(layer_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks membership against the study's layer map.
    pub fn validate(&self, config: &StudyConfig) -> Result<(), PromptError> {
        match self.iter().find(|id| !config.layers.contains_key(*id)) {
            Some(id) => Err(PromptError::UnknownLayer(id.to_string())),
            None => Ok(()),
        }
    }
}

impl<S: Into<String>> FromIterator<S> for LayerSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub text: String,
    pub constituent_layers: Vec<String>,
}

/// Layer ids of `layers` sorted by ascending `order_rank`.
pub fn ordered_layers(config: &StudyConfig, layers: &LayerSet) -> Result<Vec<String>, PromptError> {
    let mut ranked = layers
        .iter()
        .map(|id| {
            config
                .layer(id)
                .map(|l| (l.order_rank, id))
                .ok_or_else(|| PromptError::UnknownLayer(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort();
    Ok(ranked.into_iter().map(|(_, id)| id.to_string()).collect())
}

pub fn compose_system_prompt(
    config: &StudyConfig,
    layers: &LayerSet,
) -> Result<ComposedPrompt, PromptError> {
    let constituent_layers = ordered_layers(config, layers)?;
    let text = constituent_layers
        .iter()
        .map(|id| config.layers[id].text.as_str())
        .collect::<Vec<_>>()
        .join(LAYER_SEPARATOR);
    Ok(ComposedPrompt {
        text,
        constituent_layers,
    })
}

/// `(layers \ deactivate) ∪ activate`.
pub fn apply_phase(layers: &LayerSet, directive: &PhaseDirective) -> LayerSet {
    let mut next = layers.0.clone();
    for id in &directive.deactivate {
        next.remove(id);
    }
    next.extend(directive.activate.iter().cloned());
    LayerSet(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StudyConfig;
    use proptest::prelude::*;

    fn config() -> StudyConfig {
        StudyConfig::from_json_str(
            r#"{
                "schema_version": 1, "study_id": "t",
                "conditions": { "1": { "base_prompt_layers": ["base_persona", "poem_task"] } },
                "layers": {
                    "poem_task": { "text": "Help write poems.", "order_rank": 20 },
                    "base_persona": { "text": "You are a friendly assistant.", "order_rank": 10 },
                    "no_poems": { "text": "Refuse poem requests.", "order_rank": 30 },
                    "brevity": { "text": "Keep answers short.", "order_rank": -5 },
                    "tone": { "text": "Be warm.", "order_rank": 15 }
                },
                "phases": {
                    "post_timer": { "activate": ["no_poems"], "deactivate": ["poem_task"] }
                }
            }"#,
            None,
        )
        .unwrap()
    }

    fn directive(activate: &[&str], deactivate: &[&str]) -> PhaseDirective {
        PhaseDirective {
            phase_id: "d".into(),
            activate: activate.iter().map(|s| s.to_string()).collect(),
            deactivate: deactivate.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Independent composition: explicit (rank, text) pairs, sorted and
    /// joined by hand.
    fn oracle_compose(config: &StudyConfig, ids: &[&str]) -> String {
        let mut pairs: Vec<(i64, &str)> = ids
            .iter()
            .map(|id| {
                (
                    config.layers[*id].order_rank,
                    config.layers[*id].text.as_str(),
                )
            })
            .collect();
        pairs.sort_by_key(|p| p.0);
        let mut out = String::new();
        for (i, (_, t)) in pairs.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str(t);
        }
        out
    }

    #[test]
    fn single_layer_is_verbatim() {
        let c = config();
        let p = compose_system_prompt(&c, &LayerSet::from_iter(["base_persona"])).unwrap();
        assert_eq!(p.text, "You are a friendly assistant.");
        assert_eq!(p.constituent_layers, vec!["base_persona"]);
    }

    #[test]
    fn two_layers_joined_in_rank_order() {
        let c = config();
        let a =
            compose_system_prompt(&c, &LayerSet::from_iter(["base_persona", "poem_task"])).unwrap();
        assert_eq!(a.text, oracle_compose(&c, &["base_persona", "poem_task"]));
        assert_eq!(a.text, "You are a friendly assistant.\n\nHelp write poems.");
        let b =
            compose_system_prompt(&c, &LayerSet::from_iter(["poem_task", "base_persona"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let c = config();
        let err = compose_system_prompt(&c, &LayerSet::from_iter(["ghost"])).unwrap_err();
        assert_eq!(err, PromptError::UnknownLayer("ghost".into()));
    }

    #[test]
    fn post_timer_swaps_layers() {
        let c = config();
        let s = LayerSet::from_iter(["base_persona", "poem_task"]);
        let out = apply_phase(&s, &c.phases["post_timer"]);
        assert_eq!(out, LayerSet::from_iter(["base_persona", "no_poems"]));
        // input untouched
        assert!(s.contains("poem_task"));
    }

    #[test]
    fn empty_directive_is_identity() {
        let s = LayerSet::from_iter(["base_persona"]);
        assert_eq!(apply_phase(&s, &directive(&[], &[])), s);
    }

    #[test]
    fn noop_activation_and_deactivation() {
        let s = LayerSet::from_iter(["base_persona"]);
        let d = directive(&["base_persona"], &["no_poems"]);
        assert_eq!(apply_phase(&s, &d), s);
    }

    const IDS: [&str; 5] = ["base_persona", "poem_task", "no_poems", "brevity", "tone"];

    fn subset() -> impl Strategy<Value = Vec<&'static str>> {
        proptest::sample::subsequence(IDS.to_vec(), 0..=IDS.len()).prop_shuffle()
    }

    fn disjoint_directive() -> impl Strategy<Value = PhaseDirective> {
        proptest::collection::vec(0u8..3, IDS.len()).prop_map(|picks| {
            let mut act = Vec::new();
            let mut deact = Vec::new();
            for (id, pick) in IDS.iter().zip(picks) {
                match pick {
                    1 => act.push(*id),
                    2 => deact.push(*id),
                    _ => {}
                }
            }
            directive(&act, &deact)
        })
    }

    proptest! {
        #[test]
        fn apply_is_idempotent(s in subset(), d in disjoint_directive()) {
            let set = LayerSet::from_iter(s);
            let once = apply_phase(&set, &d);
            prop_assert_eq!(apply_phase(&once, &d), once);
        }

        #[test]
        fn compose_is_order_insensitive_and_matches_oracle(s in subset()) {
            let c = config();
            let forward = compose_system_prompt(&c, &LayerSet::from_iter(s.clone())).unwrap();
            let mut rev = s.clone();
            rev.reverse();
            let backward = compose_system_prompt(&c, &LayerSet::from_iter(rev)).unwrap();
            prop_assert_eq!(&forward, &backward);
            prop_assert_eq!(forward.text, oracle_compose(&c, &s));
        }

        #[test]
        fn constituents_stay_rank_ordered(
            start in subset(),
            ds in proptest::collection::vec(disjoint_directive(), 0..6),
        ) {
            let c = config();
            let mut set = LayerSet::from_iter(start);
            for d in &ds {
                set = apply_phase(&set, d);
            }
            let p = compose_system_prompt(&c, &set).unwrap();
            let ranks: Vec<i64> = p.constituent_layers.iter().map(|id| c.layers[id].order_rank).collect();
            prop_assert!(ranks.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(p.constituent_layers.len(), set.len());
        }
    }
}
