use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use surveychat_core::config::{is_participant_id, is_url_safe_token};

use crate::SimError;

/// Fixed width with a terminator so no sentinel is a substring of another.
pub fn sentinel(session_index: usize) -> String {
    format!("SNTL{session_index:06}Z")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAssignment {
    RoundRobin,
    /// Every session gets the first listed condition.
    Fixed,
    Random {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStep {
    /// Applied once this many messages have been answered; 0 means right
    /// after the first page load.
    pub after_turn: usize,
    pub phase_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScript {
    pub n_sessions: usize,
    pub condition_assignment: ConditionAssignment,
    pub conditions: Vec<String>,
    pub turns_per_session: usize,
    #[serde(default)]
    pub phase_schedule: Vec<PhaseStep>,
    /// Placeholders: `{session_index}`, `{turn_index}`, `{sentinel}`.
    pub message_template: String,
    #[serde(default = "default_prefix")]
    pub participant_prefix: String,
}

fn default_prefix() -> String {
    "sim".into()
}

impl SimScript {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let script: Self =
            serde_json::from_str(text).map_err(|e| SimError::ScriptInvalid(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::ScriptInvalid(m));
        if self.n_sessions == 0 {
            return invalid("n_sessions must be at least 1".into());
        }
        if self.conditions.is_empty() {
            return invalid("conditions must list at least one condition id".into());
        }
        if let Some(c) = self.conditions.iter().find(|c| !is_url_safe_token(c)) {
            return invalid(format!("condition id `{c}` is not a URL-safe token"));
        }
        if !is_participant_id(&self.participant_id(self.n_sessions - 1)) {
            return invalid(format!(
                "participant_prefix `{}` yields invalid ids",
                self.participant_prefix
            ));
        }
        for step in &self.phase_schedule {
            if step.after_turn > self.turns_per_session {
                return invalid(format!(
                    "phase `{}` scheduled after turn {} but sessions only have {} turns",
                    step.phase_id, step.after_turn, self.turns_per_session
                ));
            }
            if !is_url_safe_token(&step.phase_id) {
                return invalid(format!(
                    "phase id `{}` is not a URL-safe token",
                    step.phase_id
                ));
            }
        }
        if self.message_template.trim().is_empty() {
            return invalid("message_template is empty".into());
        }
        Ok(())
    }

    pub fn participant_id(&self, session_index: usize) -> String {
        format!("{}{session_index:05}", self.participant_prefix)
    }

    /// Condition of every session, in session order.
    pub fn assignments(&self) -> Vec<String> {
        match &self.condition_assignment {
            ConditionAssignment::RoundRobin => (0..self.n_sessions)
                .map(|i| self.conditions[i % self.conditions.len()].clone())
                .collect(),
            ConditionAssignment::Fixed => vec![self.conditions[0].clone(); self.n_sessions],
            ConditionAssignment::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..self.n_sessions)
                    .map(|_| self.conditions[rng.random_range(0..self.conditions.len())].clone())
                    .collect()
            }
        }
    }

    pub fn message(&self, session_index: usize, turn_index: usize) -> String {
        self.message_template
            .replace("{session_index}", &session_index.to_string())
            .replace("{turn_index}", &turn_index.to_string())
            .replace("{sentinel}", &sentinel(session_index))
    }

    /// Phases to apply once `answered` messages are done, in schedule order.
    pub fn phases_after(&self, answered: usize) -> impl Iterator<Item = &str> {
        self.phase_schedule
            .iter()
            .filter(move |s| s.after_turn == answered)
            .map(|s| s.phase_id.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> SimScript {
        SimScript {
            n_sessions: 6,
            condition_assignment: ConditionAssignment::RoundRobin,
            conditions: vec!["1".into(), "2".into(), "3".into()],
            turns_per_session: 3,
            phase_schedule: vec![PhaseStep {
                after_turn: 2,
                phase_id: "post_timer".into(),
            }],
            message_template: "s{session_index} t{turn_index} {sentinel}".into(),
            participant_prefix: "sim".into(),
        }
    }

    #[test]
    fn placeholders() {
        let s = script();
        assert_eq!(s.message(4, 2), "s4 t2 SNTL000004Z");
        assert_eq!(s.participant_id(4), "sim00004");
    }

    #[test]
    fn sentinels_are_not_substrings_of_each_other() {
        let all: Vec<String> = (0..2000).map(sentinel).collect();
        for (i, a) in all.iter().enumerate().step_by(37) {
            for (j, b) in all.iter().enumerate() {
                assert_eq!(i == j, b.contains(a.as_str()));
            }
        }
    }

    #[test]
    fn assignment_modes() {
        let mut s = script();
        assert_eq!(s.assignments(), ["1", "2", "3", "1", "2", "3"]);
        s.condition_assignment = ConditionAssignment::Fixed;
        assert!(s.assignments().iter().all(|c| c == "1"));
        s.condition_assignment = ConditionAssignment::Random { seed: 7 };
        let a = s.assignments();
        assert_eq!(a, s.assignments());
        s.n_sessions = 300;
        let counts = ["1", "2", "3"].map(|c| s.assignments().iter().filter(|x| *x == c).count());
        assert!(counts.iter().all(|&n| n > 60), "{counts:?}");
    }

    #[test]
    fn validation() {
        assert!(script().validate().is_ok());
        let mut s = script();
        s.n_sessions = 0;
        assert!(matches!(s.validate(), Err(SimError::ScriptInvalid(_))));
        let mut s = script();
        s.conditions.clear();
        assert!(s.validate().is_err());
        let mut s = script();
        s.phase_schedule[0].after_turn = 4;
        assert!(s.validate().is_err());
        let mut s = script();
        s.participant_prefix = "bad prefix".into();
        assert!(s.validate().is_err());
        assert!(SimScript::from_json(r#"{"n_sessions": 1}"#).is_err());
    }

    #[test]
    fn json_shape() {
        let text = r#"{
            "n_sessions": 2,
            "condition_assignment": {"random": {"seed": 9}},
            "conditions": ["1"],
            "turns_per_session": 0,
            "message_template": "hi {sentinel}"
        }"#;
        let s = SimScript::from_json(text).unwrap();
        assert_eq!(
            s.condition_assignment,
            ConditionAssignment::Random { seed: 9 }
        );
        assert_eq!(s.participant_prefix, "sim");
        assert!(s.phase_schedule.is_empty());
        let back = SimScript::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
