//! The `/chat` shell: a static HTML page carrying bootstrap data for the
//! widget script plus a server-rendered copy of the history.

use serde::Serialize;
use surveychat_core::{DisplaySpec, SelfReferenceMode, Turn, TurnRole};

/// Everything the widget needs to render a session without further calls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bootstrap {
    pub study_id: String,
    pub pid: String,
    pub cond: String,
    pub phase: Option<String>,
    pub display: BootstrapDisplay,
    pub max_user_message_bytes: usize,
    pub history: Vec<BootstrapTurn>,
    pub message_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapDisplay {
    pub icon_url: Option<String>,
    pub agent_name: Option<String>,
    pub self_reference_mode: SelfReferenceMode,
}

impl From<&DisplaySpec> for BootstrapDisplay {
    fn from(d: &DisplaySpec) -> Self {
        Self {
            icon_url: d.icon_ref.clone(),
            agent_name: d.agent_name.clone(),
            self_reference_mode: d.self_reference_mode,
        }
    }
}

/// Participant-visible turns only; phase events are not shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BootstrapTurn {
    pub seq: u64,
    pub role: TurnRole,
    pub content: String,
}

impl BootstrapTurn {
    pub fn visible(turns: &[Turn]) -> Vec<Self> {
        turns
            .iter()
            .filter(|t| t.role != TurnRole::PhaseEvent)
            .map(|t| Self {
                seq: t.seq,
                role: t.role,
                content: t.content.clone(),
            })
            .collect()
    }
}

/// JSON that can sit inside a `<script>` element: `<`, `>`, `&` and the
/// JavaScript line separators are written as `\u` escapes.
pub fn script_safe_json<T: Serialize>(value: &T) -> String {
    let raw = serde_json::to_string(value).expect("bootstrap is always serializable");
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        match c {
            '<' => out.push_str("\\u003c"),
            '>' => out.push_str("\\u003e"),
            '&' => out.push_str("\\u0026"),
            '\u{2028}' => out.push_str("\\u2028"),
            '\u{2029}' => out.push_str("\\u2029"),
            c => out.push(c),
        }
    }
    out
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn render(b: &Bootstrap) -> String {
    let mut items = String::new();
    for t in &b.history {
        let role = t.role.as_str();
        let icon = match (&t.role, &b.display.icon_url) {
            (TurnRole::Assistant, Some(url)) => {
                format!(r#"<img class="icon" src="{}" alt="">"#, escape_html(url))
            }
            _ => String::new(),
        };
        items.push_str(&format!(
            "      <li class=\"turn {role}\" data-seq=\"{}\">{icon}<span class=\"text\">{}</span></li>\n",
            t.seq,
            escape_html(&t.content)
        ));
    }
    let title = b.display.agent_name.as_deref().unwrap_or("Chat");
    format!(
        r#"<!doctype html>
<html lang="en">
<head>
  <meta charset="utf-8">
  <meta name="viewport" content="width=device-width, initial-scale=1">
  <title>{title}</title>
</head>
<body>
  <main id="chat">
    <ol id="history">
{items}    </ol>
  </main>
  <script id="bootstrap" type="application/json">{json}</script>
  <script src="/static/widget.js" defer></script>
</body>
</html>
"#,
        title = escape_html(title),
        json = script_safe_json(b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json_cannot_close_the_tag() {
        let s = script_safe_json(&serde_json::json!({"t": "</script><b>&\u{2028}"}));
        assert!(!s.contains('<') && !s.contains('>') && !s.contains('&'));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["t"], "</script><b>&\u{2028}");
    }

    #[test]
    fn history_is_escaped() {
        let b = Bootstrap {
            study_id: "s".into(),
            pid: "p".into(),
            cond: "1".into(),
            phase: None,
            display: BootstrapDisplay {
                icon_url: Some("/static/icons/robot.svg".into()),
                agent_name: Some("Alex".into()),
                self_reference_mode: SelfReferenceMode::FirstPerson,
            },
            max_user_message_bytes: 10,
            history: vec![
                BootstrapTurn {
                    seq: 1,
                    role: TurnRole::User,
                    content: "<img src=x onerror=alert(1)>".into(),
                },
                BootstrapTurn {
                    seq: 2,
                    role: TurnRole::Assistant,
                    content: "夕焼け".into(),
                },
            ],
            message_url: "/api/message".into(),
        };
        let html = render(&b);
        assert!(html.contains("&lt;img src=x onerror=alert(1)&gt;"));
        assert!(!html.contains("<img src=x"));
        assert!(html.contains(r#"<img class="icon" src="/static/icons/robot.svg" alt=""><span class="text">夕焼け</span>"#));
        assert!(html.contains("<title>Alex</title>"));
    }
}
