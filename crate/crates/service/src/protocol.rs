//! Wire messages: one JSON document per WebSocket text frame.
//!
//! ```json
//! {"type": "command", "seq": 3, "body": {"cmd": "step"}}
//! ```

use rnnscope_core::cells::CellKind;
use rnnscope_core::data::Task;
use rnnscope_core::trainer::{ArchEdit, HyperParam, NetworkConfig, Phase};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::snapshot::Snapshot;

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Command,
    Snapshot,
    Error,
    Hello,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    pub body: Value,
}

/// Which part of the network the client is looking at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum View {
    #[default]
    Overview,
    Cell { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Play,
    Pause,
    Step,
    JumpPhase { phase: Phase },
    Reset,
    SetParam { name: HyperParam, value: f64 },
    EditArch { action: ArchAction },
    SelectTask { task: Task },
    SetView { view: View },
    SetPace { rate: f64 },
}

/// Architecture edits a client may request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ArchAction {
    AddLayer {
        #[serde(default)]
        at: Option<usize>,
    },
    RemoveLayer {
        #[serde(default)]
        at: Option<usize>,
    },
    SetCell { cell: CellKind },
}

impl ArchAction {
    /// Resolves default positions: layers are added on top and removed from the top.
    pub fn resolve(self, layer_count: usize) -> ArchEdit {
        match self {
            ArchAction::AddLayer { at } => ArchEdit::AddLayer {
                at: at.unwrap_or(layer_count),
            },
            ArchAction::RemoveLayer { at } => ArchEdit::RemoveLayer {
                at: at.unwrap_or(layer_count.saturating_sub(1)),
            },
            ArchAction::SetCell { cell } => ArchEdit::SetCellKind { cell },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: String,
    pub default_config: NetworkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
    /// Sequence number of the offending command, when it could be read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
}

/// Parses one inbound message into its sequence number and command.
///
/// On failure, returns the sequence number if it could be recovered and a
/// description naming what did not parse.
pub fn parse_command(text: &str) -> Result<(u64, Command), (Option<u64>, String)> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| (None, format!("malformed envelope: {e}")))?;
    if env.kind != MessageType::Command {
        return Err((Some(env.seq), format!("expected a command message, got {:?}", env.kind)));
    }
    let cmd = serde_json::from_value(env.body).map_err(|e| (Some(env.seq), format!("malformed command: {e}")))?;
    Ok((env.seq, cmd))
}

/// Numbers outbound messages on one connection.
#[derive(Debug, Default)]
pub struct Outbox {
    next_seq: u64,
}

impl Outbox {
    fn wrap(&mut self, kind: MessageType, body: Value) -> Envelope {
        let env = Envelope {
            kind,
            seq: self.next_seq,
            body,
        };
        self.next_seq += 1;
        env
    }

    pub fn hello(&mut self, default_config: &NetworkConfig) -> Envelope {
        let hello = Hello {
            protocol_version: PROTOCOL_VERSION.to_string(),
            default_config: default_config.clone(),
        };
        self.wrap(MessageType::Hello, serde_json::to_value(hello).expect("hello serializes"))
    }

    pub fn snapshot(&mut self, snapshot: &Snapshot) -> Envelope {
        self.wrap(
            MessageType::Snapshot,
            serde_json::to_value(snapshot).expect("snapshot serializes"),
        )
    }

    pub fn error(&mut self, message: impl Into<String>, in_reply_to: Option<u64>) -> Envelope {
        let body = ErrorBody {
            message: message.into(),
            in_reply_to,
        };
        self.wrap(MessageType::Error, serde_json::to_value(body).expect("error serializes"))
    }
}

/// Builds a command envelope; convenient for clients and tests.
pub fn command_envelope(seq: u64, cmd: &Command) -> Envelope {
    Envelope {
        kind: MessageType::Command,
        seq,
        body: serde_json::to_value(cmd).expect("command serializes"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_use_snake_case_tags() {
        let cases = [
            (r#"{"cmd":"step"}"#, Command::Step),
            (r#"{"cmd":"jump_phase","phase":"training"}"#, Command::JumpPhase { phase: Phase::Training }),
            (
                r#"{"cmd":"set_param","name":"learning_rate","value":0.001}"#,
                Command::SetParam { name: HyperParam::LearningRate, value: 0.001 },
            ),
            (
                r#"{"cmd":"set_view","view":{"mode":"cell","layer":1}}"#,
                Command::SetView { view: View::Cell { layer: 1 } },
            ),
            (
                r#"{"cmd":"edit_arch","action":{"action":"add_layer"}}"#,
                Command::EditArch { action: ArchAction::AddLayer { at: None } },
            ),
            (r#"{"cmd":"select_task","task":"lorem"}"#, Command::SelectTask { task: Task::Lorem }),
            (r#"{"cmd":"set_pace","rate":4.5}"#, Command::SetPace { rate: 4.5 }),
        ];
        for (json, expected) in cases {
            let parsed: Command = serde_json::from_str(json).unwrap();
            assert_eq!(parsed, expected);
            let back: Command = serde_json::from_value(serde_json::to_value(&parsed).unwrap()).unwrap();
            assert_eq!(back, expected);
        }
    }

    #[test]
    fn parse_failures_name_the_problem() {
        let (seq, msg) = parse_command("not json").unwrap_err();
        assert_eq!(seq, None);
        assert!(msg.contains("malformed envelope"));

        let (seq, msg) = parse_command(r#"{"type":"command","seq":4,"body":{"cmd":"fly"}}"#).unwrap_err();
        assert_eq!(seq, Some(4));
        assert!(msg.contains("fly"), "{msg}");

        let (_, msg) = parse_command(r#"{"type":"hello","seq":0,"body":{}}"#).unwrap_err();
        assert!(msg.contains("expected a command"));

        let ok = serde_json::to_string(&command_envelope(9, &Command::Reset)).unwrap();
        assert_eq!(parse_command(&ok).unwrap(), (9, Command::Reset));
    }

    #[test]
    fn outbox_numbers_strictly_increase() {
        let mut out = Outbox::default();
        let a = out.hello(&NetworkConfig::default());
        let b = out.error("x", None);
        assert_eq!(a.seq, 0);
        assert_eq!(b.seq, 1);
        assert_eq!(a.kind, MessageType::Hello);
        assert_eq!(a.body["protocol_version"], "1");
    }

    #[test]
    fn default_arch_positions() {
        assert_eq!(ArchAction::AddLayer { at: None }.resolve(3), ArchEdit::AddLayer { at: 3 });
        assert_eq!(ArchAction::RemoveLayer { at: None }.resolve(3), ArchEdit::RemoveLayer { at: 2 });
    }
}
