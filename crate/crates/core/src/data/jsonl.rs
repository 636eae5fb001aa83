use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const REQUIRED: [&str; 3] = ["prompt", "chosen", "rejected"];
const OPTIONAL: [&str; 3] = ["reward_chosen", "reward_rejected", "domain_tag"];

/// One `(prompt, chosen, rejected)` preference sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_chosen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_rejected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl PreferenceTriple {
    pub fn new(prompt: impl Into<String>, chosen: impl Into<String>, rejected: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            reward_chosen: None,
            reward_rejected: None,
            domain_tag: None,
        }
    }

    /// `reward_chosen - reward_rejected` when both are annotated.
    pub fn margin(&self) -> Option<f64> {
        Some(self.reward_chosen? - self.reward_rejected?)
    }
}

fn schema(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("line {line}: {msg}"))
}

fn parse_object(obj: Map<String, Value>, line: usize) -> Result<PreferenceTriple> {
    if let Some(k) = obj
        .keys()
        .find(|k| !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str()))
    {
        return Err(schema(line, format!("unexpected key {k:?}")));
    }
    let text = |key: &str| -> Result<String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema(line, format!("{key:?} must be a string"))),
            None => Err(schema(line, format!("missing required key {key:?}"))),
        }
    };
    let number = |key: &str| -> Result<Option<f64>> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => n
                .as_f64()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| schema(line, format!("{key:?} is not a finite number"))),
            Some(_) => Err(schema(line, format!("{key:?} must be a number"))),
        }
    };
    let triple = PreferenceTriple {
        prompt: text("prompt")?,
        chosen: text("chosen")?,
        rejected: text("rejected")?,
        reward_chosen: number("reward_chosen")?,
        reward_rejected: number("reward_rejected")?,
        domain_tag: match obj.get("domain_tag") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(schema(line, "\"domain_tag\" must be a string")),
        },
    };
    if triple.chosen == triple.rejected {
        return Err(schema(line, "chosen and rejected are identical"));
    }
    Ok(triple)
}

/// Parses JSONL text; line numbers in errors are 1-based. Blank lines are skipped.
pub fn parse_preference_jsonl(reader: impl BufRead) -> Result<Vec<PreferenceTriple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(obj) => out.push(parse_object(obj, line_no)?),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_preference_jsonl(path: &Path) -> Result<Vec<PreferenceTriple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_preference_jsonl(BufReader::new(file))
}

pub fn write_preference_jsonl(path: &Path, triples: &[PreferenceTriple]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_is_empty_list() {
        assert!(parse_preference_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn single_line_loads_all_fields() {
        let text = r#"{"prompt":"p","chosen":"good","rejected":"bad","reward_chosen":2.5,"reward_rejected":-1,"domain_tag":"rust"}"#;
        let t = &parse_preference_jsonl(text.as_bytes()).unwrap()[0];
        assert_eq!(t.prompt, "p");
        assert_eq!(t.margin(), Some(3.5));
        assert_eq!(t.domain_tag.as_deref(), Some("rust"));
    }

    #[test]
    fn missing_key_names_the_line() {
        let text = "{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\"}\n{\"prompt\":\"p\",\"chosen\":\"a\"}\n";
        let err = parse_preference_jsonl(text.as_bytes()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("line 2") && msg.contains("rejected")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error_with_line() {
        let err = parse_preference_jsonl("{not json}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = r#"{"prompt":"p","chosen":"a","rejected":"b","score":1}"#;
        assert!(matches!(parse_preference_jsonl(text.as_bytes()), Err(Error::Schema(_))));
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(
            rows in prop::collection::vec(("[a-z ]{0,12}", "[a-z]{1,6}", "[A-Z]{1,6}", prop::option::of(-1e6f64..1e6)), 0..10)
        ) {
            let triples: Vec<PreferenceTriple> = rows
                .into_iter()
                .map(|(p, c, r, reward)| PreferenceTriple {
                    reward_chosen: reward,
                    reward_rejected: reward.map(|x| x / 3.0),
                    ..PreferenceTriple::new(p, c, r)
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            write_preference_jsonl(&path, &triples).unwrap();
            prop_assert_eq!(load_preference_jsonl(&path).unwrap(), triples);
        }
    }
}
