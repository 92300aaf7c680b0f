//! Property schemas for structured chat replies of the form
//! `{"bugs": [{...}, ...]}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// A field a finding may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    CodeLine,
    Explanation,
    FixedLine,
    TokenLevel,
    Category,
    Priority,
}

impl Property {
    pub fn key(self) -> &'static str {
        match self {
            Property::CodeLine => "code_line",
            Property::Explanation => "explanation",
            Property::FixedLine => "fixed_line",
            Property::TokenLevel => "token_level",
            Property::Category => "category",
            Property::Priority => "priority",
        }
    }

    pub fn is_mandatory(self) -> bool {
        matches!(self, Property::CodeLine | Property::Explanation)
    }

    fn json_type(self) -> Value {
        match self {
            Property::TokenLevel => json!({"type": "boolean"}),
            Property::Priority => json!({"type": "string", "enum": ["High", "Medium", "Low"]}),
            _ => json!({"type": "string"}),
        }
    }

    /// Coerces a reply value into this property's type.
    fn coerce(self, value: &Value) -> Result<Value, String> {
        match (self, value) {
            (Property::TokenLevel, Value::Bool(_)) => Ok(value.clone()),
            (Property::TokenLevel, Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
                "true" | "yes" => Ok(Value::Bool(true)),
                "false" | "no" => Ok(Value::Bool(false)),
                _ => Err(format!("token_level is not a boolean: {s:?}")),
            },
            (Property::Priority, Value::String(s)) => {
                let norm = match s.trim().to_ascii_lowercase().as_str() {
                    "high" => "High",
                    "medium" => "Medium",
                    "low" => "Low",
                    _ => return Err(format!("unknown priority {s:?}")),
                };
                Ok(Value::String(norm.to_string()))
            }
            (Property::TokenLevel | Property::Priority, other) => {
                Err(format!("{} has the wrong type: {other}", self.key()))
            }
            (_, Value::String(_)) => Ok(value.clone()),
            (_, Value::Number(_)) => Ok(Value::String(value.to_string())),
            (_, other) => Err(format!("{} is not a string: {other}", self.key())),
        }
    }
}

/// The properties requested in one round. Every listed property must be
/// present on each finding; unlisted ones are stripped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySchema {
    pub properties: Vec<Property>,
}

impl PropertySchema {
    pub fn new(properties: impl IntoIterator<Item = Property>) -> PropertySchema {
        let mut properties: Vec<Property> = properties.into_iter().collect();
        for p in [Property::Explanation, Property::CodeLine] {
            if !properties.contains(&p) {
                properties.insert(0, p);
            }
        }
        properties.sort();
        properties.dedup();
        PropertySchema { properties }
    }

    pub fn mandatory() -> PropertySchema {
        PropertySchema::new([])
    }

    pub fn contains(&self, p: Property) -> bool {
        self.properties.contains(&p)
    }

    /// JSON Schema for `response_format`.
    pub fn json_schema(&self) -> Value {
        let mut props = Map::new();
        for p in &self.properties {
            props.insert(p.key().to_string(), p.json_type());
        }
        let required: Vec<&str> = self.properties.iter().map(|p| p.key()).collect();
        json!({
            "type": "object",
            "properties": {
                "bugs": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": props,
                        "required": required,
                        "additionalProperties": false,
                    }
                }
            },
            "required": ["bugs"],
            "additionalProperties": false,
        })
    }

    /// Parses and validates raw reply text. Tolerates a fenced code block
    /// around the JSON and a bare top-level array.
    pub fn validate_text(&self, text: &str) -> Result<Value, String> {
        let body = strip_fence(text);
        let value: Value = serde_json::from_str(body).map_err(|e| format!("not JSON: {e}"))?;
        self.validate(&value)
    }

    /// Returns the normalized reply `{"bugs": [...]}`.
    pub fn validate(&self, value: &Value) -> Result<Value, String> {
        let items = match value {
            Value::Array(items) => items,
            Value::Object(map) => match map.get("bugs") {
                Some(Value::Array(items)) => items,
                None => return Err("missing \"bugs\" array".to_string()),
                _ => return Err("\"bugs\" is not an array".to_string()),
            },
            _ => return Err("reply is not an object".to_string()),
        };
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let Value::Object(fields) = item else {
                return Err(format!("bug {i} is not an object"));
            };
            let mut kept = Map::new();
            for p in &self.properties {
                match fields.get(p.key()) {
                    None | Some(Value::Null) => return Err(format!("bug {i} lacks {}", p.key())),
                    Some(v) => {
                        kept.insert(p.key().to_string(), p.coerce(v).map_err(|e| format!("bug {i}: {e}"))?);
                    }
                }
            }
            out.push(Value::Object(kept));
        }
        Ok(json!({ "bugs": out }))
    }
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}
