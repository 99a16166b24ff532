use serde_json::Value;

use crate::error::ParseError;
use crate::trajectory::Action;

pub const TOOL_OPEN: &str = "<tool>";
pub const TOOL_CLOSE: &str = "</tool>";

/// Splits assistant output into a thought and at most one action.
///
/// Output without a `<tool>` block is terminal; its whole text is the
/// thought. A block must hold a JSON object `{"name": .., "arguments": {..}}`.
/// More than one block is rejected.
pub fn parse_action(text: &str) -> Result<(String, Action), ParseError> {
    let Some(open) = text.find(TOOL_OPEN) else {
        return Ok((text.trim().to_string(), Action::terminal(text)));
    };
    let body_start = open + TOOL_OPEN.len();
    let close = text[body_start..]
        .find(TOOL_CLOSE)
        .map(|i| body_start + i)
        .ok_or_else(|| ParseError::MalformedToolCall("missing </tool>".into()))?;
    let end = close + TOOL_CLOSE.len();
    if text[end..].contains(TOOL_OPEN) {
        return Err(ParseError::MalformedToolCall("only one tool call per turn".into()));
    }

    let body: Value = serde_json::from_str(text[body_start..close].trim())
        .map_err(|e| ParseError::MalformedToolCall(format!("invalid JSON: {e}")))?;
    let obj = body
        .as_object()
        .ok_or_else(|| ParseError::MalformedToolCall("tool call must be an object".into()))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| ParseError::MalformedToolCall("missing tool name".into()))?;
    let arguments = match obj.get("arguments") {
        None | Some(Value::Null) => Value::Object(Default::default()),
        Some(v @ Value::Object(_)) => v.clone(),
        Some(_) => return Err(ParseError::MalformedToolCall("arguments must be an object".into())),
    };

    let thought = text[..open].trim().to_string();
    Ok((thought, Action::tool_call(name, arguments, &text[open..end])))
}

/// Pulls an explicit answer out of model text: the remainder of the line
/// after the last `Final answer:` marker, or the last `\boxed{..}`.
pub fn extract_answer(text: &str) -> Option<String> {
    let lower = text.to_ascii_lowercase();
    let marker = "final answer:";
    if let Some(pos) = lower.rfind(marker) {
        let rest = text[pos + marker.len()..].lines().next().unwrap_or_default().trim();
        let rest = rest.trim_matches('*').trim();
        if !rest.is_empty() {
            return Some(rest.to_string());
        }
    }
    if let Some(pos) = text.rfind("\\boxed{") {
        let start = pos + "\\boxed{".len();
        let mut depth = 1usize;
        for (i, c) in text[start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let inner = text[start..start + i].trim();
                        return (!inner.is_empty()).then(|| inner.to_string());
                    }
                }
                _ => {}
            }
        }
    }
    None
}
