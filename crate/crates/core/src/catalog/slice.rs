//! Sliced-file context: the function plus file-level globals and
//! declarations, with other functions reduced to signatures.

use tree_sitter::Node;

use super::{FunctionSpan, SourceUnit};
use crate::lang::Language;

/// Returns the text placed before and after the function body under the
/// sliced-file strategy. Items keep their original file order; each item
/// is newline-terminated in the prefix and newline-led in the suffix.
pub fn slice_file_context(unit: &SourceUnit, func: &FunctionSpan) -> (String, String) {
    let mut before = Vec::new();
    let mut after = Vec::new();
    let root = unit.tree.root_node();
    collect(unit, root, func, &mut before, &mut after);

    let mut prefix = String::new();
    for item in &before {
        prefix.push_str(item);
        prefix.push('\n');
    }
    let mut suffix = String::new();
    for item in &after {
        suffix.push('\n');
        suffix.push_str(item);
    }
    (prefix, suffix)
}

fn collect(unit: &SourceUnit, container: Node, func: &FunctionSpan, before: &mut Vec<String>, after: &mut Vec<String>) {
    let mut cursor = container.walk();
    let children: Vec<Node> = container.named_children(&mut cursor).collect();
    for child in children {
        let range = child.byte_range();
        if range.start <= func.def_range.start && func.def_range.end <= range.end {
            if range == func.def_range || range == func.outer_node_range {
                continue;
            }
            // the function lives inside this item (class body, #ifdef block)
            if let Some(header) = enclosing_header(unit, child) {
                before.push(header);
            }
            if let Some(body) = item_body(unit.language, child) {
                collect(unit, body, func, before, after);
            }
            continue;
        }
        let rendered = render_item(unit, child);
        if rendered.is_empty() {
            continue;
        }
        if range.end <= func.outer_node_range.start {
            before.extend(rendered);
        } else {
            after.extend(rendered);
        }
    }
}

fn item_body(lang: Language, node: Node) -> Option<Node> {
    match (lang, node.kind()) {
        (Language::Python, "class_definition") => node.child_by_field_name("body"),
        (Language::Python, "decorated_definition") => node.child_by_field_name("definition").and_then(|d| item_body(lang, d)),
        (Language::C, k) if k.starts_with("preproc_if") => Some(node),
        _ => None,
    }
}

fn enclosing_header(unit: &SourceUnit, node: Node) -> Option<String> {
    match (unit.language, node.kind()) {
        (Language::Python, "class_definition") => Some(header_text(unit, node)),
        (Language::Python, "decorated_definition") => {
            node.child_by_field_name("definition").and_then(|d| enclosing_header(unit, d))
        }
        _ => None,
    }
}

/// Source from the start of `node`'s line up to its body, trimmed.
fn header_text(unit: &SourceUnit, node: Node) -> String {
    let text = &*unit.text;
    let start = line_start(text, node.start_byte());
    let end = node
        .child_by_field_name("body")
        .map(|b| b.start_byte())
        .unwrap_or(node.end_byte());
    text[start..end].trim_end().to_string()
}

fn line_start(text: &str, offset: usize) -> usize {
    let start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    if text[start..offset].trim().is_empty() {
        start
    } else {
        offset
    }
}

fn full_text(unit: &SourceUnit, node: Node) -> String {
    let start = line_start(&unit.text, node.start_byte());
    unit.text[start..node.end_byte()].trim_end().to_string()
}

/// Renders one file-level item not containing the function. Returns an
/// empty list for items that are not globals or declarations.
fn render_item(unit: &SourceUnit, node: Node) -> Vec<String> {
    match unit.language {
        Language::Python => render_python(unit, node),
        Language::C => render_c(unit, node),
    }
}

fn render_python(unit: &SourceUnit, node: Node) -> Vec<String> {
    match node.kind() {
        "import_statement" | "import_from_statement" | "future_import_statement" => vec![full_text(unit, node)],
        "expression_statement" => {
            let mut cursor = node.walk();
            let is_assignment = node
                .named_children(&mut cursor)
                .any(|c| matches!(c.kind(), "assignment" | "augmented_assignment"));
            if is_assignment {
                vec![full_text(unit, node)]
            } else {
                Vec::new()
            }
        }
        "function_definition" => vec![format!("{} ...", header_text(unit, node))],
        "decorated_definition" => node
            .child_by_field_name("definition")
            .map(|d| render_python(unit, d))
            .unwrap_or_default(),
        "class_definition" => {
            let mut out = vec![header_text(unit, node)];
            let mut members = Vec::new();
            if let Some(body) = node.child_by_field_name("body") {
                let mut cursor = body.walk();
                for member in body.named_children(&mut cursor) {
                    members.extend(render_python(unit, member));
                }
            }
            if members.is_empty() {
                out[0].push_str(" ...");
            }
            out.extend(members);
            out
        }
        _ => Vec::new(),
    }
}

fn render_c(unit: &SourceUnit, node: Node) -> Vec<String> {
    match node.kind() {
        "preproc_include" | "preproc_def" | "preproc_function_def" | "declaration" | "type_definition"
        | "struct_specifier" | "enum_specifier" | "union_specifier" => vec![full_text(unit, node)],
        "function_definition" => {
            let start = line_start(&unit.text, node.start_byte());
            let end = node
                .child_by_field_name("body")
                .map(|b| b.start_byte())
                .unwrap_or(node.end_byte());
            vec![format!("{};", unit.text[start..end].trim_end())]
        }
        k if k.starts_with("preproc_if") => {
            let mut out = Vec::new();
            let mut cursor = node.walk();
            for child in node.named_children(&mut cursor) {
                if child.kind() == "identifier" || field_is_condition(child) {
                    continue;
                }
                out.extend(render_c(unit, child));
            }
            out
        }
        _ => Vec::new(),
    }
}

fn field_is_condition(node: Node) -> bool {
    matches!(super::classify::field_of(node), Some("condition") | Some("name"))
}
