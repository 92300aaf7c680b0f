//! Which leaves of a function body are maskable, and as what kind.

use std::ops::Range;

use tree_sitter::Node;

use super::CodeTokenKind;
use crate::lang::Language;

/// One maskable occurrence inside a function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MaskSite {
    pub range: Range<usize>,
    pub kind: CodeTokenKind,
    pub inner_function: String,
}

pub(crate) fn field_of<'t>(node: Node<'t>) -> Option<&'t str> {
    let parent = node.parent()?;
    let mut cursor = parent.walk();
    if !cursor.goto_first_child() {
        return None;
    }
    loop {
        if cursor.node().id() == node.id() {
            return cursor.field_name();
        }
        if !cursor.goto_next_sibling() {
            return None;
        }
    }
}

fn has_ancestor(node: Node, kinds: &[&str], stop_at: &[&str]) -> bool {
    let mut cur = node.parent();
    while let Some(n) = cur {
        if kinds.contains(&n.kind()) {
            return true;
        }
        if stop_at.contains(&n.kind()) {
            return false;
        }
        cur = n.parent();
    }
    false
}

pub(crate) fn is_function_node(lang: Language, node: Node) -> bool {
    match lang {
        Language::Python => node.kind() == "function_definition",
        Language::C => node.kind() == "function_definition",
    }
}

/// Name of a function definition node.
pub(crate) fn function_name(lang: Language, node: Node, text: &str) -> String {
    let name_node = match lang {
        Language::Python => node.child_by_field_name("name"),
        Language::C => {
            let mut cur = node.child_by_field_name("declarator");
            while let Some(n) = cur {
                if n.kind() == "identifier" || n.kind() == "field_identifier" {
                    break;
                }
                cur = n
                    .child_by_field_name("declarator")
                    .or_else(|| n.named_child(0).filter(|c| c.kind() != "parameter_list"));
            }
            cur
        }
    };
    name_node
        .map(|n| text[n.byte_range()].to_string())
        .unwrap_or_else(|| "<anonymous>".to_string())
}

/// Collects every maskable site below `func` in byte order.
pub(crate) fn mask_sites(lang: Language, func: Node, text: &str) -> Vec<MaskSite> {
    let mut out = Vec::new();
    let mut names = Vec::new();
    walk(lang, func, text, &mut names, &mut out);
    out
}

fn walk(lang: Language, node: Node, text: &str, names: &mut Vec<String>, out: &mut Vec<MaskSite>) {
    if node.is_error() || node.is_missing() {
        return;
    }
    let entered = is_function_node(lang, node);
    if entered {
        names.push(function_name(lang, node, text));
    }

    let mut descend = true;
    if let Some(kind) = classify(lang, node, text) {
        out.push(MaskSite {
            range: node.byte_range(),
            kind,
            inner_function: names.last().cloned().unwrap_or_default(),
        });
        descend = false;
    } else if is_opaque(lang, node) {
        descend = false;
    }

    if descend {
        let mut cursor = node.walk();
        for child in node.children(&mut cursor) {
            walk(lang, child, text, names, out);
        }
    }
    if entered {
        names.pop();
    }
}

/// Nodes whose interior is never masked on its own.
fn is_opaque(lang: Language, node: Node) -> bool {
    match lang {
        // f-strings still expose their interpolated expressions
        Language::Python => node.kind() == "string" && !has_interpolation(node),
        Language::C => matches!(
            node.kind(),
            "string_literal" | "char_literal" | "preproc_include" | "preproc_def" | "preproc_function_def"
        ),
    }
}

fn has_interpolation(node: Node) -> bool {
    let mut cursor = node.walk();
    let found = node.children(&mut cursor).any(|c| c.kind() == "interpolation");
    found
}

/// Kind of `node` if it is itself a maskable token.
pub(crate) fn classify(lang: Language, node: Node, text: &str) -> Option<CodeTokenKind> {
    match lang {
        Language::Python => classify_python(node, text),
        Language::C => classify_c(node, text),
    }
}

fn operator_kind(lang: Language, node: Node, text: &str, parents: &[&str]) -> Option<CodeTokenKind> {
    if node.is_named() {
        return None;
    }
    let parent = node.parent()?;
    if !parents.contains(&parent.kind()) {
        return None;
    }
    let op = &text[node.byte_range()];
    lang.is_maskable_operator(op).then_some(CodeTokenKind::Operator)
}

fn classify_python(node: Node, text: &str) -> Option<CodeTokenKind> {
    if !node.is_named() {
        return operator_kind(
            Language::Python,
            node,
            text,
            &["binary_operator", "comparison_operator", "boolean_operator", "augmented_assignment"],
        );
    }
    match node.kind() {
        "integer" | "float" => Some(CodeTokenKind::Literal),
        "string" => {
            let parent = node.parent()?;
            // bare string statements are docstrings
            if parent.kind() == "expression_statement" || has_interpolation(node) {
                None
            } else {
                Some(CodeTokenKind::Literal)
            }
        }
        "identifier" => python_identifier(node),
        _ => None,
    }
}

const PY_SKIP_ANCESTORS: &[&str] = &[
    "import_statement",
    "import_from_statement",
    "future_import_statement",
    "global_statement",
    "nonlocal_statement",
    "decorator",
    "type",
    "lambda_parameters",
    "case_pattern",
];

fn python_identifier(node: Node) -> Option<CodeTokenKind> {
    let parent = node.parent()?;
    if has_ancestor(node, PY_SKIP_ANCESTORS, &["block", "function_definition", "call"]) {
        return None;
    }
    let field = field_of(node);
    match (parent.kind(), field) {
        ("function_definition" | "class_definition", Some("name")) => None,
        ("parameters" | "lambda_parameters", _) => None,
        ("default_parameter" | "typed_default_parameter", Some("name")) => None,
        ("typed_parameter", f) if f != Some("type") => None,
        ("list_splat_pattern" | "dictionary_splat_pattern", _)
            if parent
                .parent()
                .is_some_and(|g| matches!(g.kind(), "parameters" | "lambda_parameters" | "typed_parameter")) =>
        {
            None
        }
        ("keyword_argument", Some("name")) => None,
        ("attribute", Some("attribute")) => {
            if is_python_binding(parent) {
                None
            } else if is_callee(parent) {
                Some(CodeTokenKind::FunctionCall)
            } else {
                Some(CodeTokenKind::VariableUse)
            }
        }
        ("call", Some("function")) => Some(CodeTokenKind::FunctionCall),
        _ => {
            if is_python_binding(node) {
                None
            } else {
                Some(CodeTokenKind::VariableUse)
            }
        }
    }
}

fn is_callee(node: Node) -> bool {
    node.parent().is_some_and(|p| {
        matches!(p.kind(), "call" | "call_expression") && field_of(node) == Some("function")
    })
}

/// True if `node` sits in a binding position (assignment target, loop
/// variable, `as` alias, walrus name).
fn is_python_binding(node: Node) -> bool {
    let mut cur = node;
    loop {
        let Some(parent) = cur.parent() else { return false };
        let field = field_of(cur);
        match parent.kind() {
            "pattern_list" | "tuple_pattern" | "list_pattern" | "list_splat_pattern" => cur = parent,
            "assignment" | "augmented_assignment" | "for_statement" | "for_in_clause" => {
                return field == Some("left");
            }
            "as_pattern_target" => return true,
            "named_expression" => return field == Some("name"),
            _ => return false,
        }
    }
}

fn classify_c(node: Node, text: &str) -> Option<CodeTokenKind> {
    if !node.is_named() {
        let kind = operator_kind(Language::C, node, text, &["binary_expression", "assignment_expression"])?;
        return (&text[node.byte_range()] != "=").then_some(kind);
    }
    match node.kind() {
        "number_literal" => Some(CodeTokenKind::Literal),
        "string_literal" => {
            let inside_include = node.parent().is_some_and(|p| p.kind() == "preproc_include");
            (!inside_include).then_some(CodeTokenKind::Literal)
        }
        "identifier" => c_identifier(node),
        "field_identifier" => {
            let parent = node.parent()?;
            if parent.kind() != "field_expression" || field_of(node) != Some("field") {
                return None;
            }
            if is_callee(parent) {
                Some(CodeTokenKind::FunctionCall)
            } else {
                Some(CodeTokenKind::VariableUse)
            }
        }
        _ => None,
    }
}

fn c_identifier(node: Node) -> Option<CodeTokenKind> {
    let parent = node.parent()?;
    if parent.kind().starts_with("preproc_") {
        return None;
    }
    let field = field_of(node);
    if field == Some("declarator") {
        return None;
    }
    match (parent.kind(), field) {
        ("call_expression", Some("function")) => Some(CodeTokenKind::FunctionCall),
        ("enumerator", Some("name")) => None,
        ("parenthesized_declarator", _) => None,
        _ => Some(CodeTokenKind::VariableUse),
    }
}
