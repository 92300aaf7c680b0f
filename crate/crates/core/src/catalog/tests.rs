use std::path::Path;

use proptest::prelude::*;

use super::*;

const QUOTE_URL: &str = "def quote_url(url_text):
    (scheme, netloc, path, params, query, fragment) = six.moves.urllib.parse.urlparse(url_text)
    # netloc_quoted = quote(netloc)
    path_quoted = quote(path)
    params_quoted = quote(params)
    query_quoted = quote_plus(query)
    fragment_quoted = quote(fragment)
    url_quoted = six.moves.urllib.parse.urlunparse((scheme, netloc, path_quoted, params_quoted, query_quoted, fragment_quoted))
    return url_quoted
";

fn py(text: &str) -> SourceUnit {
    parse_unit(Path::new("fixture.py"), Language::Python, text).unwrap()
}

fn c(text: &str) -> SourceUnit {
    parse_unit(Path::new("fixture.c"), Language::C, text).unwrap()
}

fn tasks(unit: &SourceUnit, strategy: ContextStrategy) -> Vec<InfillingTask> {
    enumerate_tasks(unit, strategy, &TaskLimits::default(), &ApproxTokenCounter).tasks
}

#[test]
fn quote_url_has_one_function() {
    let unit = py(QUOTE_URL);
    assert_eq!(unit.functions.len(), 1);
    assert_eq!(unit.functions[0].name, "quote_url");
    assert_eq!(unit.functions[0].line_range, (1, 9));
}

#[test]
fn empty_file_has_no_functions() {
    let unit = py("");
    assert!(unit.functions.is_empty());
    assert!(tasks(&unit, ContextStrategy::Function).is_empty());
}

#[test]
fn nested_definitions_fold_into_outermost_spans() {
    let text = "\
import os

def outer_a(x):
    def inner(y):
        def innermost(z):
            return z + 1
        return innermost(y) * 2
    return inner(x)

def outer_b(items):
    def key(v):
        return -v
    return sorted(items, key=key)

class Box:
    def size(self):
        def half(n):
            return n // 2
        return half(self.width)

CONST = 3
";
    let unit = py(text);
    // oracle: definitions at column 0 plus methods directly in a class body
    let column_zero = text.lines().filter(|l| l.starts_with("def ")).count();
    let methods = text.lines().filter(|l| l.starts_with("    def ") && l.contains("self")).count();
    assert_eq!(unit.functions.len(), column_zero + methods);
    let names: Vec<_> = unit.functions.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["outer_a", "outer_b", "size"]);
    for pair in unit.functions.windows(2) {
        assert!(pair[0].byte_range.end <= pair[1].byte_range.start);
    }

    let all = tasks(&unit, ContextStrategy::Function);
    let z_use = all.iter().find(|t| t.original == "z").unwrap();
    assert_eq!(z_use.function, "outer_a");
    assert_eq!(z_use.inner_function, "innermost");
    // every token is masked exactly once
    let mut ranges: Vec<_> = all.iter().map(|t| t.mask_byte_range.clone()).collect();
    let before = ranges.len();
    ranges.sort_by_key(|r| r.start);
    ranges.dedup();
    assert_eq!(ranges.len(), before);
}

#[test]
fn broken_function_is_skipped_alone() {
    let unit = py("def good(a):\n    return a + 1\n\ndef bad(a):\n    return a +* )\n");
    assert_eq!(unit.functions.len(), 1);
    assert_eq!(unit.functions[0].name, "good");
    assert_eq!(unit.skipped.len(), 1);
}

#[test]
fn unparseable_file_fails() {
    let err = parse_unit(Path::new("x.py"), Language::Python, ")))(((\n").unwrap_err();
    assert!(matches!(err, CatalogError::WholeFileParseFailure(_)));
}

#[test]
fn unsupported_extension_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.rb");
    std::fs::write(&path, "puts 1").unwrap();
    assert!(matches!(read_unit(&path), Err(CatalogError::UnsupportedLanguage(_))));
    let bad = dir.path().join("b.py");
    std::fs::write(&bad, [0xffu8, 0xfe, 0x00]).unwrap();
    assert!(matches!(read_unit(&bad), Err(CatalogError::UnreadableFile { .. })));
}

#[test]
fn quote_url_call_argument_and_callee() {
    let unit = py(QUOTE_URL);
    let all = tasks(&unit, ContextStrategy::Function);
    let on_line: Vec<_> = all.iter().filter(|t| t.line_no == 5).collect();
    let summary: Vec<_> = on_line.iter().map(|t| (t.original.as_str(), t.kind)).collect();
    // `params_quoted` is a binding and is not masked
    assert_eq!(
        summary,
        [("quote", CodeTokenKind::FunctionCall), ("params", CodeTokenKind::VariableUse)]
    );
    // the comment line yields nothing
    assert!(all.iter().all(|t| t.line_no != 3));
    // dotted callee: object parts are variable uses, the called name is a call
    let line2: Vec<_> = all.iter().filter(|t| t.line_no == 2).map(|t| (t.original.as_str(), t.kind)).collect();
    assert_eq!(
        line2,
        [
            ("six", CodeTokenKind::VariableUse),
            ("moves", CodeTokenKind::VariableUse),
            ("urllib", CodeTokenKind::VariableUse),
            ("parse", CodeTokenKind::VariableUse),
            ("urlparse", CodeTokenKind::FunctionCall),
            ("url_text", CodeTokenKind::VariableUse),
        ]
    );
}

#[test]
fn pass_body_has_nothing_to_mask() {
    let unit = py("def noop():\n    pass\n");
    assert!(tasks(&unit, ContextStrategy::Function).is_empty());
}

#[test]
fn census_matches_python_ast_oracle() {
    // Frozen from a walk of Python's own `ast` module over the same file:
    // Name/Attribute loads split by call position, one operator per
    // BinOp/AugAssign/Compare op/BoolOp junction, int/float/str constants.
    let text = include_str!("../../tests/fixtures/census.py");
    let unit = py(text);
    let all = tasks(&unit, ContextStrategy::Function);
    let count = |k| all.iter().filter(|t| t.kind == k).count();
    assert_eq!(count(CodeTokenKind::VariableUse), 21);
    assert_eq!(count(CodeTokenKind::FunctionCall), 8);
    assert_eq!(count(CodeTokenKind::Operator), 5);
    assert_eq!(count(CodeTokenKind::Literal), 6);
}

#[test]
fn operators_exclude_unary_and_membership() {
    let unit = py("def f(a, b):\n    return -a if a in b and not b else a ** 2 // b\n");
    let ops: Vec<_> = tasks(&unit, ContextStrategy::Function)
        .into_iter()
        .filter(|t| t.kind == CodeTokenKind::Operator)
        .map(|t| t.original)
        .collect();
    assert_eq!(ops, ["and", "**", "//"]);
}

#[test]
fn docstrings_and_fstrings_are_not_literals() {
    let unit = py("def f(a):\n    \"\"\"doc\"\"\"\n    s = f\"{a}!\"\n    return s + 'x'\n");
    let all = tasks(&unit, ContextStrategy::Function);
    let lits: Vec<_> = all.iter().filter(|t| t.kind == CodeTokenKind::Literal).map(|t| t.original.as_str()).collect();
    assert_eq!(lits, ["'x'"]);
    // the interpolated name is still a use
    assert!(all.iter().any(|t| t.original == "a" && t.line_no == 3));
}

const C_FIXTURE: &str = "#include <stdio.h>
#define LIMIT 0x1F
static int counter = 0;
int helper(int a);

int check(int a, char *s) {
  int x = a + LIMIT;
  x += s->len;
  if (x >= 0x1F && a) { return helper(x); }
  printf(\"%d\", -x);
  return x;
}

int helper(int a) {
  return a * 2;
}
";

#[test]
fn c_tokens_by_kind() {
    let unit = c(C_FIXTURE);
    assert_eq!(unit.functions.len(), 2);
    let all = tasks(&unit, ContextStrategy::Function);
    let check: Vec<_> = all
        .iter()
        .filter(|t| t.function == "check")
        .map(|t| (t.original.as_str(), t.kind))
        .collect();
    use CodeTokenKind::*;
    assert_eq!(
        check,
        [
            ("a", VariableUse),
            ("+", Operator),
            ("LIMIT", VariableUse),
            ("x", VariableUse),
            ("+=", Operator),
            ("s", VariableUse),
            ("len", VariableUse),
            ("x", VariableUse),
            (">=", Operator),
            ("0x1F", Literal),
            ("&&", Operator),
            ("a", VariableUse),
            ("helper", FunctionCall),
            ("x", VariableUse),
            ("printf", FunctionCall),
            ("\"%d\"", Literal),
            ("x", VariableUse),
            ("x", VariableUse),
        ]
    );
}

#[test]
fn kind_soundness_on_reparse() {
    for unit in [py(QUOTE_URL), py(include_str!("../../tests/fixtures/census.py")), c(C_FIXTURE)] {
        for task in tasks(&unit, ContextStrategy::Function) {
            let snippet = parse_unit(Path::new("snippet"), unit.language, task.context()).unwrap();
            let start = task.prefix().len();
            let kind = token_kind_at(&snippet, start..start + task.original.len());
            assert_eq!(kind, Some(task.kind), "{task:?}");
        }
    }
}

#[test]
fn reconstruction_for_every_strategy() {
    for unit in [py(QUOTE_URL), c(C_FIXTURE)] {
        for strategy in [ContextStrategy::Function, ContextStrategy::File, ContextStrategy::SlicedFile] {
            for task in tasks(&unit, strategy) {
                let rebuilt = format!("{}{}{}", task.prefix(), task.original, task.suffix());
                assert_eq!(rebuilt, task.context());
                assert_eq!(&unit.text[task.mask_byte_range.clone()], task.original);
            }
        }
    }
    let unit = py(QUOTE_URL);
    let file_task = &tasks(&unit, ContextStrategy::File)[0];
    assert_eq!(file_task.context(), QUOTE_URL);
}

#[test]
fn sliced_context_keeps_globals_and_signatures() {
    let text = "\
import os
G = compute(1)

def f(a):
    return a + G

def g(b, c=2):
    x = b * c
    return x
H = 4
";
    let unit = py(text);
    let f = &unit.functions[0];
    let (pre, post) = slice_file_context(&unit, f);
    // oracle: manual extraction
    assert_eq!(pre, "import os\nG = compute(1)\n");
    assert_eq!(post, "\ndef g(b, c=2): ...\nH = 4");
    assert!(!post.contains("x = b * c"));
}

#[test]
fn sliced_context_empty_for_lone_function() {
    let unit = py("def only(a):\n    return a\n");
    let (pre, post) = slice_file_context(&unit, &unit.functions[0]);
    assert!(pre.is_empty() && post.is_empty());
}

#[test]
fn sliced_context_for_c() {
    let unit = c(C_FIXTURE);
    let check = &unit.functions[0];
    let (pre, post) = slice_file_context(&unit, check);
    assert_eq!(
        pre,
        "#include <stdio.h>\n#define LIMIT 0x1F\nstatic int counter = 0;\nint helper(int a);\n"
    );
    assert_eq!(post, "\nint helper(int a);");
}

#[test]
fn sliced_context_for_method() {
    let text = "\
class A:
    scale = 2

    def first(self):
        return 1

    def second(self, v):
        return v * self.scale
";
    let unit = py(text);
    let second = unit.functions.iter().find(|f| f.name == "second").unwrap();
    let (pre, post) = slice_file_context(&unit, second);
    assert_eq!(pre, "class A:\n    scale = 2\n    def first(self): ...\n");
    assert_eq!(post, "");
}

#[test]
fn long_contexts_are_dropped_and_counted() {
    let unit = py(QUOTE_URL);
    let limits = TaskLimits { max_context_tokens: 10, ..TaskLimits::default() };
    let set = enumerate_tasks(&unit, ContextStrategy::Function, &limits, &ApproxTokenCounter);
    assert!(set.tasks.is_empty());
    assert_eq!(set.dropped_too_long, tasks(&unit, ContextStrategy::Function).len());
}

#[test]
fn similarity_gate_keeps_only_cloned_functions() {
    let text = "\
int sum_a(int *v, int n) {
  int s = 0;
  for (int i = 0; i < n; i++) { s += v[i]; }
  return s;
}

int sum_b(int *w, int m) {
  int t = 0;
  for (int j = 0; j < m; j++) { t += w[j]; }
  return t;
}

void log_it(const char *msg) {
  puts(msg);
}
";
    let unit = c(text);
    let limits = TaskLimits { similarity_gate: Some(0.8), ..TaskLimits::default() };
    let set = enumerate_tasks(&unit, ContextStrategy::Function, &limits, &ApproxTokenCounter);
    let fns: std::collections::BTreeSet<_> = set.tasks.iter().map(|t| t.function.as_str()).collect();
    assert_eq!(fns.into_iter().collect::<Vec<_>>(), ["sum_a", "sum_b"]);
    assert_eq!(set.gated_out, 2);
}

#[test]
fn task_ids_are_deterministic() {
    let a: Vec<_> = tasks(&py(QUOTE_URL), ContextStrategy::Function).into_iter().map(|t| t.task_id).collect();
    let b: Vec<_> = tasks(&py(QUOTE_URL), ContextStrategy::Function).into_iter().map(|t| t.task_id).collect();
    assert_eq!(a, b);
    let unique: std::collections::HashSet<_> = a.iter().collect();
    assert_eq!(unique.len(), a.len());
}

#[test]
fn coverage_of_known_variable_uses() {
    // `x` is used four times, `y` twice
    let unit = py("def f(x, y):\n    z = x + y\n    return x * y - x / x\n");
    let uses = tasks(&unit, ContextStrategy::Function)
        .into_iter()
        .filter(|t| t.kind == CodeTokenKind::VariableUse)
        .count();
    assert!(uses >= 6);
}

fn statement() -> impl Strategy<Value = String> {
    let names = prop::sample::select(vec!["a", "b", "total", "count", "idx"]);
    let ops = prop::sample::select(vec!["+", "-", "*", ">=", "<", "==", "and", "or"]);
    let lits = prop::sample::select(vec!["1", "42", "'s'", "3.5"]);
    (names.clone(), names.clone(), ops, lits, prop::bool::ANY).prop_map(|(lhs, rhs, op, lit, call)| {
        if call {
            format!("{lhs} = helper({rhs}) {op} {lit}")
        } else {
            format!("{lhs} = {rhs} {op} {lit}")
        }
    })
}

proptest! {
    #[test]
    fn reconstruction_and_determinism(body in prop::collection::vec(statement(), 1..8)) {
        let mut text = String::from("def gen(a, b, total, count, idx):\n");
        for stmt in &body {
            text.push_str("    ");
            text.push_str(stmt);
            text.push('\n');
        }
        let unit = py(&text);
        let first = tasks(&unit, ContextStrategy::Function);
        for task in &first {
            prop_assert_eq!(format!("{}{}{}", task.prefix(), task.original, task.suffix()), task.context());
        }
        let again: Vec<_> = tasks(&py(&text), ContextStrategy::Function).into_iter().map(|t| t.task_id).collect();
        prop_assert_eq!(first.iter().map(|t| t.task_id.clone()).collect::<Vec<_>>(), again);
        // each statement has one use, one operator, one literal, maybe one call
        prop_assert!(first.iter().filter(|t| t.kind == CodeTokenKind::VariableUse).count() >= body.len());
    }
}
