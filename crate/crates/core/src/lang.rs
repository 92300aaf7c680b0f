//! Language front end: grammars, operator tables and lexeme acceptors.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex_automata::dfa::{dense, Automaton, StartKind};
use regex_automata::util::start;
use regex_automata::util::primitives::StateID;
use regex_automata::{Anchored, MatchKind};
use serde::{Deserialize, Serialize};
use tree_sitter::{Parser, Tree};

/// Source languages with a bundled grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    C,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::Python, Language::C];

    pub fn from_extension(path: &Path) -> Option<Language> {
        match path.extension()?.to_str()? {
            "py" => Some(Language::Python),
            "c" | "h" => Some(Language::C),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<Language> {
        match name.to_ascii_lowercase().as_str() {
            "python" | "py" => Some(Language::Python),
            "c" => Some(Language::C),
            _ => None,
        }
    }

    /// Display name used in prompts ("You're a Python expert").
    pub fn display_name(self) -> &'static str {
        match self {
            Language::Python => "Python",
            Language::C => "C",
        }
    }

    pub fn grammar(self) -> tree_sitter::Language {
        match self {
            Language::Python => tree_sitter_python::LANGUAGE.into(),
            Language::C => tree_sitter_c::LANGUAGE.into(),
        }
    }

    /// Parses `text` with a fresh parser. Returns `None` only if the parser
    /// gives up entirely (it is error-tolerant otherwise).
    pub fn parse(self, text: &str) -> Option<Tree> {
        let mut parser = Parser::new();
        parser.set_language(&self.grammar()).ok()?;
        parser.parse(text, None)
    }

    /// Binary/boolean/augmented operators that may be masked, grouped by
    /// interchangeability. Unary operators and punctuation are not listed.
    pub fn operator_groups(self) -> &'static [&'static [&'static str]] {
        match self {
            Language::Python => PY_OPERATOR_GROUPS,
            Language::C => C_OPERATOR_GROUPS,
        }
    }

    pub fn is_maskable_operator(self, op: &str) -> bool {
        self.operator_group(op).is_some()
    }

    pub fn operator_group(self, op: &str) -> Option<&'static [&'static str]> {
        self.operator_groups()
            .iter()
            .copied()
            .find(|group| group.contains(&op))
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

const PY_OPERATOR_GROUPS: &[&[&str]] = &[
    &["<", "<=", "==", "!=", ">=", ">"],
    &["+", "-", "*", "/", "//", "%", "**", "@"],
    &["<<", ">>", "&", "|", "^"],
    &["and", "or"],
    &[
        "+=", "-=", "*=", "/=", "//=", "%=", "**=", "@=", "<<=", ">>=", "&=", "|=", "^=",
    ],
];

const C_OPERATOR_GROUPS: &[&[&str]] = &[
    &["<", "<=", "==", "!=", ">=", ">"],
    &["+", "-", "*", "/", "%"],
    &["<<", ">>", "&", "|", "^"],
    &["&&", "||"],
    &["+=", "-=", "*=", "/=", "%=", "<<=", ">>=", "&=", "|=", "^="],
];

/// Lexical classes a masked token can belong to, as far as the lexeme
/// grammar is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LexemeClass {
    Identifier,
    Operator,
    Number,
    String,
}

struct LexemeDfa {
    dfa: dense::DFA<Vec<u32>>,
    start: StateID,
    /// States from which some continuation reaches an accepting end of input.
    live: HashSet<StateID>,
}

impl LexemeDfa {
    fn new(pattern: &str) -> LexemeDfa {
        let dfa = dense::Builder::new()
            .configure(
                dense::Config::new()
                    .start_kind(StartKind::Anchored)
                    .match_kind(MatchKind::All),
            )
            .build(pattern)
            .expect("lexeme pattern compiles");
        let start = dfa
            .start_state(&start::Config::new().anchored(Anchored::Yes))
            .expect("anchored start state");

        // Explore the reachable graph once, then propagate liveness backwards.
        let mut edges: HashMap<StateID, Vec<StateID>> = HashMap::new();
        let mut queue = vec![start];
        while let Some(state) = queue.pop() {
            if edges.contains_key(&state) {
                continue;
            }
            let mut next: Vec<StateID> = (0..=255u8)
                .map(|b| dfa.next_state(state, b))
                .filter(|&s| !dfa.is_dead_state(s) && !dfa.is_quit_state(s))
                .collect();
            next.sort_unstable();
            next.dedup();
            queue.extend(next.iter().copied().filter(|s| !edges.contains_key(s)));
            edges.insert(state, next);
        }
        let mut live: HashSet<StateID> = edges
            .keys()
            .copied()
            .filter(|&s| dfa.is_match_state(dfa.next_eoi_state(s)))
            .collect();
        loop {
            let before = live.len();
            for (state, next) in &edges {
                if !live.contains(state) && next.iter().any(|s| live.contains(s)) {
                    live.insert(*state);
                }
            }
            if live.len() == before {
                break;
            }
        }
        LexemeDfa { dfa, start, live }
    }

    fn run(&self, text: &str) -> Option<StateID> {
        let mut state = self.start;
        for &b in text.as_bytes() {
            state = self.dfa.next_state(state, b);
            if !self.live.contains(&state) {
                return None;
            }
        }
        Some(state)
    }

    /// True if some continuation of `text` is a complete lexeme.
    fn viable_prefix(&self, text: &str) -> bool {
        self.run(text).is_some()
    }

    /// True if `text` is itself a complete lexeme.
    fn full_match(&self, text: &str) -> bool {
        self.run(text)
            .is_some_and(|state| self.dfa.is_match_state(self.dfa.next_eoi_state(state)))
    }
}

const IDENT: &str = r"[_\p{L}][_\p{L}\p{N}]*";

const PY_NUMBER: &str = concat!(
    r"(?:",
    r"(?:[1-9](?:_?[0-9])*|0+(?:_?0)*)[jJ]?",
    r"|0[xX](?:_?[0-9a-fA-F])+|0[oO](?:_?[0-7])+|0[bB](?:_?[01])+",
    r"|(?:(?:[0-9](?:_?[0-9])*)?\.[0-9](?:_?[0-9])*|[0-9](?:_?[0-9])*\.)(?:[eE][+-]?[0-9](?:_?[0-9])*)?[jJ]?",
    r"|[0-9](?:_?[0-9])*[eE][+-]?[0-9](?:_?[0-9])*[jJ]?",
    r")"
);

const PY_STRING: &str = concat!(
    r"(?:[rRuUbBfF]|[rR][bBfF]|[bBfF][rR])?",
    r#"(?:'(?:[^'\\\n]|\\(?s:.))*'|"(?:[^"\\\n]|\\(?s:.))*""#,
    r#"|'''(?s:.)*'''|"""(?s:.)*""")"#
);

const C_NUMBER: &str = concat!(
    r"(?:",
    r"(?:0[xX][0-9a-fA-F](?:'?[0-9a-fA-F])*|0[bB][01](?:'?[01])*|[0-9](?:'?[0-9])*)",
    r"(?:[uU](?:ll|LL|l|L)?|(?:ll|LL|l|L)[uU]?)?",
    r"|(?:[0-9]+\.[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?[fFlL]?",
    r"|[0-9]+[eE][+-]?[0-9]+[fFlL]?",
    r"|0[xX][0-9a-fA-F]*\.?[0-9a-fA-F]*[pP][+-]?[0-9]+[fFlL]?",
    r")"
);

const C_STRING: &str = r#"(?:L|u8|u|U)?"(?:[^"\\\n]|\\(?s:.))*""#;

fn operator_pattern(lang: Language) -> String {
    let mut ops: Vec<&str> = lang.operator_groups().iter().flat_map(|g| g.iter().copied()).collect();
    ops.sort_by_key(|op| std::cmp::Reverse(op.len()));
    let alts: Vec<String> = ops.iter().map(|op| regex::escape(op)).collect();
    format!("(?:{})", alts.join("|"))
}

fn lexeme_dfa(lang: Language, class: LexemeClass) -> &'static LexemeDfa {
    static TABLE: OnceLock<Vec<((Language, LexemeClass), LexemeDfa)>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut out = Vec::new();
        for lang in Language::ALL {
            let (number, string) = match lang {
                Language::Python => (PY_NUMBER, PY_STRING),
                Language::C => (C_NUMBER, C_STRING),
            };
            out.push(((lang, LexemeClass::Identifier), LexemeDfa::new(IDENT)));
            out.push(((lang, LexemeClass::Number), LexemeDfa::new(number)));
            out.push(((lang, LexemeClass::String), LexemeDfa::new(string)));
            out.push(((lang, LexemeClass::Operator), LexemeDfa::new(&operator_pattern(lang))));
        }
        out
    });
    table
        .iter()
        .find(|(key, _)| *key == (lang, class))
        .map(|(_, dfa)| dfa)
        .expect("every language has every lexeme class")
}

/// True if `text` can be extended into a complete lexeme of `class`.
/// The empty string is never viable: a generation step must make progress.
pub fn is_viable_prefix(lang: Language, class: LexemeClass, text: &str) -> bool {
    !text.is_empty() && lexeme_dfa(lang, class).viable_prefix(text)
}

/// True if `text` is exactly one complete lexeme of `class`.
pub fn is_complete_lexeme(lang: Language, class: LexemeClass, text: &str) -> bool {
    !text.is_empty() && lexeme_dfa(lang, class).full_match(text)
}

/// Reserved words that look like identifiers but cannot name a variable.
pub fn is_keyword(lang: Language, word: &str) -> bool {
    const PY: &[&str] = &[
        "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
        "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
        "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
        "try", "while", "with", "yield",
    ];
    const C: &[&str] = &[
        "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
        "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
        "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch",
        "typedef", "union", "unsigned", "void", "volatile", "while",
    ];
    match lang {
        Language::Python => PY.contains(&word),
        Language::C => C.contains(&word),
    }
}

/// Byte offsets of line starts, for offset/line conversion.
#[derive(Debug, Clone)]
pub struct LineIndex {
    starts: Vec<usize>,
    len: usize,
}

impl LineIndex {
    pub fn new(text: &str) -> LineIndex {
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        LineIndex { starts, len: text.len() }
    }

    /// 1-based line containing `offset`.
    pub fn line_of(&self, offset: usize) -> usize {
        match self.starts.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }

    pub fn line_start(&self, line: usize) -> usize {
        self.starts[line - 1]
    }

    pub fn line_count(&self) -> usize {
        if self.len == 0 {
            0
        } else if *self.starts.last().unwrap() == self.len {
            self.starts.len() - 1
        } else {
            self.starts.len()
        }
    }
}
