//! Deterministic synthetic Python repositories with optional planted
//! single-token bugs, for end-to-end runs without real code.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "alpha", "beta", "count", "delta", "entry", "factor", "group", "index", "items", "key", "limit", "mode",
    "name", "offset", "path", "query", "rate", "size", "start", "stop", "total", "value", "weight", "width",
];
const HELPERS: &[&str] = &["normalize", "encode", "merge", "clamp", "resolve", "render"];
const VERBS: &[&str] = &["compute", "build", "load", "merge", "scale", "parse", "format", "collect"];

/// A token that can be swapped for another in-scope name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plant {
    /// 1-based file line.
    pub line_no: usize,
    /// Byte offsets in the file.
    pub range: Range<usize>,
    pub original: String,
    pub substitute: String,
    /// The line as it reads once planted, without indentation.
    pub planted_line: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureFunction {
    pub file: PathBuf,
    pub name: String,
    pub first_line: usize,
    pub plant: Plant,
    pub planted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureRepo {
    pub files: Vec<(PathBuf, String)>,
    pub functions: Vec<FixtureFunction>,
}

/// Lines of a function; `plant` names (line index, text before the token,
/// token, substitute, text after).
struct Shape {
    lines: Vec<String>,
    plant: (usize, String, String, String, String),
}

fn shape(rng: &mut ChaCha8Rng, name: &str) -> Shape {
    let mut pool: Vec<&str> = NAMES.to_vec();
    pool.shuffle(rng);
    let v = |i: usize| pool[i].to_string();
    let helper = HELPERS.choose(rng).unwrap();
    let lit = rng.random_range(2..100);
    match rng.random_range(0..4) {
        0 => {
            let (a, b, c, x, y) = (v(0), v(1), v(2), v(3), v(4));
            Shape {
                lines: vec![
                    format!("def {name}({a}, {b}, {c}):"),
                    format!("    {x} = {a} + {b}"),
                    String::new(),
                    format!("    if {y} > {lit}:"),
                    format!("        {y} = {y} - {a}"),
                    format!("    return {helper}({x}, {y})"),
                ],
                plant: (2, format!("    {y} = {x} * "), c, b, String::new()),
            }
        }
        1 => {
            let (items, limit, total, item) = (v(0), v(1), v(2), v(3));
            Shape {
                lines: vec![
                    format!("def {name}({items}, {limit}):"),
                    format!("    {total} = 0"),
                    format!("    for {item} in {items}:"),
                    format!("        if {item} < {limit}:"),
                    String::new(),
                    format!("    return {total}"),
                ],
                plant: (4, format!("            {total} += "), item, limit, String::new()),
            }
        }
        2 => {
            let (config, key, default, value, result) = (v(0), v(1), v(2), v(3), v(4));
            Shape {
                lines: vec![
                    format!("def {name}({config}, {key}, {default}):"),
                    format!("    {value} = {config}.get({key}, {default})"),
                    String::new(),
                    format!("    return {result} or {default}"),
                ],
                plant: (2, format!("    {result} = {helper}("), value, key, ")".into()),
            }
        }
        _ => {
            let (text, sep, parts, count, head) = (v(0), v(1), v(2), v(3), v(4));
            Shape {
                lines: vec![
                    format!("def {name}({text}, {sep}):"),
                    format!("    {parts} = {text}.split({sep})"),
                    String::new(),
                    format!("    {head} = {parts}[0] if {count} else ''"),
                    format!("    return {sep}.join([{head}, str({count})])"),
                ],
                plant: (2, format!("    {count} = len("), parts, text, ")".into()),
            }
        }
    }
}

/// `n_functions` functions spread over files of `per_file` each.
pub fn python_repo(n_functions: usize, per_file: usize, seed: u64) -> FixtureRepo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut repo = FixtureRepo::default();
    let per_file = per_file.max(1);
    for (file_index, chunk_start) in (0..n_functions).step_by(per_file).enumerate() {
        let path = PathBuf::from(format!("pkg/mod_{file_index:03}.py"));
        let mut text = String::from("import os\n");
        let mut line = 2;
        for i in chunk_start..(chunk_start + per_file).min(n_functions) {
            text.push_str("\n\n");
            line += 2;
            let name = format!("{}_{i:04}", VERBS.choose(&mut rng).unwrap());
            let mut s = shape(&mut rng, &name);
            let (at, before, token, substitute, after) = s.plant.clone();
            s.lines[at] = format!("{before}{token}{after}");
            let first_line = line;
            for (j, l) in s.lines.iter().enumerate() {
                if j == at {
                    let start = text.len() + before.len();
                    let plant = Plant {
                        line_no: line,
                        range: start..start + token.len(),
                        planted_line: format!("{before}{substitute}{after}").trim().to_string(),
                        original: token.clone(),
                        substitute: substitute.clone(),
                    };
                    repo.functions.push(FixtureFunction {
                        file: path.clone(),
                        name: name.clone(),
                        first_line,
                        plant,
                        planted: false,
                    });
                }
                text.push_str(l);
                text.push('\n');
                line += 1;
            }
        }
        repo.files.push((path, text));
    }
    repo
}

impl FixtureRepo {
    /// Applies the plants of the given functions.
    pub fn plant(&mut self, indices: &[usize]) {
        let mut chosen: Vec<usize> = indices.to_vec();
        chosen.sort_unstable();
        chosen.dedup();
        // right to left so earlier offsets stay valid
        for &i in chosen.iter().rev() {
            let f = &mut self.functions[i];
            f.planted = true;
            let (_, text) = self.files.iter_mut().find(|(p, _)| *p == f.file).expect("file of function");
            text.replace_range(f.plant.range.clone(), &f.plant.substitute);
        }
        for &i in &chosen {
            let f = self.functions[i].clone();
            let delta = f.plant.substitute.len() as isize - f.plant.original.len() as isize;
            for g in self.functions.iter_mut().filter(|g| g.file == f.file && g.plant.range.start > f.plant.range.start) {
                g.plant.range = (g.plant.range.start as isize + delta) as usize..(g.plant.range.end as isize + delta) as usize;
            }
            let own = &mut self.functions[i].plant;
            own.range = own.range.start..own.range.start + own.substitute.len();
        }
    }

    pub fn planted(&self) -> impl Iterator<Item = &FixtureFunction> {
        self.functions.iter().filter(|f| f.planted)
    }

    pub fn write(&self, root: &Path) -> std::io::Result<()> {
        for (path, text) in &self.files {
            let full = root.join(path);
            fs::create_dir_all(full.parent().unwrap_or(root))?;
            fs::write(full, text)?;
        }
        Ok(())
    }
}
