//! Bracketed constituency trees and the sentence structure graph derived from
//! them.
//!
//! Trees arrive in a sidecar file, one Penn-style bracketing per line, aligned
//! by order with the emphasis file. Removing the word leaves from a tree
//! leaves the structure graph: its nodes are constituent/POS tags, its edges
//! the parent-child links, and each word stays aligned to its preterminal.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A constituent: either a phrase with children or a preterminal wrapping a
/// single word. This shape makes "every word's parent is a preterminal" hold
/// by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constituent {
    Phrase {
        tag: String,
        children: Vec<Constituent>,
    },
    Preterminal {
        tag: String,
        word: String,
    },
}

impl Constituent {
    pub fn tag(&self) -> &str {
        match self {
            Constituent::Phrase { tag, .. } => tag,
            Constituent::Preterminal { tag, .. } => tag,
        }
    }
}

/// A parsed constituency tree with at least one word leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub root: Constituent,
}

impl ParseTree {
    /// Word leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        fn walk<'a>(node: &'a Constituent, out: &mut Vec<&'a str>) {
            match node {
                Constituent::Preterminal { word, .. } => out.push(word),
                Constituent::Phrase { children, .. } => {
                    for c in children {
                        walk(c, out);
                    }
                }
            }
        }
        walk(&self.root, &mut out);
        out
    }

    /// Canonical single-space bracketing.
    pub fn serialize(&self) -> String {
        fn render(node: &Constituent, out: &mut String) {
            match node {
                Constituent::Preterminal { tag, word } => {
                    out.push('(');
                    out.push_str(tag);
                    out.push(' ');
                    out.push_str(word);
                    out.push(')');
                }
                Constituent::Phrase { tag, children } => {
                    out.push('(');
                    out.push_str(tag);
                    for c in children {
                        out.push(' ');
                        render(c, out);
                    }
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        render(&self.root, &mut s);
        s
    }
}

// ── s-expression reader ─────────────────────────────────────────────

#[derive(Debug)]
enum RawNode {
    Word(String),
    List { tag: String, children: Vec<RawNode> },
}

struct Reader<'a> {
    text: &'a str,
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Reader<'a> {
        Reader {
            text,
            chars: text.char_indices().peekable(),
        }
    }

    fn err(&mut self, message: impl Into<String>) -> Error {
        let offset = self.chars.peek().map(|(i, _)| *i).unwrap_or(self.text.len());
        Error::TreeSyntax {
            offset,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn atom(&mut self) -> String {
        let start = self.chars.peek().map(|(i, _)| *i).unwrap_or(self.text.len());
        let mut end = start;
        while let Some(&(i, c)) = self.chars.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            end = i + c.len_utf8();
            self.chars.next();
        }
        self.text[start..end].to_string()
    }

    fn node(&mut self) -> Result<RawNode> {
        self.skip_ws();
        match self.chars.peek().copied() {
            Some((_, '(')) => {
                self.chars.next();
                self.skip_ws();
                if matches!(self.chars.peek(), Some((_, '(' | ')')) | None) {
                    return Err(self.err("expected a tag after '('"));
                }
                let tag = self.atom();
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.chars.peek().copied() {
                        Some((_, ')')) => {
                            self.chars.next();
                            break;
                        }
                        Some(_) => children.push(self.node()?),
                        None => return Err(self.err("unbalanced parentheses: missing ')'")),
                    }
                }
                if children.is_empty() {
                    return Err(self.err(format!("node {tag:?} has no children")));
                }
                Ok(RawNode::List { tag, children })
            }
            Some((_, ')')) => Err(self.err("unbalanced parentheses: unexpected ')'")),
            Some(_) => Ok(RawNode::Word(self.atom())),
            None => Err(self.err("empty input")),
        }
    }
}

fn shape_node(raw: RawNode, offset_hint: usize) -> Result<Constituent> {
    match raw {
        RawNode::Word(w) => Err(Error::TreeSyntax {
            offset: offset_hint,
            message: format!("word {w:?} is not wrapped in a preterminal tag"),
        }),
        RawNode::List { tag, children } => {
            if children.len() == 1 {
                if let RawNode::Word(word) = &children[0] {
                    return Ok(Constituent::Preterminal {
                        tag,
                        word: word.clone(),
                    });
                }
            }
            let shaped: Result<Vec<Constituent>> = children
                .into_iter()
                .map(|c| shape_node(c, offset_hint))
                .collect();
            Ok(Constituent::Phrase {
                tag,
                children: shaped?,
            })
        }
    }
}

/// Parse one bracketed tree, e.g. `(S (NP (PRP I)) (VP (VBP love) ...))`.
/// Whitespace-insensitive. Rejects naked words, empty nodes, and words not
/// wrapped in a preterminal.
pub fn parse_sexpr(text: &str) -> Result<ParseTree> {
    let mut reader = Reader::new(text);
    reader.skip_ws();
    if reader.chars.peek().is_none() {
        return Err(Error::TreeSyntax {
            offset: 0,
            message: "empty input".into(),
        });
    }
    let raw = reader.node()?;
    reader.skip_ws();
    if let Some(&(i, c)) = reader.chars.peek() {
        return Err(Error::TreeSyntax {
            offset: i,
            message: format!("trailing content starting with {c:?}"),
        });
    }
    if matches!(raw, RawNode::Word(_)) {
        return Err(Error::TreeSyntax {
            offset: 0,
            message: "naked word at top level".into(),
        });
    }
    let root = shape_node(raw, 0)?;
    Ok(ParseTree { root })
}

/// Read a tree file: one tree per line, blank lines ignored. Line k (after
/// ignoring blanks) pairs with record k of the emphasis file.
pub fn load_trees(text: &str) -> Result<Vec<ParseTree>> {
    let mut trees = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let tree = parse_sexpr(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        trees.push(tree);
    }
    Ok(trees)
}

// ── tag vocabulary ──────────────────────────────────────────────────

/// Id 0 is the reserved unknown-tag row for tags unseen in training trees.
pub const UNK_TAG_ID: usize = 0;

/// Bijective tag symbol <-> dense id map.
#[derive(Debug, Clone)]
pub struct TagVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocab {
    /// Collect every tag from the given trees, in first-appearance order.
    pub fn build<'a>(trees: impl IntoIterator<Item = &'a ParseTree>) -> TagVocab {
        let mut vocab = TagVocab {
            names: vec![String::new()],
            index: HashMap::new(),
        };
        for tree in trees {
            fn walk(node: &Constituent, vocab: &mut TagVocab) {
                if !vocab.index.contains_key(node.tag()) {
                    vocab.index.insert(node.tag().to_string(), vocab.names.len());
                    vocab.names.push(node.tag().to_string());
                }
                if let Constituent::Phrase { children, .. } = node {
                    for c in children {
                        walk(c, vocab);
                    }
                }
            }
            walk(&tree.root, &mut vocab);
        }
        vocab
    }

    pub fn from_names(names: Vec<String>) -> Result<TagVocab> {
        if names.first().map(String::as_str) != Some("") {
            return Err(Error::contract("tag vocabulary must reserve id 0"));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate().skip(1) {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate tag {n:?}")));
            }
        }
        Ok(TagVocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, tag: &str) -> usize {
        self.index.get(tag).copied().unwrap_or(UNK_TAG_ID)
    }
}

// ── structure graph ─────────────────────────────────────────────────

/// The parse tree minus its word leaves: tag nodes, undirected tree edges,
/// per-node neighbor sets (with self-loops), and the word -> preterminal
/// alignment.
#[derive(Debug, Clone)]
pub struct StructureGraph {
    /// Tag-vocabulary id per node, in preorder.
    pub node_tags: Vec<usize>,
    /// Undirected tree edges (parent, child), without self-loops.
    pub edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists including the node itself.
    pub neighbors: Vec<Vec<usize>>,
    /// For word position i, the node index of its preterminal.
    pub word_alignment: Vec<usize>,
}

impl StructureGraph {
    pub fn node_count(&self) -> usize {
        self.node_tags.len()
    }
}

/// Build the structure graph: every tag node becomes a graph node; parent-child
/// links become undirected edges; every node gets a self-loop in its neighbor
/// set; word i aligns to its preterminal node.
pub fn build_ssg(tree: &ParseTree, tags: &TagVocab) -> StructureGraph {
    let mut node_tags = Vec::new();
    let mut edges = Vec::new();
    let mut word_alignment = Vec::new();

    fn walk(
        node: &Constituent,
        parent: Option<usize>,
        tags: &TagVocab,
        node_tags: &mut Vec<usize>,
        edges: &mut Vec<(usize, usize)>,
        word_alignment: &mut Vec<usize>,
    ) {
        let idx = node_tags.len();
        node_tags.push(tags.id(node.tag()));
        if let Some(p) = parent {
            edges.push((p, idx));
        }
        match node {
            Constituent::Preterminal { .. } => word_alignment.push(idx),
            Constituent::Phrase { children, .. } => {
                for c in children {
                    walk(c, Some(idx), tags, node_tags, edges, word_alignment);
                }
            }
        }
    }
    walk(
        &tree.root,
        None,
        tags,
        &mut node_tags,
        &mut edges,
        &mut word_alignment,
    );

    let mut neighbors: Vec<Vec<usize>> = (0..node_tags.len()).map(|i| vec![i]).collect();
    for &(a, b) in &edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    for n in neighbors.iter_mut() {
        n.sort_unstable();
    }

    StructureGraph {
        node_tags,
        edges,
        neighbors,
        word_alignment,
    }
}

/// POS tag of each word's preterminal, in word order.
pub fn derive_pos_tags(tree: &ParseTree) -> Vec<String> {
    let mut out = Vec::new();
    fn walk(node: &Constituent, out: &mut Vec<String>) {
        match node {
            Constituent::Preterminal { tag, .. } => out.push(tag.clone()),
            Constituent::Phrase { children, .. } => {
                for c in children {
                    walk(c, out);
                }
            }
        }
    }
    walk(&tree.root, &mut out);
    out
}

/// Outcome of comparing a tree's leaves against a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentReport {
    pub ok: bool,
    /// (position, tree leaf if any, token if any) for each divergence.
    pub mismatches: Vec<(usize, Option<String>, Option<String>)>,
}

/// Check that leaf words equal the tokens elementwise, comparing
/// case-insensitively (the same policy as embedding lookup). Never fails;
/// divergences are listed in the report.
pub fn validate_alignment(tree: &ParseTree, tokens: &[String]) -> AlignmentReport {
    let leaves = tree.leaves();
    let mut mismatches = Vec::new();
    let len = leaves.len().max(tokens.len());
    for i in 0..len {
        let leaf = leaves.get(i).map(|s| s.to_string());
        let token = tokens.get(i).cloned();
        let matches = match (&leaf, &token) {
            (Some(l), Some(t)) => l == t || l.to_lowercase() == t.to_lowercase(),
            _ => false,
        };
        if !matches {
            mismatches.push((i, leaf, token));
        }
    }
    AlignmentReport {
        ok: mismatches.is_empty(),
        mismatches,
    }
}
