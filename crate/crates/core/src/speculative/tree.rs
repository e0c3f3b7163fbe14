//! Candidate trees: topology, parsing and the draft stub.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mask;

pub const DEFAULT_MAX_DEPTH: usize = 8;

/// Parent links of a candidate tree without tokens. `None` marks a child of
/// the (already committed) root. Parents always precede their children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeShape {
    parents: Vec<Option<usize>>,
}

impl TreeShape {
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::Structure("tree has no nodes".into()));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= i {
                    return Err(Error::Structure(format!(
                        "node {i} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        Ok(Self { parents })
    }

    /// Level-ordered tree where every node at depth `d` has `fan_out[d]`
    /// children (`fan_out[0]` children of the root).
    pub fn fan_out(fan_out: &[usize]) -> Result<Self> {
        if fan_out.is_empty() || fan_out.contains(&0) {
            return Err(Error::Config(format!(
                "fan-out must be a nonempty list of positive counts, got {fan_out:?}"
            )));
        }
        let mut parents: Vec<Option<usize>> = vec![None; fan_out[0]];
        let mut level = 0..fan_out[0];
        for &f in &fan_out[1..] {
            let start = parents.len();
            for p in level.clone() {
                parents.extend(std::iter::repeat_n(Some(p), f));
            }
            level = start..parents.len();
        }
        Self::new(parents)
    }

    /// A single chain of `len` nodes.
    pub fn chain(len: usize) -> Result<Self> {
        Self::fan_out(&vec![1; len])
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }
}

/// Parses a tree topology.
///
/// ```text
/// shape   := fan_out | parents
/// fan_out := INT ("," INT)*                 e.g. "4,2,2"
/// parents := "parents" ":" PARENT ("," PARENT)*
/// PARENT  := "-1" | INT                     -1 is the root
/// ```
///
/// Whitespace anywhere is ignored.
impl FromStr for TreeShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = |what: &str| Error::Structure(format!("cannot parse tree `{s}`: {what}"));
        if let Some(list) = compact.strip_prefix("parents:") {
            let parents = list
                .split(',')
                .map(|tok| match tok {
                    "-1" => Ok(None),
                    _ => tok
                        .parse::<usize>()
                        .map(Some)
                        .map_err(|_| bad(&format!("bad parent `{tok}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Self::new(parents)
        } else {
            let fan = compact
                .split(',')
                .map(|tok| {
                    tok.parse::<usize>()
                        .map_err(|_| bad(&format!("bad count `{tok}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Self::fan_out(&fan)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub token: u32,
}

/// Candidate tokens arranged as a tree, topologically ordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecTree {
    nodes: Vec<TreeNode>,
    depths: Vec<usize>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl SpecTree {
    /// Builds a tree; depth is capped at [`DEFAULT_MAX_DEPTH`].
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        Self::with_max_depth(nodes, DEFAULT_MAX_DEPTH)
    }

    pub fn with_max_depth(nodes: Vec<TreeNode>, max_depth: usize) -> Result<Self> {
        TreeShape::new(nodes.iter().map(|n| n.parent).collect())?;
        let mut depths = Vec::with_capacity(nodes.len());
        let mut children = vec![Vec::new(); nodes.len()];
        let mut roots = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            match n.parent {
                None => {
                    depths.push(1);
                    roots.push(i);
                }
                Some(p) => {
                    depths.push(depths[p] + 1);
                    children[p].push(i);
                }
            }
        }
        let deepest = depths.iter().copied().max().unwrap_or(0);
        if deepest > max_depth {
            return Err(Error::Config(format!(
                "tree depth {deepest} exceeds the maximum of {max_depth}"
            )));
        }
        Ok(Self {
            nodes,
            depths,
            children,
            roots,
        })
    }

    pub fn from_shape(shape: &TreeShape, tokens: &[u32]) -> Result<Self> {
        if tokens.len() != shape.len() {
            return Err(Error::Structure(format!(
                "{} tokens for {} nodes",
                tokens.len(),
                shape.len()
            )));
        }
        let nodes = shape
            .parents()
            .iter()
            .zip(tokens)
            .map(|(&parent, &token)| TreeNode { parent, token })
            .collect();
        Self::with_max_depth(nodes, usize::MAX)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn token(&self, i: usize) -> u32 {
        self.nodes[i].token
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    /// 1 for children of the root.
    pub fn depth(&self, i: usize) -> usize {
        self.depths[i]
    }

    pub fn max_depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn root_children(&self) -> &[usize] {
        &self.roots
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.children[i].is_empty())
            .collect()
    }

    /// Node indices from the root's child down to `i`, inclusive.
    pub fn path(&self, i: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.depths[i]);
        let mut cur = Some(i);
        while let Some(c) = cur {
            path.push(c);
            cur = self.nodes[c].parent;
        }
        path.reverse();
        path
    }

    pub fn shape(&self) -> TreeShape {
        TreeShape {
            parents: self.nodes.iter().map(|n| n.parent).collect(),
        }
    }
}

/// `mask[i][j]` is true iff `j == i` or `j` is an ancestor of `i`.
pub fn tree_mask(tree: &SpecTree) -> Mask {
    let m = tree.len();
    let mut mask = Mask::filled(&[m, m], false);
    for i in 0..m {
        for j in tree.path(i) {
            mask.set(i, j, true);
        }
    }
    mask
}

/// Source of candidate trees.
pub trait Drafter {
    /// Proposes a tree of the given shape continuing `context`.
    /// `next_token` is the verifier's prediction for the first position.
    fn propose(&mut self, context: &[u32], next_token: u32, shape: &TreeShape) -> Result<SpecTree>;
}

/// Deterministic stub drafter: tokens come from a seeded stream.
#[derive(Debug, Clone)]
pub struct RandomDrafter {
    rng: ChaCha8Rng,
    vocab: u32,
}

impl RandomDrafter {
    pub fn new(seed: u64, vocab: u32) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            vocab,
        }
    }
}

impl Drafter for RandomDrafter {
    fn propose(&mut self, _context: &[u32], _next: u32, shape: &TreeShape) -> Result<SpecTree> {
        let tokens: Vec<u32> = (0..shape.len())
            .map(|_| self.rng.gen_range(0..self.vocab))
            .collect();
        SpecTree::from_shape(shape, &tokens)
    }
}

/// Tree shaped by `fan_out` whose tokens come from a seeded stream.
pub fn draft_stub(fan_out: &[usize], seed: u64, vocab: u32) -> Result<SpecTree> {
    let shape = TreeShape::fan_out(fan_out)?;
    RandomDrafter::new(seed, vocab).propose(&[], 0, &shape)
}
