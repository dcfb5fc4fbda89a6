use serde::{Deserialize, Serialize};

/// Node of a least-squares regression tree stored in a flat arena; the
/// root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Feature columns the tree may split on.
    pub features: Vec<usize>,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Nodes with fewer samples are not split.
    pub min_split: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 2,
            min_split: 10,
            min_leaf: 1,
        }
    }
}

impl Tree {
    /// Goes left when `x[feature] <= threshold`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Column-major feature matrix with per-column sort orders, shared by all
/// candidate trees of a boosting run.
pub struct SortedColumns<'a> {
    pub columns: &'a [Vec<f64>],
    order: Vec<Vec<usize>>,
}

impl<'a> SortedColumns<'a> {
    pub fn new(columns: &'a [Vec<f64>]) -> Self {
        let order = columns
            .iter()
            .map(|c| {
                let mut o: Vec<usize> = (0..c.len()).collect();
                o.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
                o
            })
            .collect();
        Self { columns, order }
    }

    fn n(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Greedy least-squares regression tree on the listed features. Returns the
/// tree and its residual sum of squares.
pub fn fit_tree(cols: &SortedColumns<'_>, targets: &[f64], features: &[usize], params: &TreeParams) -> (Tree, f64) {
    let n = cols.n();
    let mut member = vec![true; n];
    let mut nodes = Vec::new();
    let mut sse = 0.0;
    grow(cols, targets, features, params, &mut member, 0, &mut nodes, &mut sse);
    (
        Tree {
            features: features.to_vec(),
            nodes,
        },
        sse,
    )
}

#[allow(clippy::too_many_arguments)]
fn grow(
    cols: &SortedColumns<'_>,
    targets: &[f64],
    features: &[usize],
    params: &TreeParams,
    member: &mut [bool],
    depth: usize,
    nodes: &mut Vec<Node>,
    sse: &mut f64,
) -> usize {
    let idx: Vec<usize> = (0..member.len()).filter(|&i| member[i]).collect();
    let count = idx.len() as f64;
    let sum: f64 = idx.iter().map(|&i| targets[i]).sum();
    let mean = if idx.is_empty() { 0.0 } else { sum / count };
    let here = nodes.len();
    nodes.push(Node::Leaf { value: mean });

    let best = if depth < params.max_depth && idx.len() >= params.min_split {
        best_split(cols, targets, features, params, member, sum, idx.len())
    } else {
        None
    };
    let Some(split) = best else {
        *sse += idx.iter().map(|&i| (targets[i] - mean).powi(2)).sum::<f64>();
        return here;
    };

    let col = &cols.columns[split.feature];
    let saved: Vec<usize> = idx.clone();
    for &i in &saved {
        member[i] = col[i] <= split.threshold;
    }
    let left = grow(cols, targets, features, params, member, depth + 1, nodes, sse);
    for &i in &saved {
        member[i] = col[i] > split.threshold;
    }
    let right = grow(cols, targets, features, params, member, depth + 1, nodes, sse);
    for &i in &saved {
        member[i] = true;
    }
    nodes[here] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    here
}

/// Maximizes the SSE reduction `S_L^2/n_L + S_R^2/n_R - S^2/n`.
fn best_split(
    cols: &SortedColumns<'_>,
    targets: &[f64],
    features: &[usize],
    params: &TreeParams,
    member: &[bool],
    total: f64,
    count: usize,
) -> Option<BestSplit> {
    let base = total * total / count as f64;
    let mut best: Option<BestSplit> = None;
    let min_leaf = params.min_leaf.max(1);
    for &f in features {
        let col = &cols.columns[f];
        let mut left_sum = 0.0;
        let mut left_n = 0usize;
        let mut prev: Option<usize> = None;
        for &i in cols.order[f].iter().filter(|&&i| member[i]) {
            if let Some(p) = prev {
                // split between p and i when the values differ
                if col[i] > col[p] && left_n >= min_leaf && count - left_n >= min_leaf {
                    let right_sum = total - left_sum;
                    let gain =
                        left_sum * left_sum / left_n as f64 + right_sum * right_sum / (count - left_n) as f64 - base;
                    if gain > best.as_ref().map_or(1e-12 * base.abs().max(1e-300), |b| b.gain) {
                        best = Some(BestSplit {
                            feature: f,
                            threshold: 0.5 * (col[p] + col[i]),
                            gain,
                        });
                    }
                }
            }
            left_sum += targets[i];
            left_n += 1;
            prev = Some(i);
        }
    }
    best
}
