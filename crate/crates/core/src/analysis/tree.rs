//! Greedy CART regression trees with variance-reduction splits.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
        count: usize,
        share: f64,
    },
    Split {
        feature: usize,
        feature_name: String,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        count: usize,
        share: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn count(&self) -> usize {
        match self {
            Node::Leaf { count, .. } | Node::Split { count, .. } => *count,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<&Node> {
        match self {
            Node::Leaf { .. } => vec![self],
            Node::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    /// Thresholds of every split, in pre-order.
    pub fn thresholds(&self) -> Vec<(usize, f64)> {
        match self {
            Node::Leaf { .. } => vec![],
            Node::Split { feature, threshold, left, right, .. } => {
                let mut v = vec![(*feature, *threshold)];
                v.extend(left.thresholds());
                v.extend(right.thresholds());
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub feature_names: Vec<String>,
    pub max_depth: usize,
    pub n_train: usize,
    pub root: Node,
}

/// Rows of features with one target each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Table {
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if rows.len() != targets.len() {
            return Err(Error::shape(format!("{} rows for {} targets", rows.len(), targets.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != feature_names.len()) {
            return Err(Error::shape(format!("row of {} features, table has {}", r.len(), feature_names.len())));
        }
        Ok(Self { feature_names, rows, targets })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Table {
        Table {
            feature_names: self.feature_names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

fn mean(idx: &[usize], y: &[f64]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

struct Best {
    feature: usize,
    threshold: f64,
    sse: f64,
}

/// Split of `idx` minimizing the summed squared error of both sides.
fn best_split(table: &Table, idx: &[usize]) -> Option<Best> {
    let y = &table.targets;
    let mut best: Option<Best> = None;
    for f in 0..table.feature_names.len() {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| table.rows[a][f].total_cmp(&table.rows[b][f]));
        let total: f64 = order.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
        let n = order.len() as f64;
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            let (i, next) = (order[k], order[k + 1]);
            s += y[i];
            sq += y[i] * y[i];
            let (a, b) = (table.rows[i][f], table.rows[next][f]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = n - nl;
            let sse = (sq - s * s / nl) + ((total_sq - sq) - (total - s).powi(2) / nr);
            if best.as_ref().is_none_or(|b| sse < b.sse) {
                best = Some(Best { feature: f, threshold: a + (b - a) / 2.0, sse });
            }
        }
    }
    best
}

fn grow(table: &Table, idx: Vec<usize>, depth: usize, max_depth: usize, n_train: usize) -> Node {
    let y = &table.targets;
    let value = mean(&idx, y);
    let share = idx.len() as f64 / n_train as f64;
    let pure = idx.iter().all(|&i| y[i] == y[idx[0]]);
    if depth >= max_depth || pure || idx.len() < 2 {
        return Node::Leaf { value, count: idx.len(), share };
    }
    let Some(split) = best_split(table, &idx) else {
        return Node::Leaf { value, count: idx.len(), share };
    };
    let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| table.rows[i][split.feature] <= split.threshold);
    Node::Split {
        feature: split.feature,
        feature_name: table.feature_names[split.feature].clone(),
        threshold: split.threshold,
        count: idx.len(),
        share,
        left: Box::new(grow(table, left, depth + 1, max_depth, n_train)),
        right: Box::new(grow(table, right, depth + 1, max_depth, n_train)),
    }
}

pub fn cart_fit(table: &Table, max_depth: usize) -> Result<RegressionTree> {
    if table.len() < 2 {
        return Err(Error::contract(format!("regression tree needs at least 2 rows, got {}", table.len())));
    }
    let root = grow(table, (0..table.len()).collect(), 0, max_depth, table.len());
    Ok(RegressionTree { feature_names: table.feature_names.clone(), max_depth, n_train: table.len(), root })
}

impl RegressionTree {
    /// Leaf whose region contains `x`.
    pub fn leaf(&self, x: &[f64]) -> &Node {
        let mut node = &self.root;
        while let Node::Split { feature, threshold, left, right, .. } = node {
            node = if x[*feature] <= *threshold { left } else { right };
        }
        node
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.leaf(x) {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn mse(&self, table: &Table) -> f64 {
        table.rows.iter().zip(&table.targets).map(|(x, y)| (self.predict(x) - y).powi(2)).sum::<f64>() / table.len() as f64
    }

    /// `None` when the targets are constant.
    pub fn r2(&self, table: &Table) -> Option<f64> {
        let n = table.len() as f64;
        let m = table.targets.iter().sum::<f64>() / n;
        let ss_tot: f64 = table.targets.iter().map(|y| (y - m).powi(2)).sum();
        (ss_tot > 0.0).then(|| 1.0 - self.mse(table) * n / ss_tot)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_node(&mut out, &self.root, 0);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("tree", e.to_string()))
    }
}

fn write_node(out: &mut String, node: &Node, indent: usize) {
    let pad = "  ".repeat(indent);
    match node {
        Node::Leaf { value, count, share } => {
            let _ = writeln!(out, "{pad}value = {value:.6} (n = {count}, {:.1}%)", share * 100.0);
        }
        Node::Split { feature_name, threshold, left, right, .. } => {
            let _ = writeln!(out, "{pad}{feature_name} <= {threshold}");
            write_node(out, left, indent + 1);
            let _ = writeln!(out, "{pad}{feature_name} > {threshold}");
            write_node(out, right, indent + 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Table {
        let names = (0..rows[0].len()).map(|i| format!("x{i}")).collect();
        Table::new(names, rows, y).unwrap()
    }

    #[test]
    fn constant_target_is_one_leaf() {
        let t = table(vec![vec![1.0], vec![2.0], vec![3.0]], vec![4.0; 3]);
        let tree = cart_fit(&t, 3).unwrap();
        assert_eq!(tree.root, Node::Leaf { value: 4.0, count: 3, share: 1.0 });
        assert_eq!(tree.r2(&t), None);
    }

    #[test]
    fn midpoint_threshold() {
        let t = table(vec![vec![1.0], vec![2.0], vec![4.0], vec![6.0]], vec![0.0, 0.0, 1.0, 1.0]);
        let tree = cart_fit(&t, 1).unwrap();
        assert_eq!(tree.root.thresholds(), vec![(0, 3.0)]);
        assert_eq!(tree.predict(&[2.9]), 0.0);
        assert_eq!(tree.predict(&[3.1]), 1.0);
        assert_eq!(tree.r2(&t), Some(1.0));
    }

    #[test]
    fn needs_two_rows() {
        assert!(cart_fit(&table(vec![vec![1.0]], vec![1.0]), 2).is_err());
    }

    #[test]
    fn exports() {
        let t = table(vec![vec![1.0], vec![2.0]], vec![0.0, 1.0]);
        let tree = cart_fit(&t, 2).unwrap();
        assert_eq!(tree.to_text(), "x0 <= 1.5\n  value = 0.000000 (n = 1, 50.0%)\nx0 > 1.5\n  value = 1.000000 (n = 1, 50.0%)\n");
        let back: RegressionTree = serde_json::from_str(&tree.to_json().unwrap()).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn predictions_are_piecewise_constant_leaf_means() {
        let mut rows = vec![];
        let mut y = vec![];
        for i in 0..6 {
            for j in 0..6 {
                rows.push(vec![i as f64, j as f64]);
                y.push(if i < 3 { 1.0 } else { 2.0 } + if j < 2 { 0.5 } else { 0.0 } + 0.01 * (i * j) as f64);
            }
        }
        let t = table(rows, y);
        let tree = cart_fit(&t, 2).unwrap();
        // Every grid point predicts the mean of the training rows sharing its leaf.
        let leaf_of = |x: &[f64]| tree.leaf(x) as *const Node;
        for gi in 0..=50 {
            for gj in 0..=50 {
                let x = [gi as f64 * 0.1 - 0.1, gj as f64 * 0.1 - 0.1];
                let members: Vec<f64> = t.rows.iter().zip(&t.targets).filter(|(r, _)| leaf_of(r) == leaf_of(&x)).map(|(_, &v)| v).collect();
                let m = members.iter().sum::<f64>() / members.len() as f64;
                assert!((tree.predict(&x) - m).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn invariants(data in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -1.0f64..1.0), 2..60), depth in 1usize..4) {
            let t = table(data.iter().map(|d| vec![d.0, d.1]).collect(), data.iter().map(|d| d.2).collect());
            let tree = cart_fit(&t, depth).unwrap();
            prop_assert!(tree.root.depth() <= depth);
            prop_assert_eq!(tree.root.leaves().iter().map(|l| l.count()).sum::<usize>(), t.len());
            let deeper = cart_fit(&t, depth + 1).unwrap();
            prop_assert!(deeper.mse(&t) <= tree.mse(&t) + 1e-12);
        }
    }
}
