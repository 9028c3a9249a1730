//! Gradient boosting with shallow regression trees (depth 1 or 2).
//!
//! Continuous targets use squared loss. Probability targets are boosted on the
//! log-odds scale with Newton leaf values and mapped back through the logistic
//! link.

use super::glm::{expit, logit};
use super::{Design, Target};

#[derive(Debug, Clone, PartialEq)]
enum Tree {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Tree::Leaf(v) => *v,
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.eval(x)
                } else {
                    right.eval(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostModel {
    target: Target,
    base: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

// Newton leaves on the logit scale need a floor on the hessian sum and a cap.
const HESS_REG: f64 = 1.0;
const MAX_LOGIT_STEP: f64 = 4.0;

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Grower<'a> {
    design: &'a Design,
    order: Vec<Vec<usize>>,
    min_leaf: usize,
    reg: f64,
}

impl Grower<'_> {
    fn leaf_value(&self, g: &[f64], h: &[f64], member: &[bool]) -> f64 {
        let (mut gs, mut hs) = (0.0, 0.0);
        for i in 0..g.len() {
            if member[i] {
                gs += g[i];
                hs += h[i];
            }
        }
        gs / (hs + self.reg)
    }

    /// Best split of the rows flagged in `member`, scanning every feature in
    /// sorted order and cutting at midpoints between distinct values.
    fn best_split(&self, g: &[f64], h: &[f64], member: &[bool]) -> Option<Split> {
        let (mut gt, mut ht, mut nt) = (0.0, 0.0, 0usize);
        for i in 0..g.len() {
            if member[i] {
                gt += g[i];
                ht += h[i];
                nt += 1;
            }
        }
        if nt < 2 * self.min_leaf {
            return None;
        }
        let parent = gt * gt / (ht + self.reg);
        let mut best: Option<Split> = None;
        for (f, order) in self.order.iter().enumerate() {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            let mut prev: Option<(usize, f64)> = None;
            for &i in order {
                if !member[i] {
                    continue;
                }
                let v = self.design.get(i, f);
                if let Some((_, pv)) = prev {
                    if v > pv && nl >= self.min_leaf && nt - nl >= self.min_leaf {
                        let gr = gt - gl;
                        let hr = ht - hl;
                        let gain = gl * gl / (hl + self.reg) + gr * gr / (hr + self.reg) - parent;
                        if best.as_ref().is_none_or(|b| gain > b.gain) {
                            best = Some(Split {
                                feature: f,
                                threshold: 0.5 * (pv + v),
                                gain,
                            });
                        }
                    }
                }
                gl += g[i];
                hl += h[i];
                nl += 1;
                prev = Some((i, v));
            }
        }
        best.filter(|b| b.gain > 1e-12)
    }

    fn grow(&self, g: &[f64], h: &[f64], member: &[bool], depth: usize) -> Tree {
        if depth == 0 {
            return Tree::Leaf(self.leaf_value(g, h, member));
        }
        match self.best_split(g, h, member) {
            None => Tree::Leaf(self.leaf_value(g, h, member)),
            Some(s) => {
                let mut left = vec![false; member.len()];
                let mut right = vec![false; member.len()];
                for i in 0..member.len() {
                    if member[i] {
                        if self.design.get(i, s.feature) <= s.threshold {
                            left[i] = true;
                        } else {
                            right[i] = true;
                        }
                    }
                }
                Tree::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left: Box::new(self.grow(g, h, &left, depth - 1)),
                    right: Box::new(self.grow(g, h, &right, depth - 1)),
                }
            }
        }
    }
}

fn clamp_tree(t: &mut Tree, cap: f64) {
    match t {
        Tree::Leaf(v) => *v = v.clamp(-cap, cap),
        Tree::Split { left, right, .. } => {
            clamp_tree(left, cap);
            clamp_tree(right, cap);
        }
    }
}

impl BoostModel {
    pub fn fit(design: &Design, y: &[f64], target: Target, params: &BoostParams) -> Self {
        let n = design.rows();
        let order = (0..design.cols())
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| design.get(a, f).total_cmp(&design.get(b, f)));
                idx
            })
            .collect();
        let mean = y.iter().sum::<f64>() / n.max(1) as f64;
        let (base, reg) = match target {
            Target::Continuous => (mean, 0.0),
            Target::Probability => (logit(mean.clamp(1e-6, 1.0 - 1e-6)), HESS_REG),
        };
        let grower = Grower {
            design,
            order,
            min_leaf: params.min_leaf.max(1),
            reg,
        };
        let member = vec![true; n];
        let mut score = vec![base; n];
        let mut g = vec![0.0; n];
        let mut h = vec![1.0; n];
        let mut trees = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            match target {
                Target::Continuous => {
                    for i in 0..n {
                        g[i] = y[i] - score[i];
                    }
                }
                Target::Probability => {
                    for i in 0..n {
                        let p = expit(score[i]);
                        g[i] = y[i] - p;
                        h[i] = p * (1.0 - p);
                    }
                }
            }
            let mut tree = grower.grow(&g, &h, &member, params.max_depth);
            if target == Target::Probability {
                clamp_tree(&mut tree, MAX_LOGIT_STEP);
            }
            if matches!(tree, Tree::Leaf(v) if v.abs() < 1e-15) {
                break;
            }
            for (i, s) in score.iter_mut().enumerate() {
                *s += params.learning_rate * tree.eval(design.row(i));
            }
            trees.push(tree);
        }
        Self {
            target,
            base,
            learning_rate: params.learning_rate,
            trees,
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw = self.base + self.learning_rate * self.trees.iter().map(|t| t.eval(x)).sum::<f64>();
        match self.target {
            Target::Continuous => raw,
            Target::Probability => expit(raw),
        }
    }
}
