//! Central-difference checks of every tape primitive and of the full
//! decoder loss, all on the 64-bit path.

use ksan::model::{
    layout, loss_on_tape, Batch, BoundAdapters, BoundLora, BoundParams, TransformerConfig,
};
use ksan::numerics::{finite_difference_check, NodeId, Rng, Tape};

pub const TOLERANCE: f64 = 1e-4;
// small enough for truncation error, large enough that roundoff on a
// loss near 20 stays below the tolerance for partials near 1e-6
const EPS: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[NodeId]) -> ksan::Result<NodeId>;

/// Leaves of one check: shapes plus the point the gradient is taken at.
struct Leaves {
    shapes: Vec<Vec<usize>>,
    point: Vec<f64>,
}

impl Leaves {
    fn random(shapes: &[Vec<usize>], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        Leaves {
            shapes: shapes.to_vec(),
            point: (0..n).map(|_| rng.normal(0.0, std)).collect(),
        }
    }

    fn place(&self, tape: &mut Tape, x: &[f64]) -> Vec<NodeId> {
        let mut at = 0;
        self.shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let id = tape.param(s.clone(), x[at..at + n].to_vec()).expect("leaf shape");
                at += n;
                id
            })
            .collect()
    }
}

/// Worst relative error between backprop and central differences.
fn check(leaves: &Leaves, build: &Build) -> Result<f64, String> {
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let ids = leaves.place(&mut tape, x);
        let out = build(&mut tape, &ids).expect("graph builds");
        tape.scalar(out).expect("scalar output")
    };
    let mut tape = Tape::new();
    let ids = leaves.place(&mut tape, &leaves.point);
    let out = build(&mut tape, &ids).map_err(|e| e.to_string())?;
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    let mut analytic = Vec::with_capacity(leaves.point.len());
    for (id, s) in ids.iter().zip(&leaves.shapes) {
        let n: usize = s.iter().product();
        match grads.get(*id) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    let r = finite_difference_check(eval, &leaves.point, &analytic, EPS)
        .map_err(|e| e.to_string())?;
    Ok(r.max_rel_error)
}

/// Reduces an `n × d` node to a scalar through a fixed random projection
/// and a cross entropy, so every output coordinate gets its own weight.
fn scalarize(tape: &mut Tape, x: NodeId, seed: u64) -> ksan::Result<NodeId> {
    let shape = tape.value(x).shape.clone();
    let (n, d) = (shape[0], shape[1]);
    let classes = 5;
    let mut rng = Rng::seed(seed);
    let proj: Vec<f64> = (0..classes * d).map(|_| rng.normal(0.0, 1.0)).collect();
    let p = tape.constant(vec![classes, d], proj)?;
    let logits = tape.matmul(x, p, true)?;
    let targets: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    tape.cross_entropy(logits, &targets, &vec![true; n])
}

/// `(name, worst relative error)` for every primitive and the full model.
pub fn all_checks() -> Vec<(&'static str, Result<f64, String>)> {
    let mut rng = Rng::seed(7);
    let mut out: Vec<(&'static str, Result<f64, String>)> = Vec::new();

    let l = Leaves::random(&[vec![4, 3], vec![3, 5]], 1.0, &mut rng);
    out.push((
        "matmul",
        check(&l, &|t, ids| {
            let y = t.matmul(ids[0], ids[1], false)?;
            scalarize(t, y, 1)
        }),
    ));
    let l = Leaves::random(&[vec![4, 3], vec![6, 3]], 1.0, &mut rng);
    out.push((
        "matmul-transposed",
        check(&l, &|t, ids| {
            let y = t.matmul(ids[0], ids[1], true)?;
            scalarize(t, y, 2)
        }),
    ));
    let l = Leaves::random(&[vec![3, 4], vec![3, 4]], 1.0, &mut rng);
    out.push((
        "add",
        check(&l, &|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            scalarize(t, y, 3)
        }),
    ));
    let l = Leaves::random(&[vec![3, 4]], 1.0, &mut rng);
    out.push((
        "scale",
        check(&l, &|t, ids| {
            let y = t.scale(ids[0], -1.7);
            scalarize(t, y, 4)
        }),
    ));
    let l = Leaves::random(&[vec![3, 4]], 1.0, &mut rng);
    out.push((
        "sum",
        check(&l, &|t, ids| {
            let y = t.gelu(ids[0]);
            Ok(t.sum(y))
        }),
    ));
    let l = Leaves::random(&[vec![4, 5]], 1.5, &mut rng);
    out.push((
        "gelu",
        check(&l, &|t, ids| {
            let y = t.gelu(ids[0]);
            scalarize(t, y, 5)
        }),
    ));
    let l = Leaves::random(&[vec![4, 6], vec![6], vec![6]], 1.0, &mut rng);
    out.push((
        "layer-norm",
        check(&l, &|t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2])?;
            scalarize(t, y, 6)
        }),
    ));
    let l = Leaves::random(&[vec![7, 4]], 1.0, &mut rng);
    out.push((
        "gather",
        check(&l, &|t, ids| {
            let y = t.gather(ids[0], &[3, 0, 3, 6, 1])?;
            scalarize(t, y, 7)
        }),
    ));
    // batch 2, seq 4, 2 heads of width 3
    let l = Leaves::random(&[vec![8, 18]], 1.0, &mut rng);
    out.push((
        "causal-attention",
        check(&l, &|t, ids| {
            let y = t.causal_attention(ids[0], 2, 4, 2)?;
            scalarize(t, y, 8)
        }),
    ));
    let l = Leaves::random(&[vec![5, 6]], 2.0, &mut rng);
    out.push((
        "cross-entropy",
        check(&l, &|t, ids| {
            t.cross_entropy(ids[0], &[1, 5, 0, 2, 2], &[true, true, false, true, true])
        }),
    ));
    out.push(("full-model", full_model_check()));
    out
}

/// Loss of a 2-layer, width-16 decoder with LoRA factors on every
/// adaptable matrix, differentiated with respect to all of them.
fn full_model_check() -> Result<f64, String> {
    let cfg = TransformerConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        mlp_hidden: 32,
        context: 8,
        vocab_size: 60,
    };
    let rank = 2;
    let scale = 16.0 / rank as f64;
    let weights = layout(&cfg);
    let mut shapes: Vec<Vec<usize>> = weights.iter().map(|(_, _, s)| s.clone()).collect();
    let mut adapted = Vec::new();
    for (name, role, s) in &weights {
        if role.is_adaptable() {
            adapted.push(name.clone());
            shapes.push(vec![rank, s[1]]);
            shapes.push(vec![s[0], rank]);
        }
    }
    let mut rng = Rng::seed(11);
    let leaves = Leaves::random(&shapes, 0.3, &mut rng);
    let a = [1usize, 7, 22, 59, 3, 40];
    let b = [1usize, 12, 12, 30, 2];
    let batch = Batch::from_sequences(&[
        (&a, &[true, true, false, true, true]),
        (&b, &[false, true, true, true]),
    ])
    .map_err(|e| e.to_string())?;
    let n_weights = weights.len();
    check(&leaves, &move |t, ids| {
        let mut params = BoundParams::new();
        for ((name, _, _), id) in weights.iter().zip(ids) {
            params.insert(name.clone(), *id);
        }
        let mut bound = BoundAdapters::new();
        for (i, name) in adapted.iter().enumerate() {
            bound.insert(
                name.clone(),
                BoundLora {
                    a: ids[n_weights + 2 * i],
                    b: ids[n_weights + 2 * i + 1],
                    scale,
                },
            );
        }
        loss_on_tape(t, &cfg, &params, Some(&bound), &batch)
    })
}
