//! Every differentiable op applied to small random inputs, for gradient
//! checking from tests and acceptance runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// One case per op; inputs drawn from `seed`.
pub fn op_catalog(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, build)| OpCase {
            name,
            inputs,
            build,
        })
        .collect()
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so relu kinks stay > 10·eps away.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Tensor::row(&raw.iter().map(|v| v / s).collect::<Vec<_>>())
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    vec![
        (
            "matmul",
            vec![rand_t(rng, 3, 4), rand_t(rng, 4, 2)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        ("add", vec![rand_t(rng, 2, 3), rand_t(rng, 2, 3)], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![rand_t(rng, 2, 3), rand_t(rng, 2, 3)], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![rand_t(rng, 2, 3), rand_t(rng, 2, 3)], |t, v| {
            t.mul(v[0], v[1])
        }),
        (
            "add_row",
            vec![rand_t(rng, 3, 4), rand_t(rng, 1, 4)],
            |t, v| t.add_row(v[0], v[1]),
        ),
        ("scale", vec![rand_t(rng, 2, 2)], |t, v| {
            Ok(t.scale(v[0], -1.7))
        }),
        ("tanh", vec![rand_t(rng, 2, 5)], |t, v| Ok(t.tanh(v[0]))),
        ("sigmoid", vec![rand_t(rng, 2, 5)], |t, v| {
            Ok(t.sigmoid(v[0]))
        }),
        ("relu", vec![rand_away_from_zero(rng, 3, 4)], |t, v| {
            Ok(t.relu(v[0]))
        }),
        ("softmax", vec![rand_t(rng, 3, 4)], |t, v| {
            Ok(t.softmax(v[0]))
        }),
        ("softmax_axis0", vec![rand_t(rng, 3, 4)], |t, v| {
            t.softmax_axis(v[0], 0)
        }),
        ("log_softmax", vec![rand_t(rng, 2, 6)], |t, v| {
            Ok(t.log_softmax(v[0]))
        }),
        (
            "concat_cols",
            vec![rand_t(rng, 2, 3), rand_t(rng, 2, 1)],
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        (
            "concat_rows",
            vec![rand_t(rng, 2, 3), rand_t(rng, 1, 3)],
            |t, v| t.concat_rows(&[v[0], v[1]]),
        ),
        ("gather", vec![rand_t(rng, 3, 3)], |t, v| {
            t.gather(v[0], vec![8, 0, 0, 4], 2, 2)
        }),
        ("select_rows", vec![rand_t(rng, 4, 3)], |t, v| {
            t.select_rows(v[0], &[3, 1, 3])
        }),
        ("scatter_rows", vec![rand_t(rng, 4, 2)], |t, v| {
            t.scatter_rows(v[0], vec![0, 2, 0, 1], 3)
        }),
        ("transpose", vec![rand_t(rng, 2, 5)], |t, v| {
            Ok(t.transpose(v[0]))
        }),
        ("sum", vec![rand_t(rng, 3, 3)], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![rand_t(rng, 3, 3)], |t, v| Ok(t.mean(v[0]))),
        ("row_norms", vec![rand_away_from_zero(rng, 4, 2)], |t, v| {
            Ok(t.row_norms(v[0]))
        }),
        (
            "normalize_rows",
            vec![rand_away_from_zero(rng, 3, 2)],
            |t, v| Ok(t.normalize_rows(v[0])),
        ),
        (
            "row_dot",
            vec![rand_t(rng, 3, 4), rand_t(rng, 3, 4)],
            |t, v| t.row_dot(v[0], v[1]),
        ),
        (
            "scale_rows",
            vec![rand_t(rng, 3, 4), rand_t(rng, 3, 1)],
            |t, v| t.scale_rows(v[0], v[1]),
        ),
        ("segment_softmax", vec![rand_t(rng, 6, 1)], |t, v| {
            t.segment_softmax(v[0], &[1, 3, 2])
        }),
        (
            "l1_distance",
            vec![rand_t(rng, 5, 2), rand_t(rng, 5, 2)],
            |t, v| t.l1_distance(v[0], v[1]),
        ),
        (
            "conv1d",
            vec![rand_t(rng, 7, 3), rand_t(rng, 15, 4), rand_t(rng, 1, 4)],
            |t, v| t.conv1d(v[0], v[1], v[2], 5),
        ),
        (
            "gru_cell",
            vec![
                rand_t(rng, 3, 4),
                rand_t(rng, 3, 5),
                rand_t(rng, 4, 15),
                rand_t(rng, 5, 15),
                rand_t(rng, 1, 15),
                rand_t(rng, 1, 15),
            ],
            |t, v| t.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]),
        ),
        ("cross_entropy", vec![probs(rng, 5)], |t, v| {
            let y = Tensor::row(&[0.1, 0.2, 0.3, 0.15, 0.25]);
            t.cross_entropy(v[0], &y)
        }),
        ("softmax_cross_entropy", vec![rand_t(rng, 2, 4)], |t, v| {
            let y = Tensor::matrix(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]);
            t.softmax_cross_entropy(v[0], &y)
        }),
        (
            "softmax_then_cross_entropy",
            vec![rand_t(rng, 1, 4)],
            |t, v| {
                let p = t.softmax(v[0]);
                t.cross_entropy(p, &Tensor::row(&[0.0, 0.0, 1.0, 0.0]))
            },
        ),
    ]
}
