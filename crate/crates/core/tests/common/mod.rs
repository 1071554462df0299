#![allow(dead_code)]

use ldul::rng::Stream;
use ldul::tensor::{finite_difference_gradient, relative_error, NodeId, ParamStore, Tape, Tensor};
use ldul::Result;

pub const FD_STEP: f64 = 1e-6;

type Build = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// One differentiable primitive: input shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub build: Build,
}

pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, inputs: &[&[usize]], build: Build) -> OpCase {
        OpCase {
            name,
            inputs: inputs.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, x| t.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, x| t.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, x| t.mul(x[0], x[1])),
        case("scale", &[&[5]], |t, x| t.scale(x[0], -1.7)),
        case("add_scalar", &[&[5]], |t, x| t.add_scalar(x[0], 0.3)),
        case("add_row_bias", &[&[3, 4], &[4]], |t, x| t.add_row_bias(x[0], x[1])),
        case("scale_rows", &[&[3, 4]], |t, x| t.scale_rows(x[0], vec![0.5, -2.0, 1.5])),
        case("matmul", &[&[3, 5], &[5, 2]], |t, x| t.matmul(x[0], x[1])),
        case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, x| t.conv2d(x[0], x[1], 1, 1)),
        case("conv2d_stride2", &[&[2, 2, 6, 6], &[3, 2, 3, 3]], |t, x| t.conv2d(x[0], x[1], 2, 1)),
        case("conv_transpose2d", &[&[2, 3, 3, 3], &[3, 2, 4, 4]], |t, x| {
            t.conv_transpose2d(x[0], x[1], 2, 1)
        }),
        case("add_channel_bias", &[&[2, 3, 2, 2], &[3]], |t, x| t.add_channel_bias(x[0], x[1])),
        case("add_channels", &[&[2, 3, 2, 2], &[2, 3]], |t, x| t.add_channels(x[0], x[1])),
        case("broadcast_spatial", &[&[2, 3]], |t, x| t.broadcast_spatial(x[0], 2, 3)),
        case("relu", &[&[12]], |t, x| t.relu(x[0])),
        case("leaky_relu", &[&[12]], |t, x| t.leaky_relu(x[0], 0.2)),
        case("silu", &[&[12]], |t, x| t.silu(x[0])),
        case("tanh", &[&[12]], |t, x| t.tanh(x[0])),
        case("sqrt", &[&[12]], |t, x| {
            let sq = t.mul(x[0], x[0])?;
            let pos = t.add_scalar(sq, 0.5)?;
            t.sqrt(pos)
        }),
        case("sum", &[&[3, 3]], |t, x| t.sum(x[0])),
        case("mean", &[&[3, 3]], |t, x| t.mean(x[0])),
        case("sum_squares", &[&[3, 3]], |t, x| t.sum_squares(x[0])),
        case("max_abs", &[&[3, 3]], |t, x| t.max_abs(x[0])),
        case("row_sum_squares", &[&[3, 4]], |t, x| t.row_sum_squares(x[0])),
        case("row_smooth_max_abs", &[&[3, 4]], |t, x| t.row_smooth_max_abs(x[0], 5.0)),
        case("row_max_abs", &[&[3, 4]], |t, x| t.row_max_abs(x[0])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, x| t.concat(&[x[0], x[1]], 0)),
        case("concat_channels", &[&[2, 1, 2, 2], &[2, 3, 2, 2]], |t, x| t.concat(&[x[0], x[1]], 1)),
        case("slice", &[&[3, 5]], |t, x| t.slice(x[0], 1, 1, 3)),
        case("reshape", &[&[2, 6]], |t, x| t.reshape(x[0], &[3, 4])),
        case("stack", &[&[4], &[4]], |t, x| t.stack(&[x[0], x[1]], &[1, 0, 1])),
    ]
}

fn input_name(i: usize) -> String {
    format!("in{i}")
}

/// `sum(op(inputs) ⊙ weights)` recorded on `tape`.
fn projected(case: &OpCase, tape: &mut Tape, store: &ParamStore, weights: &Tensor) -> Result<NodeId> {
    let ids = (0..case.inputs.len())
        .map(|i| tape.param(store, &input_name(i)))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(tape, &ids)?;
    let w = tape.constant(weights.clone())?;
    let w = tape.reshape(w, tape.value(out).shape().to_vec().as_slice())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `case` over `draws` random inputs.
pub fn worst_op_error(case: &OpCase, draws: usize, seed: u64) -> f64 {
    let mut rng = Stream::derive(seed, ldul::rng::label(case.name));
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mut store = ParamStore::new();
        for (i, shape) in case.inputs.iter().enumerate() {
            let n = shape.iter().product();
            store.insert(input_name(i), Tensor::new(shape.clone(), rng.normals(n)).unwrap());
        }
        let out_len = {
            let mut tape = Tape::new();
            let ids: Vec<_> = (0..case.inputs.len())
                .map(|i| tape.param(&store, &input_name(i)).unwrap())
                .collect();
            let out = (case.build)(&mut tape, &ids).unwrap();
            tape.value(out).len()
        };
        let weights = Tensor::vector(rng.normals(out_len));
        let mut tape = Tape::new();
        let loss = projected(case, &mut tape, &store, &weights).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut t = Tape::new();
                let l = projected(case, &mut t, p, &weights)?;
                Ok(t.value(l).data()[0])
            },
            &store,
            FD_STEP,
        )
        .unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (name, g) in &fd {
            analytic.extend_from_slice(store.grad(name).unwrap().data());
            numeric.extend_from_slice(g.data());
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
