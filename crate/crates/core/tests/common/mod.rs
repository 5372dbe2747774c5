#![allow(dead_code)]

use graphreg::diffcore::{check_function, grad_check, Bound, GradCheckReport, LayerSpec, Network, Padding, Tape, Tensor, Var};
use graphreg::embed::{aae_disc_loss, aae_gen_loss, vae_terms};
use graphreg::rng::{stream, Stream};
use graphreg::train::{total_loss, Distance, StepInput, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, for kinked ops.
pub fn randn_away(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

/// Distinct values, so max pooling has a unique winner per window.
pub fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

type Case = (String, GradCheckReport);

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> graphreg::Result<Var>) -> Case {
    (name.to_string(), check_function(f, &inputs, EPS, None).unwrap())
}

/// Reduce any tensor to a scalar with fixed random weights, so every output
/// coordinate gets a distinct gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> graphreg::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = stream(seed, Stream::Init);
    let w = tape.leaf(randn(&shape, &mut rng));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

pub fn op_cases() -> Vec<Case> {
    let mut rng = stream(11, Stream::Data);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let m = randn(&[4, 2], &mut rng);
    let bias = randn(&[4], &mut rng);
    let pos = Tensor::new(vec![3, 4], (0..12).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap();
    let img = randn(&[2, 2, 5, 5], &mut rng);
    let kern = randn(&[3, 2, 3, 3], &mut rng);
    let kb = randn(&[3], &mut rng);
    let mut v = vec![
        check("matmul", vec![a.clone(), m.clone()], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, 1)
        }),
        check("add_bias", vec![a.clone(), bias.clone()], |t, x| {
            let y = t.add_bias(x[0], x[1])?;
            project(t, y, 2)
        }),
        check("add", vec![a.clone(), b.clone()], |t, x| {
            let y = t.add(x[0], x[1])?;
            project(t, y, 3)
        }),
        check("sub", vec![a.clone(), b.clone()], |t, x| {
            let y = t.sub(x[0], x[1])?;
            project(t, y, 4)
        }),
        check("mul", vec![a.clone(), b.clone()], |t, x| {
            let y = t.mul(x[0], x[1])?;
            project(t, y, 5)
        }),
        check("div", vec![a.clone(), pos.clone()], |t, x| {
            let y = t.div(x[0], x[1])?;
            project(t, y, 6)
        }),
        check("scale_add_scalar", vec![a.clone()], |t, x| {
            let y = t.scale(x[0], -1.7);
            let y = t.add_scalar(y, 0.4);
            project(t, y, 7)
        }),
        check("relu", vec![randn_away(&[3, 4], 0.05, &mut rng)], |t, x| {
            let y = t.relu(x[0]);
            project(t, y, 8)
        }),
        check("sigmoid", vec![a.clone()], |t, x| {
            let y = t.sigmoid(x[0]);
            project(t, y, 9)
        }),
        check("tanh", vec![a.clone()], |t, x| {
            let y = t.tanh(x[0]);
            project(t, y, 10)
        }),
        check("exp", vec![a.clone()], |t, x| {
            let y = t.exp(x[0]);
            project(t, y, 11)
        }),
        check("ln", vec![pos.clone()], |t, x| {
            let y = t.ln(x[0]);
            project(t, y, 12)
        }),
        check("softplus", vec![a.clone()], |t, x| {
            let y = t.softplus(x[0]);
            project(t, y, 13)
        }),
        check("square", vec![a.clone()], |t, x| {
            let y = t.square(x[0]);
            project(t, y, 14)
        }),
        check("sqrt", vec![pos.clone()], |t, x| {
            let y = t.sqrt(x[0]);
            project(t, y, 15)
        }),
        check("softmax", vec![a.clone()], |t, x| {
            let y = t.softmax(x[0])?;
            project(t, y, 16)
        }),
        check("reshape_flatten", vec![img.clone()], |t, x| {
            let y = t.flatten(x[0])?;
            let y = t.reshape(y, vec![10, 10])?;
            project(t, y, 17)
        }),
        check("slice_cols", vec![a.clone()], |t, x| {
            let y = t.slice_cols(x[0], 1, 2)?;
            project(t, y, 18)
        }),
        check("gather_rows", vec![a.clone()], |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2, 1])?;
            project(t, y, 19)
        }),
        check("sum_mean", vec![a.clone()], |t, x| {
            let s = t.sum(x[0]);
            let sq = t.square(x[0]);
            let m = t.mean(sq);
            t.add(s, m)
        }),
        check("sum_rows", vec![a.clone()], |t, x| {
            let y = t.sum_rows(x[0]);
            project(t, y, 20)
        }),
        check("row_dot", vec![a.clone(), b.clone()], |t, x| {
            let y = t.row_dot(x[0], x[1])?;
            project(t, y, 21)
        }),
        check("max_pool2", vec![distinct(&[2, 2, 4, 6], &mut rng)], |t, x| {
            let y = t.max_pool2(x[0])?;
            project(t, y, 22)
        }),
        check("sparse_cross_entropy", vec![a.clone()], |t, x| t.sparse_cross_entropy(x[0], &[3, 0, 1])),
    ];
    for pad in [0, 1] {
        v.push(check(&format!("conv2d_pad{pad}"), vec![img.clone(), kern.clone(), kb.clone()], move |t, x| {
            let y = t.conv2d(x[0], x[1], x[2], pad)?;
            project(t, y, 23)
        }));
    }
    v
}

fn net_case(name: &str, input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Case {
    let mut rng = stream(seed, Stream::Init);
    let net = Network::new(input.to_vec(), layers, 0, &mut rng).unwrap();
    let mut shape = vec![3];
    shape.extend_from_slice(input);
    let x = randn(&shape, &mut rng);
    let classes = net.output_shape()[0];
    let labels: Vec<usize> = (0..3).map(|i| i % classes).collect();
    (name.to_string(), grad_check(&net, &x, &labels, EPS).unwrap())
}

/// Cross-entropy gradients of small networks, one per layer kind.
pub fn layer_cases() -> Vec<Case> {
    use LayerSpec::*;
    vec![
        net_case("layer_dense", &[5], vec![Dense { units: 4 }], 1),
        net_case("layer_relu", &[5], vec![Dense { units: 6 }, Relu, Dense { units: 3 }], 2),
        net_case("layer_sigmoid", &[5], vec![Dense { units: 6 }, Sigmoid, Dense { units: 3 }], 3),
        net_case("layer_tanh", &[5], vec![Dense { units: 6 }, Tanh, Dense { units: 3 }], 4),
        net_case("layer_softmax", &[5], vec![Dense { units: 3 }, Softmax], 5),
        net_case(
            "layer_conv_same_pool_flatten",
            &[1, 6, 6],
            vec![
                Conv2d {
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Same,
                },
                MaxPool2,
                Flatten,
                Dense { units: 3 },
            ],
            6,
        ),
        net_case(
            "layer_conv_valid",
            &[2, 5, 5],
            vec![
                Conv2d {
                    filters: 3,
                    kernel: 3,
                    padding: Padding::Valid,
                },
                Tanh,
                Flatten,
                Dense { units: 2 },
            ],
            7,
        ),
    ]
}

/// VAE objective with respect to mu, logvar and the decoder weights.
pub fn vae_case() -> Case {
    let mut rng = stream(21, Stream::Init);
    let dec = Network::new(
        vec![3],
        vec![LayerSpec::Dense { units: 5 }, LayerSpec::Tanh, LayerSpec::Dense { units: 8 }],
        1,
        &mut rng,
    )
    .unwrap();
    let x = Tensor::new(vec![4, 8], (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let noise = randn(&[4, 3], &mut rng);
    let mut inputs = vec![randn(&[4, 3], &mut rng), randn(&[4, 3], &mut rng).map(|v| 0.5 * v)];
    inputs.extend(dec.params().iter().cloned());
    let f = |t: &mut Tape, v: &[Var]| {
        let bound = Bound::from_vars(v[2..].to_vec());
        let xv = t.leaf(x.clone());
        let nv = t.leaf(noise.clone());
        Ok(vae_terms(t, &dec, &bound, xv, v[0], v[1], nv)?.total)
    };
    ("vae_total".to_string(), check_function(f, &inputs, EPS, None).unwrap())
}

fn disc() -> Network {
    let mut rng = stream(31, Stream::Init);
    Network::new(
        vec![3],
        vec![LayerSpec::Dense { units: 6 }, LayerSpec::Tanh, LayerSpec::Dense { units: 1 }],
        1,
        &mut rng,
    )
    .unwrap()
}

/// Discriminator and generator losses with respect to both latent batches
/// and the discriminator weights.
pub fn aae_cases() -> Vec<Case> {
    let d = disc();
    let mut rng = stream(32, Stream::Data);
    let zp = randn(&[5, 3], &mut rng);
    let ze = randn(&[5, 3], &mut rng);
    let mut inputs = vec![zp, ze.clone()];
    inputs.extend(d.params().iter().cloned());
    let fd = |t: &mut Tape, v: &[Var]| {
        let bound = Bound::from_vars(v[2..].to_vec());
        aae_disc_loss(t, &d, &bound, v[0], v[1])
    };
    let mut ginputs = vec![ze];
    ginputs.extend(d.params().iter().cloned());
    let fg = |t: &mut Tape, v: &[Var]| {
        let bound = Bound::from_vars(v[1..].to_vec());
        aae_gen_loss(t, &d, &bound, v[0])
    };
    vec![
        ("aae_discriminator".to_string(), check_function(fd, &inputs, EPS, None).unwrap()),
        ("aae_generator".to_string(), check_function(fg, &ginputs, EPS, None).unwrap()),
    ]
}

/// Full graph objective (cross-entropy plus neighbor term) with respect to
/// the network weights, on a frozen batch.
pub fn neighbor_cases() -> Vec<Case> {
    let mut rng = stream(41, Stream::Init);
    let net = Network::new(
        vec![6],
        vec![
            LayerSpec::Dense { units: 5 },
            LayerSpec::Tanh,
            LayerSpec::Dense { units: 3 },
        ],
        1,
        &mut rng,
    )
    .unwrap();
    let input = StepInput {
        seeds: randn(&[2, 6], &mut rng),
        labels: vec![0, 2],
        neighbors: Some(randn(&[3, 6], &mut rng)),
        owner: vec![0, 0, 1],
        weights: vec![0.9, 0.8, 0.77],
    };
    [Distance::SquaredL2, Distance::Cosine]
        .into_iter()
        .map(|metric| {
            let cfg = TrainConfig {
                metric,
                alpha: 0.7,
                ..TrainConfig::default()
            };
            let f = |t: &mut Tape, v: &[Var]| {
                let bound = Bound::from_vars(v.to_vec());
                Ok(total_loss(t, &net, &bound, &input, &cfg)?.total)
            };
            (
                format!("neighbor_{metric:?}").to_lowercase(),
                check_function(f, net.params(), EPS, None).unwrap(),
            )
        })
        .collect()
}

pub fn all_gradient_cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(layer_cases());
    v.push(vae_case());
    v.extend(aae_cases());
    v.extend(neighbor_cases());
    v
}

/// Random per-class embeddings (image indices are global and contiguous per
/// class), clustered with spherical k-means and merged into one graph.
pub fn random_graph(
    seed: u64,
    per_class: &[usize],
    dim: usize,
    k: usize,
    threshold: f64,
) -> (graphreg::graph::SimilarityGraph, Vec<graphreg::embed::EmbeddingTable>, Vec<graphreg::cluster::ClusterAssignment>) {
    use graphreg::cluster::kmeans_cosine;
    use graphreg::embed::{EmbeddingTable, Method};
    use graphreg::graph::{build_class_graph, merge_graphs};
    let mut rng = stream(seed, Stream::Embed);
    let mut next = 0;
    let mut tables = Vec::new();
    let mut assigns = Vec::new();
    let mut parts = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        // a shared class direction makes high similarities common
        let center = randn(&[dim], &mut rng);
        let mut vals = randn(&[n, dim], &mut rng);
        for row in vals.data_mut().chunks_mut(dim) {
            for (v, m) in row.iter_mut().zip(center.data()) {
                *v = 0.6 * *v + m;
            }
        }
        let table = EmbeddingTable::new(Method::Tsne, (next..next + n).collect(), vals).unwrap();
        next += n;
        let a = kmeans_cosine(&table, k.min(n), seed + c as u64, 50).unwrap();
        parts.push(build_class_graph(&table, &a, c, threshold).unwrap());
        tables.push(table);
        assigns.push(a);
    }
    (merge_graphs(&parts).unwrap(), tables, assigns)
}
