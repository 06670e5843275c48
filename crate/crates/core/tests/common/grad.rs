use fpforge::extractor::{autoencoder_layers, discriminator_layers, extractor_step};
use fpforge::gradcheck::{compare, grad_check, GradCheckReport};
use fpforge::{Element, Network, Result, Tape, Tensor, Var};
use rand::Rng;

use super::{away_from_zero, rng, uniform};

pub trait Precision: Element {
    const EPS: f64;
    const TOL: f64;
}

impl Precision for f32 {
    const EPS: f64 = 1e-2;
    const TOL: f64 = 1e-3;
}

impl Precision for f64 {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-5;
}

/// Contracts a tensor-valued node with fixed random weights so every output
/// coordinate contributes a different amount.
pub fn contract<T: Element>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform::<T>(tape.shape(y), -1.0, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

pub fn check<T, F>(what: &str, build: F, input: &Tensor<T>)
where
    T: Precision,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check(build, input, T::EPS, T::TOL).unwrap();
    assert!(report.passed, "{what}: {report:?}");
}

pub fn conv_input<T: Precision>() {
    let x = uniform::<T>(&[2, 3, 6, 6], -1.0, 1.0, &mut rng(1));
    let w = uniform::<T>(&[4, 3, 3, 3], -0.5, 0.5, &mut rng(2));
    let b = uniform::<T>(&[4], -0.5, 0.5, &mut rng(3));
    for stride in [1, 2] {
        check(
            "conv2d/input",
            |tape, x| {
                let w = tape.constant(w.clone());
                let b = tape.constant(b.clone());
                let y = tape.conv2d(x, w, b, stride, 1)?;
                contract(tape, y, 10)
            },
            &x,
        );
        check(
            "conv2d/weight",
            |tape, w| {
                let x = tape.constant(x.clone());
                let b = tape.constant(b.clone());
                let y = tape.conv2d(x, w, b, stride, 1)?;
                contract(tape, y, 11)
            },
            &w,
        );
        check(
            "conv2d/bias",
            |tape, b| {
                let x = tape.constant(x.clone());
                let w = tape.constant(w.clone());
                let y = tape.conv2d(x, w, b, stride, 1)?;
                contract(tape, y, 12)
            },
            &b,
        );
    }
}

pub fn elementwise<T: Precision>() {
    let x = away_from_zero::<T>(&[2, 3, 4, 4], &mut rng(4));
    let other = uniform::<T>(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(5));
    check(
        "upsample",
        |tape, x| {
            let y = tape.upsample_nearest2x(x)?;
            contract(tape, y, 13)
        },
        &x,
    );
    check(
        "relu",
        |tape, x| {
            let y = tape.relu(x);
            contract(tape, y, 14)
        },
        &x,
    );
    check(
        "sigmoid",
        |tape, x| {
            let y = tape.sigmoid(x);
            contract(tape, y, 15)
        },
        &x,
    );
    check(
        "add",
        |tape, x| {
            let o = tape.constant(other.clone());
            let y = tape.add(x, o)?;
            let z = tape.add(y, x)?;
            contract(tape, z, 16)
        },
        &x,
    );
    check(
        "sub",
        |tape, x| {
            let o = tape.constant(other.clone());
            let y = tape.sub(o, x)?;
            contract(tape, y, 17)
        },
        &x,
    );
    check(
        "mul",
        |tape, x| {
            let o = tape.constant(other.clone());
            let y = tape.mul(x, o)?;
            let z = tape.mul(y, x)?;
            contract(tape, z, 18)
        },
        &x,
    );
    check(
        "scale",
        |tape, x| {
            let y = tape.scale(x, -2.5);
            contract(tape, y, 19)
        },
        &x,
    );
    check(
        "global_avg_pool",
        |tape, x| {
            let y = tape.global_avg_pool(x)?;
            contract(tape, y, 20)
        },
        &x,
    );
    check("sum", |tape, x| Ok(tape.sum(x)), &x);
    check("mean", |tape, x| Ok(tape.mean(x)), &x);
    check(
        "mse",
        |tape, x| {
            let o = tape.constant(other.clone());
            tape.mse(x, o)
        },
        &x,
    );
}

pub fn heads<T: Precision>() {
    let x = uniform::<T>(&[3, 5], -1.0, 1.0, &mut rng(6));
    let w = uniform::<T>(&[4, 5], -1.0, 1.0, &mut rng(7));
    let b = uniform::<T>(&[4], -1.0, 1.0, &mut rng(8));
    check(
        "linear/input",
        |tape, x| {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.linear(x, w, b)?;
            contract(tape, y, 21)
        },
        &x,
    );
    check(
        "linear/weight",
        |tape, w| {
            let (x, b) = (tape.constant(x.clone()), tape.constant(b.clone()));
            let y = tape.linear(x, w, b)?;
            contract(tape, y, 22)
        },
        &w,
    );
    check(
        "linear/bias",
        |tape, b| {
            let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.linear(x, w, b)?;
            contract(tape, y, 23)
        },
        &b,
    );
    check("softmax_ce", |tape, x| tape.softmax_ce(x, &[0, 4, 2]), &x);
    let p = uniform::<T>(&[6], 0.1, 0.9, &mut rng(9));
    check("bce", |tape, p| tape.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]), &p);
    check(
        "sigmoid+bce",
        |tape, z| {
            let p = tape.sigmoid(z);
            tape.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
        },
        &uniform::<T>(&[6], -3.0, 3.0, &mut rng(10)),
    );
}

pub fn common_numeric(x: &Tensor<f64>, seed: u64) -> Vec<f64> {
    fpforge::gradcheck::numeric_grad(&|tape: &mut Tape<f64>, v: Var| contract(tape, v, seed), x, 1e-5).unwrap()
}

/// Joint objective on 16x16 inputs. Parameters of both networks are nudged
/// in f64; the analytic gradients must match `d rec - lambda d adv` for the
/// extractor (reversal) and `lambda d adv` for the discriminator.
pub fn extractor_objective<T: Element>(tol: f64) -> (GradCheckReport, GradCheckReport, f64) {
    const LAMBDA: f64 = 0.5;
    const K: usize = 3;
    let ae64 = Network::<f64>::new("autoencoder", autoencoder_layers(), 31);
    let d64 = Network::<f64>::new("discriminator", discriminator_layers(K), 32);
    let reals = uniform::<f64>(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(33));
    let fakes = uniform::<f64>(&[3, 3, 16, 16], 0.0, 1.0, &mut rng(34));
    let labels = [0usize, 1, 2];

    let mut ae = Network::<T>::new("autoencoder", autoencoder_layers(), 31);
    ae.load(ae64.params.cast()).unwrap();
    let mut d = Network::<T>::new("discriminator", discriminator_layers(K), 32);
    d.load(d64.params.cast()).unwrap();
    let out = extractor_step(&ae, Some(&d), reals.cast(), Some((fakes.cast(), &labels[..])), LAMBDA).unwrap();

    let losses = |ae: &Network<f64>, d: &Network<f64>| {
        let o = extractor_step(ae, Some(d), reals.clone(), Some((fakes.clone(), &labels[..])), LAMBDA).unwrap();
        (o.rec_loss, o.adv_loss)
    };
    let h = 1e-6;
    let mut pick = rng(35);
    let mut sample = |net: &Network<f64>| {
        let mut coords = Vec::new();
        for (t, p) in net.params.iter().enumerate() {
            for _ in 0..4 {
                coords.push((t, pick.gen_range(0..p.tensor.numel())));
            }
        }
        coords
    };
    let coords_e = sample(&ae64);
    let coords_d = sample(&d64);

    let nudge = |net: &Network<f64>, t: usize, i: usize, delta: f64| {
        let mut n = net.clone();
        n.params.iter_mut().nth(t).unwrap().tensor.data_mut()[i] += delta;
        n
    };

    let (mut got_e, mut want_e, mut naive_e) = (Vec::new(), Vec::new(), Vec::new());
    for &(t, i) in &coords_e {
        let (rp, ap) = losses(&nudge(&ae64, t, i, h), &d64);
        let (rm, am) = losses(&nudge(&ae64, t, i, -h), &d64);
        let (dr, da) = ((rp - rm) / (2.0 * h), (ap - am) / (2.0 * h));
        got_e.push(out.grads_e[t][i].as_f64());
        want_e.push(dr - LAMBDA * da);
        naive_e.push(dr + LAMBDA * da);
    }
    let (mut got_d, mut want_d) = (Vec::new(), Vec::new());
    for &(t, i) in &coords_d {
        let (_, ap) = losses(&ae64, &nudge(&d64, t, i, h));
        let (_, am) = losses(&ae64, &nudge(&d64, t, i, -h));
        got_d.push(out.grads_d[t][i].as_f64());
        want_d.push(LAMBDA * (ap - am) / (2.0 * h));
    }
    let naive = compare(&got_e, &naive_e, tol).max_rel_err;
    (compare(&got_e, &want_e, tol), compare(&got_d, &want_d, tol), naive)
}


pub fn grl_reversal() {
    let x = uniform::<f64>(&[7], -1.0, 1.0, &mut rng(11));
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x.clone().with_grad());
    let r = tape.grl(v);
    assert_eq!(tape.value(r).data(), x.data());
    let y = contract(&mut tape, r, 24).unwrap();
    tape.backward(y).unwrap();
    let flipped: Vec<f64> = tape.grad(v).unwrap().iter().map(|g| -g).collect();
    let reference = common_numeric(&x, 24);
    let report = compare(&flipped, &reference, 1e-5);
    assert!(report.passed, "{report:?}");
}

pub fn extractor_objective_checked<T: Element>(tol: f64) {
    let (e, d, naive) = extractor_objective::<T>(tol);
    assert!(e.passed, "extractor: {e:?}");
    assert!(d.passed, "discriminator: {d:?}");
    // without the reversal the extractor gradients would disagree
    assert!(naive > 1e-2, "reversal not observable: {naive}");
}

/// Every check above, in both precisions.
pub fn full_suite() {
    conv_input::<f32>();
    conv_input::<f64>();
    elementwise::<f32>();
    elementwise::<f64>();
    heads::<f32>();
    heads::<f64>();
    grl_reversal();
    extractor_objective_checked::<f32>(1e-3);
    extractor_objective_checked::<f64>(1e-5);
}
