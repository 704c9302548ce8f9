use pgan_core::arch::{Act, Block, ModelSpec, ModuleSpec, PerturbSpec, Role, UpMode};
use pgan_core::layers::{bind, ordered, MaskConfig, Mode, Net};
use pgan_core::ParamStore;
use pgan_noise::{make_mask, DistKind, RngKind};
use pgan_tensor::{gradient, kernels, Tape, Tensor};
use proptest::prelude::*;

fn model(input: Vec<usize>, output: Vec<usize>, blocks: Vec<Block>) -> ModelSpec {
    ModelSpec {
        name: "probe".into(),
        role: Role::Critic,
        input,
        output,
        blocks,
    }
}

fn perturb_spec(inp: usize, out: usize, h: usize, w: usize) -> PerturbSpec {
    PerturbSpec {
        inp,
        out,
        masks: 1,
        act: Act::Relu,
        layer: 3,
        height: h,
        width: w,
        bias: false,
    }
}

fn single(spec: PerturbSpec) -> Net {
    let m = model(
        vec![spec.inp, spec.height, spec.width],
        vec![spec.out, spec.height, spec.width],
        vec![Block::Perturb { path: "p".into(), spec }],
    );
    Net::new(m, 11, MaskConfig::default()).unwrap()
}

fn set(net: &mut Net, path: &str, t: Tensor) {
    *net.params.get_mut(path).unwrap() = t;
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed;
    Tensor::from_fn(shape, |_| {
        s = pgan_noise::splitmix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

#[test]
fn hand_example_through_derived_layer() {
    let mut net = single(perturb_spec(2, 1, 1, 2));
    net.masks
        .override_values("p", Tensor::new(vec![2, 1, 2], vec![0.5, 0.5, -1.0, -1.0]).unwrap())
        .unwrap();
    set(&mut net, "p.weight", Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
    let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, -2.0, 0.0, 3.0]).unwrap();
    assert_eq!(net.infer(&x, Mode::Eval).unwrap().data(), &[3.0, -2.0]);
}

#[test]
fn identity_and_zero_combinations() {
    let mut net = single(perturb_spec(3, 3, 2, 2));
    net.masks.override_values("p", Tensor::zeros(&[3, 2, 2])).unwrap();
    set(&mut net, "p.weight", Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = random(&[2, 3, 2, 2], 1);
    assert!(net.infer(&x, Mode::Eval).unwrap().bit_eq(&x.map(|v| v.max(0.0))));

    let mut net = single(perturb_spec(3, 2, 2, 2));
    set(&mut net, "p.weight", Tensor::zeros(&[2, 3]));
    assert!(net.infer(&x, Mode::Eval).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn decomposition_into_weighted_channel_terms() {
    let (inp, out, h, w) = (4, 3, 3, 2);
    let mut net = single(perturb_spec(inp, out, h, w));
    let x = random(&[2, inp, h, w], 5);
    let y = net.infer(&x, Mode::Eval).unwrap();
    let masks = net.masks.get("p").unwrap().stacked.clone();
    let v = net.params.get("p.weight").unwrap().clone();
    let plane = h * w;
    let mut want = vec![0.0; 2 * out * plane];
    for b in 0..2 {
        for i in 0..inp {
            let a: Vec<f64> = (0..plane)
                .map(|p| (x.data()[(b * inp + i) * plane + p] + masks.data()[i * plane + p]).max(0.0))
                .collect();
            for t in 0..out {
                for p in 0..plane {
                    want[(b * out + t) * plane + p] += v.data()[t * inp + i] * a[p];
                }
            }
        }
    }
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masks_come_from_their_keys() {
    let net = single(perturb_spec(3, 2, 4, 4));
    let layer = net.masks.get("p").unwrap();
    for (c, key) in layer.keys.iter().enumerate() {
        assert_eq!(key.channel as usize, c);
        assert_eq!(key.layer_id, 3);
        let m = make_mask(key).unwrap();
        assert_eq!(&layer.stacked.data()[c * 16..(c + 1) * 16], m.data());
    }
}

#[test]
fn masks_receive_no_gradient() {
    let mut net = single(perturb_spec(2, 2, 2, 2));
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &net.params);
    let x = tape.constant(random(&[2, 2, 2, 2], 9));
    let y = net.forward_bound(&mut tape, &bound, x, Mode::Train).unwrap();
    let s = tape.sum(y).unwrap();
    // The weight is the only trainable leaf; asking for it must succeed and
    // nothing in the network changes the masks.
    let before = net.masks.get("p").unwrap().stacked.clone();
    let g = gradient(&mut tape, s, &ordered(&bound, &net.params)).unwrap();
    assert_eq!(g.len(), 1);
    assert!(net.masks.get("p").unwrap().stacked.bit_eq(&before));
}

fn tpm_model(inp: usize, out: usize, h: usize, norm: bool) -> ModelSpec {
    let m = ModuleSpec {
        inp,
        out,
        masks: 1,
        act: Act::Relu,
        layer: 0,
        height: h,
        width: h,
        norm,
    };
    model(vec![inp, h, h], vec![out, 2 * h, 2 * h], vec![Block::Tpm { path: "t".into(), m }])
}

#[test]
fn transposed_layer_is_perturbation_after_bilinear() {
    let (inp, out, h) = (3, 2, 2);
    let mut tpm = Net::new(tpm_model(inp, out, h, false), 4, MaskConfig::default()).unwrap();
    let mut plain = single(PerturbSpec {
        layer: 0,
        ..perturb_spec(inp, out, 2 * h, 2 * h)
    });
    set(&mut plain, "p.weight", tpm.params.get("t.p.weight").unwrap().clone());
    assert!(plain.masks.get("p").unwrap().stacked.bit_eq(&tpm.masks.get("t.p").unwrap().stacked));
    let x = random(&[2, inp, h, h], 2);
    let up = kernels::upsample_bilinear(&x).unwrap();
    // The module applies its activation once more after the layer; relu is idempotent.
    let a = tpm.infer(&x, Mode::Eval).unwrap();
    let b = plain.infer(&up, Mode::Eval).unwrap().map(|v| v.max(0.0));
    assert!(a.bit_eq(&b));
}

#[test]
fn transposed_examples() {
    let mut net = Net::new(tpm_model(1, 1, 1, false), 0, MaskConfig::default()).unwrap();
    net.masks.override_values("t.p", Tensor::zeros(&[1, 2, 2])).unwrap();
    set(&mut net, "t.p.weight", Tensor::new(vec![1, 1], vec![1.5]).unwrap());
    let y = net.infer(&Tensor::full(&[1, 1, 1, 1], 0.4), Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));

    let mut net = Net::new(tpm_model(1, 1, 2, false), 0, MaskConfig::default()).unwrap();
    net.masks.override_values("t.p", Tensor::zeros(&[1, 4, 4])).unwrap();
    set(&mut net, "t.p.weight", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 2.0, 2.0, 4.0]).unwrap();
    let y = net.infer(&x, Mode::Eval).unwrap();
    // Row [0, 2] upsamples to [0, 0.5, 1.5, 2]; the 2-D map is separable.
    let r = [0.0, 0.5, 1.5, 2.0];
    for i in 0..4 {
        for j in 0..4 {
            assert!((y.data()[i * 4 + j] - (r[i] + r[j])).abs() < 1e-15);
        }
    }
    set(&mut net, "t.p.weight", Tensor::zeros(&[1, 1]));
    assert!(net.infer(&x, Mode::Eval).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn module_shape_contracts() {
    let mut tpm = Net::new(tpm_model(4, 6, 4, true), 0, MaskConfig::default()).unwrap();
    let y = tpm.infer(&random(&[3, 4, 4, 4], 1), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[3, 6, 8, 8]);

    let m = ModuleSpec {
        inp: 4,
        out: 8,
        masks: 1,
        act: Act::LeakyRelu(0.2),
        layer: 0,
        height: 8,
        width: 8,
        norm: false,
    };
    let spec = model(vec![4, 8, 8], vec![8, 4, 4], vec![Block::Drpm { path: "d".into(), m }]);
    let mut d = Net::new(spec, 0, MaskConfig::default()).unwrap();
    assert_eq!(d.infer(&random(&[2, 4, 8, 8], 3), Mode::Train).unwrap().shape(), &[2, 8, 4, 4]);
}

#[test]
fn residual_module_with_zero_branch_is_its_skip_path() {
    for (inp, out) in [(4, 4), (4, 6)] {
        let m = ModuleSpec {
            inp,
            out,
            masks: 1,
            act: Act::Relu,
            layer: 0,
            height: 4,
            width: 4,
            norm: false,
        };
        let spec = model(vec![inp, 4, 4], vec![out, 4, 4], vec![Block::Grpm { path: "g".into(), m }]);
        let mut net = Net::new(spec, 2, MaskConfig::default()).unwrap();
        set(&mut net, "g.p1.weight", Tensor::zeros(&[out, inp]));
        set(&mut net, "g.p2.weight", Tensor::zeros(&[out, out]));
        let x = random(&[2, inp, 4, 4], 8);
        let skip = if inp == out {
            x.clone()
        } else {
            kernels::channel_combine(&x, net.params.get("g.shortcut.weight").unwrap(), false).unwrap()
        };
        let y = net.infer(&x, Mode::Eval).unwrap();
        assert!(y.bit_eq(&skip.map(|v| v.max(0.0))), "{inp}->{out}");
    }
}

#[test]
fn parameter_law_one_over_k_squared() {
    for (p, q) in [(4, 8), (64, 64), (256, 128)] {
        let perturb = perturb_spec(p, q, 4, 4).param_count();
        let conv = model(
            vec![p, 4, 4],
            vec![q, 4, 4],
            vec![Block::Conv {
                path: "c".into(),
                inp: p,
                out: q,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            }],
        )
        .param_count();
        assert_eq!(perturb * 9, conv, "({p}, {q})");
    }
    assert_eq!(perturb_spec(4, 8, 1, 1).param_count(), 32);
    assert_eq!(ParamStore::new().count(), 0);
}

#[test]
fn nearest_upsample_block() {
    let spec = model(vec![1, 2, 2], vec![1, 4, 4], vec![Block::Upsample(UpMode::Nearest)]);
    let mut net = Net::new(spec, 0, MaskConfig::default()).unwrap();
    let y = net
        .infer(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Mode::Eval)
        .unwrap();
    assert_eq!(
        y.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn uniform_masks_change_with_kind() {
    let spec = perturb_spec(2, 2, 4, 4);
    let m = model(vec![2, 4, 4], vec![2, 4, 4], vec![Block::Perturb { path: "p".into(), spec }]);
    let snd = Net::new(m.clone(), 0, MaskConfig::default()).unwrap();
    let ud = Net::new(
        m,
        0,
        MaskConfig {
            seed: 0,
            rng: RngKind::Lc,
            dist: DistKind::Ud,
        },
    )
    .unwrap();
    let a = &snd.masks.get("p").unwrap().stacked;
    let b = &ud.masks.get("p").unwrap().stacked;
    assert!(!a.bit_eq(b));
    assert!(b.data().iter().all(|v| (0.0..1.0).contains(v) || (-1.0..1.0).contains(v)));
}

proptest! {
    #[test]
    fn bilinear_stays_within_input_range(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let x = random(&[1, 2, h, w], seed);
        let y = kernels::upsample_bilinear(&x).unwrap();
        prop_assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12);
    }

    #[test]
    fn perturbation_output_is_linear_in_weights(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut net = single(perturb_spec(3, 2, 2, 2));
        let x = random(&[2, 3, 2, 2], seed);
        let v = random(&[2, 3], seed ^ 1);
        set(&mut net, "p.weight", v.clone());
        let y1 = net.infer(&x, Mode::Eval).unwrap();
        set(&mut net, "p.weight", v.map(|e| a * e));
        let y2 = net.infer(&x, Mode::Eval).unwrap();
        for (p, q) in y1.data().iter().zip(y2.data()) {
            prop_assert!((a * p - q).abs() < 1e-12);
        }
    }
}
