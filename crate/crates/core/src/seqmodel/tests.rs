use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradient_check, Graph, Tensor, Var};
use crate::corpus::{ProcessedExample, Vocabulary, BOS, EOS};
use crate::rng::{stream, Purpose};

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

fn gru_consts(g: &mut Graph<'static>, tensors: &[Tensor]) -> GruVars {
    let v: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    GruVars {
        w: [v[0], v[1], v[2]],
        u: [v[3], v[4], v[5]],
        b: [v[6], v[7], v[8]],
    }
}

fn gru_tensors(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for _ in 0..3 {
        out.push(rand_tensor(rng, input, hidden, 0.8));
    }
    for _ in 0..3 {
        out.push(rand_tensor(rng, hidden, hidden, 0.8));
    }
    for _ in 0..3 {
        out.push(rand_tensor(rng, 1, hidden, 0.3));
    }
    out
}

fn small_config(variant: crate::attention::AttentionVariant, cvae: bool) -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            vocab: 11,
            embed: 5,
            hidden: 4,
            latent: 3,
            recognition: 6,
            feature_maps: 3,
        },
        variant,
        cvae,
        z_injection: ZInjection::PerStep,
    }
}

fn zeroed(model: &mut Model) {
    for (_, t) in model.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn gru_cell_fixed_points() {
    let mut g = Graph::new();
    let zeros: Vec<Tensor> = (0..9)
        .map(|k| match k {
            0..=2 => Tensor::zeros(&[2, 3]),
            3..=5 => Tensor::zeros(&[3, 3]),
            _ => Tensor::zeros(&[1, 3]),
        })
        .collect();
    let p = gru_consts(&mut g, &zeros);
    let x = g.constant(Tensor::row(vec![0.4, -0.9]));
    let h = g.constant(Tensor::row(vec![1.0; 3]));
    let out = gru_cell(&mut g, x, h, &p).unwrap();
    assert_eq!(g.value(out).data(), &[0.5; 3]);
    let h0 = g.constant(Tensor::row(vec![0.0; 3]));
    let out = gru_cell(&mut g, x, h0, &p).unwrap();
    assert_eq!(g.value(out).data(), &[0.0; 3]);

    let bad = g.constant(Tensor::row(vec![1.0; 4]));
    assert!(gru_cell(&mut g, x, bad, &p).is_err());
}

#[test]
fn gru_cell_matches_stated_equations() {
    let mut rng = stream(1, Purpose::Synthetic, 0);
    let ts = gru_tensors(&mut rng, 2, 3);
    let mut g = Graph::new();
    let p = gru_consts(&mut g, &ts);
    let (xv, hv) = (vec![0.3, -0.7], vec![0.2, -0.1, 0.5]);
    let x = g.constant(Tensor::row(xv.clone()));
    let h = g.constant(Tensor::row(hv.clone()));
    let out = gru_cell(&mut g, x, h, &p).unwrap();
    let lin = |v: &[f64], m: &Tensor, j: usize| (0..v.len()).map(|i| v[i] * m.get(i, j)).sum::<f64>();
    let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
    let z: Vec<f64> = (0..3).map(|j| sig(lin(&xv, &ts[0], j) + lin(&hv, &ts[3], j) + ts[6].data()[j])).collect();
    let r: Vec<f64> = (0..3).map(|j| sig(lin(&xv, &ts[1], j) + lin(&hv, &ts[4], j) + ts[7].data()[j])).collect();
    let rh: Vec<f64> = (0..3).map(|j| r[j] * hv[j]).collect();
    let c: Vec<f64> = (0..3).map(|j| (lin(&xv, &ts[2], j) + lin(&rh, &ts[5], j) + ts[8].data()[j]).tanh()).collect();
    for j in 0..3 {
        let expected = (1.0 - z[j]) * hv[j] + z[j] * c[j];
        assert!((g.value(out).data()[j] - expected).abs() < 1e-14);
    }
}

#[test]
fn gru_cell_gradient_through_three_steps() {
    let mut rng = stream(2, Purpose::Synthetic, 0);
    let ts = gru_tensors(&mut rng, 2, 3);
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 1, 2, 1.0)).collect();
    for which in 0..ts.len() {
        let err = gradient_check(
            |g, v| {
                let mut vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
                vars[which] = v;
                let p = GruVars {
                    w: [vars[0], vars[1], vars[2]],
                    u: [vars[3], vars[4], vars[5]],
                    b: [vars[6], vars[7], vars[8]],
                };
                let mut h = g.constant(Tensor::row(vec![0.1, -0.2, 0.3]));
                for x in &xs {
                    let x = g.constant(x.clone());
                    h = gru_cell(g, x, h, &p)?;
                }
                let hh = g.mul(h, h)?;
                Ok::<_, SeqModelError>(g.sum_all(hh)?)
            },
            &ts[which],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gru tensor {which}: {err}");
    }
}

#[test]
fn encoders_shapes_and_zero_parameters() {
    use crate::attention::AttentionVariant::*;
    let mut model = Model::init(ModelConfig::new(30, Parallel, true), 5).unwrap();
    {
        let mut g = Graph::new();
        let vars = model.bind_frozen(&mut g).unwrap();
        let hc = encode_context(&mut g, &[5, 6, 7, 8, 9], vars.embedding, &vars.ctx_layers, &vars.ctx_proj).unwrap();
        assert_eq!(g.value(hc).shape(), &[5, 128]);
        let hf = encode_facts(
            &mut g,
            &[5, 6, 7, 8, 9, 10, 11],
            vars.embedding,
            &vars.fact_convs,
            vars.fact_proj.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(g.value(hf).shape(), &[7, 128]);
        let r = encode_response(&mut g, &[5, 6, EOS], vars.embedding, &vars.resp_layers).unwrap();
        assert_eq!(g.value(r).shape(), &[1, 256]);
        let r2 = encode_response(&mut g, &[7, 6, EOS], vars.embedding, &vars.resp_layers).unwrap();
        assert!(g.value(r).max_abs_diff(g.value(r2)) > 1e-6);

        let rev = encode_context(&mut g, &[9, 8, 7, 6, 5], vars.embedding, &vars.ctx_layers, &vars.ctx_proj).unwrap();
        assert!(g.value(hc).max_abs_diff(g.value(rev)) > 1e-6);

        assert!(matches!(
            encode_context(&mut g, &[], vars.embedding, &vars.ctx_layers, &vars.ctx_proj),
            Err(SeqModelError::EmptyInput(_))
        ));
        assert!(matches!(
            encode_facts(&mut g, &[], vars.embedding, &vars.fact_convs, vars.fact_proj.as_ref().unwrap()),
            Err(SeqModelError::EmptyInput(_))
        ));
        assert!(matches!(
            encode_response(&mut g, &[], vars.embedding, &vars.resp_layers),
            Err(SeqModelError::EmptyInput(_))
        ));
        assert!(matches!(
            encode_context(&mut g, &[99], vars.embedding, &vars.ctx_layers, &vars.ctx_proj),
            Err(SeqModelError::TokenRange { id: 99, vocab: 30 })
        ));
    }
    zeroed(&mut model);
    let mut g = Graph::new();
    let vars = model.bind_frozen(&mut g).unwrap();
    let hc = encode_context(&mut g, &[5, 6, 7], vars.embedding, &vars.ctx_layers, &vars.ctx_proj).unwrap();
    assert!(g.value(hc).data().iter().all(|&v| v == 0.0));
    let r = encode_response(&mut g, &[5, EOS], vars.embedding, &vars.resp_layers).unwrap();
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    let state = decoder_init(&mut g, hc, &vars.decoder.init, None).unwrap();
    for h in state {
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn width_one_identity_filter_reproduces_embeddings() {
    // embed 3, one map per input channel, widths 2 and 3 switched off
    let mut g = Graph::new();
    let table = g.constant(Tensor::identity(3));
    let conv1 = Linear {
        w: g.constant(Tensor::identity(3)),
        b: g.constant(Tensor::zeros(&[1, 3])),
    };
    let conv2 = Linear {
        w: g.constant(Tensor::zeros(&[6, 3])),
        b: g.constant(Tensor::zeros(&[1, 3])),
    };
    let conv3 = Linear {
        w: g.constant(Tensor::zeros(&[9, 3])),
        b: g.constant(Tensor::zeros(&[1, 3])),
    };
    let mut pw = Tensor::zeros(&[9, 3]);
    for i in 0..3 {
        pw.set(i, i, 1.0);
    }
    let proj = Linear {
        w: g.constant(pw),
        b: g.constant(Tensor::zeros(&[1, 3])),
    };
    let ids = [2, 0, 1, 2];
    let out = encode_facts(&mut g, &ids, table, &[conv1, conv2, conv3], &proj).unwrap();
    for (pos, &id) in ids.iter().enumerate() {
        for ch in 0..3 {
            let expected = if ch == id { 1f64.tanh() } else { 0.0 };
            assert_eq!(g.value(out).get(pos, ch), expected);
        }
    }
}

#[test]
fn fact_encoder_gradient_on_four_tokens() {
    let mut rng = stream(4, Purpose::Synthetic, 0);
    let (v, e, m, h) = (6, 3, 2, 4);
    let mut ts = vec![rand_tensor(&mut rng, v, e, 1.0)];
    for k in KERNEL_WIDTHS {
        ts.push(rand_tensor(&mut rng, k * e, m, 0.7));
        ts.push(rand_tensor(&mut rng, 1, m, 0.3));
    }
    ts.push(rand_tensor(&mut rng, 3 * m, h, 0.7));
    ts.push(rand_tensor(&mut rng, 1, h, 0.3));
    let target = rand_tensor(&mut rng, 4, h, 1.0);
    for which in 0..ts.len() {
        let err = gradient_check(
            |g, x| {
                let mut vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
                vs[which] = x;
                let convs: Vec<Linear> = (0..3).map(|k| Linear { w: vs[1 + 2 * k], b: vs[2 + 2 * k] }).collect();
                let proj = Linear { w: vs[7], b: vs[8] };
                let out = encode_facts(g, &[1, 4, 4, 2], vs[0], &convs, &proj)?;
                let t = g.constant(target.clone());
                let p = g.mul(out, t)?;
                Ok::<_, SeqModelError>(g.sum_all(p)?)
            },
            &ts[which],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "fact encoder tensor {which}: {err}");
    }
}

#[test]
fn decoder_init_is_mean_pooled() {
    let mut g = Graph::new();
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
    let lin = Linear {
        w: g.constant(w),
        b: g.constant(Tensor::row(vec![0.1, -0.2])),
    };
    let one = g.constant(Tensor::row(vec![0.3, -0.4]));
    let s = decoder_init(&mut g, one, &[lin], None).unwrap();
    let expect1 = [(0.3 * 0.5 - 0.4 * 2.0 + 0.1f64).tanh(), (-0.3 - 0.4 * 0.25 - 0.2f64).tanh()];
    assert!(g.value(s[0]).data().iter().zip(expect1).all(|(a, b)| (a - b).abs() < 1e-15));

    let two = g.constant(Tensor::from_rows(&[vec![0.3, -0.4], vec![0.1, 1.0]]).unwrap());
    let s = decoder_init(&mut g, two, &[lin], None).unwrap();
    let (m0, m1) = (0.2, 0.3);
    let expect2 = [(m0 * 0.5 + m1 * 2.0 + 0.1f64).tanh(), (-m0 + m1 * 0.25 - 0.2f64).tanh()];
    assert!(g.value(s[0]).data().iter().zip(expect2).all(|(a, b)| (a - b).abs() < 1e-15));
}

fn example() -> ProcessedExample {
    ProcessedExample {
        context: vec![5, 6, 4, 7],
        fact: vec![8, 9, 10, 5],
        response: vec![7, 9],
    }
}

#[test]
fn decode_step_distribution_properties() {
    use crate::attention::AttentionVariant;
    for variant in AttentionVariant::ALL {
        for cvae in [false, true] {
            let mut model = Model::init(small_config(variant, cvae), 9).unwrap();
            let z = vec![0.3, -0.2, 1.0];
            let zarg = cvae.then_some(z.as_slice());
            {
                let mut g = Graph::new();
                let vars = model.bind_frozen(&mut g).unwrap();
                let enc = vars.encode(&mut g, &[5, 6], &[7, 8, 9]).unwrap();
                let latent = match zarg {
                    Some(z) => LatentInput::Prior(z),
                    None => LatentInput::None,
                };
                let (zv, _, _) = vars.latent(&mut g, &enc, &[], latent).unwrap();
                let zp = vars.project_latent(&mut g, zv).unwrap();
                let s0 = vars.initial_state(&mut g, &enc, zp).unwrap();
                let (dist, _) = vars.decode_step(&mut g, &enc, &s0, BOS, zp).unwrap();
                let sum: f64 = g.value(dist).data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert_eq!(g.value(dist).shape(), &[1, 11]);
            }
            let out = model.params.get_mut("dec.out.w").unwrap();
            out.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let mut st = model.stepper(&[5, 6], &[7, 8, 9], zarg).unwrap();
            let s0 = st.start().unwrap();
            let (logp, _) = st.step(&s0, BOS).unwrap();
            for lp in &logp {
                assert!((lp + 11f64.ln()).abs() < 1e-12);
            }
            let mut g = Graph::new();
            let vars = model.bind_trainable(&mut g).unwrap();
            let eps = vec![0.1, 0.2, -0.3];
            let latent = if cvae {
                LatentInput::Posterior(&eps)
            } else {
                LatentInput::None
            };
            let loss = vars.example_loss(&mut g, &example(), latent).unwrap();
            assert_eq!(loss.tokens, 3);
            let per_token = g.value(loss.nll).item() / loss.tokens as f64;
            assert!((per_token - 11f64.ln()).abs() < 1e-12);
            assert_eq!(loss.kl.is_some(), cvae);
        }
    }
}

#[test]
fn latent_inputs_must_match_the_model() {
    use crate::attention::AttentionVariant::ContextOnly;
    let plain = Model::init(small_config(ContextOnly, false), 1).unwrap();
    assert!(matches!(plain.stepper(&[5], &[6], Some(&[0.0; 3])), Err(SeqModelError::Latent(_))));
    let latent = Model::init(small_config(ContextOnly, true), 1).unwrap();
    assert!(matches!(latent.stepper(&[5], &[6], None), Err(SeqModelError::Latent(_))));
    assert!(matches!(latent.stepper(&[5], &[6], Some(&[0.0; 2])), Err(SeqModelError::Latent(_))));
    let st = latent.stepper(&[5], &[6], Some(&[0.0; 3])).unwrap();
    assert_eq!(st.path, Some(crate::cvae::LatentPath::Prior));
    let mut g = Graph::new();
    let vars = latent.bind_trainable(&mut g).unwrap();
    let loss = vars
        .example_loss(&mut g, &example(), LatentInput::Posterior(&[0.0; 3]))
        .unwrap();
    assert_eq!(loss.path, Some(crate::cvae::LatentPath::Posterior));
}

#[test]
fn parameter_sets_follow_the_configuration() {
    use crate::attention::AttentionVariant::*;
    let names = |v, c| -> Vec<String> {
        ModelConfig::new(20, v, c)
            .parameter_specs()
            .into_iter()
            .map(|s| s.name)
            .collect()
    };
    let base = names(Baseline, false);
    assert!(!base.iter().any(|n| n.starts_with("attn.") || n.starts_with("fact_enc") || n.starts_with("cvae")));
    let cg = names(ContextGuided, true);
    for n in ["attn.c.v", "attn.g.w1", "attn.o.w2", "cvae.z_proj.w", "resp_enc.l1.bwd.u_h", "fact_enc.conv3.w"] {
        assert!(cg.iter().any(|x| x == n), "{n}");
    }
    let mut sorted = cg.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), cg.len());

    let cfg = ModelConfig::new(20, Parallel, false);
    let specs = cfg.parameter_specs();
    let get = |n: &str| specs.iter().find(|s| s.name == n).unwrap().shape.clone();
    assert_eq!(get("embedding"), vec![20, 100]);
    assert_eq!(get("ctx_enc.proj.w"), vec![256, 128]);
    assert_eq!(get("fact_enc.conv2.w"), vec![200, 128]);
    assert_eq!(get("fact_enc.proj.w"), vec![384, 128]);
    assert_eq!(get("dec.l0.w_z"), vec![100 + 256, 128]);
    assert_eq!(get("dec.out.w"), vec![128, 20]);

    let model = Model::init(cfg, 3).unwrap();
    assert!(model.params.check_against(&cfg).is_ok());
    assert!(model.params.check_against(&ModelConfig::new(20, ContextOnly, false)).is_err());
    assert_eq!(Model::init(cfg, 3).unwrap(), model);
    assert_ne!(Model::init(cfg, 4).unwrap(), model);
}

#[test]
fn load_embeddings_examples() {
    let vocab = Vocabulary::from_tokens(["cat", "dog"]);
    let mut rng = stream(1, Purpose::Init, 0);
    let t = load_embeddings(&b""[..], &vocab, 4, &mut rng).unwrap();
    assert_eq!(t.shape(), &[vocab.len(), 4]);
    assert!(t.data().iter().all(|v| v.abs() < EMBEDDING_INIT));

    let file = "cat 1 2 3 4\nunknownword 9 9 9 9\ndog 5 6 7 8\n";
    let t = load_embeddings(file.as_bytes(), &vocab, 4, &mut rng).unwrap();
    assert_eq!(t.row_slice(vocab.id("cat")), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(t.row_slice(vocab.id("dog")), &[5.0, 6.0, 7.0, 8.0]);

    let err = load_embeddings("cat 1 2 3 4\ndog 1 2 3\n".as_bytes(), &vocab, 4, &mut rng).unwrap_err();
    assert!(matches!(err, SeqModelError::EmbeddingDim { line: 2, .. }));
    assert!(err.to_string().contains("dimension mismatch at line 2"));
    let err = load_embeddings("cat 1 x 3 4\n".as_bytes(), &vocab, 4, &mut rng).unwrap_err();
    assert!(matches!(err, SeqModelError::Embedding { line: 1, .. }));
}

#[test]
fn parameters_round_trip_through_text() {
    use crate::attention::AttentionVariant::ContextGuided;
    let model = Model::init(small_config(ContextGuided, true), 8).unwrap();
    let mut buf = Vec::new();
    model.params.write(&mut buf).unwrap();
    let back = ModelParameters::read(&buf[..]).unwrap();
    assert_eq!(back, model.params);
}

/// Every tensor of every configuration, checked on a few coordinates each
/// against central differences of the summed teacher-forced NLL (+ KL).
#[test]
fn full_model_gradient_small_dims() {
    use crate::attention::AttentionVariant;
    let batch = [
        example(),
        ProcessedExample {
            context: vec![9, 4, 6],
            fact: vec![5, 5, 7, 10, 6],
            response: vec![8],
        },
    ];
    let noise = [vec![0.5, -0.3, 0.8], vec![-1.0, 0.2, 0.1]];
    for variant in AttentionVariant::ALL {
        for cvae in [false, true] {
            let cfg = small_config(variant, cvae);
            let mut model = Model::init(cfg, 21).unwrap();
            model.randomize_for_check(21, 2.0);
            for (name, err) in model.loss_gradient_check(&batch, &noise, 1e-5, 4).unwrap() {
                assert!(err < 1e-4, "{variant} cvae={cvae} {name}: {err}");
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    use crate::attention::AttentionVariant::ContextGuided;
    let model = Model::init(small_config(ContextGuided, true), 2).unwrap();
    let z = crate::cvae::sample_prior(&mut stream(2, Purpose::Prior, 0), 3);
    let cfg = BeamConfig {
        beam_width: 3,
        max_len: 6,
        length_normalize: true,
    };
    let a = model.generate(&[5, 6, 7], &[8, 9], Some(&z), &cfg).unwrap();
    let b = model.generate(&[5, 6, 7], &[8, 9], Some(&z), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 6);
    assert!(!a.tokens.contains(&EOS));
}
