use avit_core::autodiff::Graph;
use avit_core::av_instruction::align::{align_loss, AlignBatch};
use avit_core::av_instruction::lm::{template_tokens, TAG as LM_TAG};
use avit_core::av_instruction::*;
use avit_core::checkpoint::Checkpoint;
use avit_core::corpus::*;
use avit_core::tensor::Mat;
use avit_core::trainkit::{grad_check_graph, randn, rng_from};
use proptest::prelude::*;

fn mini_align(vocab: &Vocab) -> AlignConfig {
    AlignConfig {
        d_a: 4,
        d_q: 4,
        q_a: 2,
        l: 4,
        text_width: 4,
        heads: 2,
        blocks: 1,
        max_len: 8,
        ..AlignConfig::default()
    }
    .for_vocab(vocab)
}

fn feats(t: usize, d: usize, seed: u64) -> Mat<f64> {
    let mut rng = rng_from(seed);
    Mat::from_fn(t, d, |_, _| randn(&mut rng))
}

#[test]
fn compressed_speech_has_fixed_shape_and_pooled_mean() {
    let v = Vocab::build();
    let m = AvAlign::<f64>::new(AlignConfig::default().for_vocab(&v)).unwrap();
    for t in [1, 50, 100] {
        let e = m.compress_speech(&feats(t, 32, t as u64)).unwrap();
        assert_eq!(e.rows.shape(), (8, 64));
        let mean = e.rows.mean_rows();
        for (a, b) in mean.data().iter().zip(&e.pooled) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn duplicating_frames_leaves_compression_unchanged() {
    let v = Vocab::build();
    let m = AvAlign::<f64>::new(AlignConfig::default().for_vocab(&v)).unwrap();
    let x = feats(40, 32, 3);
    let doubled = Mat::from_fn(80, 32, |r, c| x.get(r / 2, c));
    let a = m.compress_speech(&x).unwrap();
    let b = m.compress_speech(&doubled).unwrap();
    for (p, q) in a.rows.data().iter().zip(b.rows.data()) {
        assert!((p - q).abs() < 1e-4);
    }
}

#[test]
fn instruction_encoding_is_deterministic_and_synonym_sensitive() {
    let v = Vocab::build();
    let m = AvAlign::<f64>::new(AlignConfig::default().for_vocab(&v)).unwrap();
    let a = "The speaker sounds very happy; lip corners are raised strongly.";
    let b = "The speaker sounds very joyful; lip corners are raised strongly.";
    assert_eq!(m.encode_instruction(a, &v).unwrap(), m.encode_instruction(a, &v).unwrap());
    assert_ne!(m.encode_instruction(a, &v).unwrap(), m.encode_instruction(b, &v).unwrap());
    assert!(m.encode_instruction("the speaker sounds flabbergasted", &v).is_err());
    let (e, unknown) = m.encode_instruction_lenient("the speaker sounds flabbergasted", &v).unwrap();
    assert_eq!(unknown, vec!["flabbergasted".to_string()]);
    assert!(e.iter().all(|x| x.is_finite()));
}

#[test]
fn alignment_loss_passes_gradient_check() {
    let v = Vocab::build();
    let m = AvAlign::<f64>::new(mini_align(&v)).unwrap();
    let batch = AlignBatch {
        feats: vec![feats(5, 4, 1), feats(3, 4, 2), feats(4, 4, 3)],
        tokens: vec![v.encode("the speaker sounds happy").unwrap(), v.encode("brows draw together").unwrap(), v.encode("the speaker sounds calm").unwrap()],
    };
    for symmetric in [false, true] {
        let cfg = AlignConfig { symmetric, ..m.config.clone() };
        let err = grad_check_graph(&m.params, 1e-5, |g, p| align_loss(&m.qformer, &m.text, &cfg, g, p, &batch)).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn alignment_checkpoint_round_trip() {
    let v = Vocab::build();
    let m = AvAlign::<f32>::new(mini_align(&v)).unwrap();
    let bytes = m.to_checkpoint().unwrap().to_bytes();
    let back = AvAlign::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes, align::TAG).unwrap()).unwrap();
    assert_eq!(back.params.flat(), m.params.flat());
    assert!(Checkpoint::from_bytes(&bytes, LM_TAG).is_err());
}

fn mini_lm(v: &Vocab) -> LmConfig {
    LmConfig { l: 4, q_a: 2, d_lm: 16, heads: 2, blocks: 2, ..LmConfig::default() }.for_vocab(v)
}

#[test]
fn lm_logits_are_causal() {
    let v = Vocab::build();
    let lm = TinyLm::<f64>::new(mini_lm(&v)).unwrap();
    let prefix = feats(2, 4, 9);
    let a = v.encode("the speaker sounds happy ; brows go up").unwrap();
    let mut b = a.clone();
    let k = 4;
    for t in b.iter_mut().skip(k) {
        *t = v.id("sad").unwrap();
    }
    let run = |toks: &[usize]| {
        let mut g = Graph::new();
        let lp = lm.lm_params.bind(&mut g, false);
        let pp = lm.proj_params.bind(&mut g, false);
        let x = g.constant(prefix.clone());
        let l = lm.net.logits(&mut g, &lp, &pp, x, toks).unwrap();
        g.value(l).clone()
    };
    let (la, lb) = (run(&a), run(&b));
    // positions up to BOS + prefix + the first k tokens see identical inputs
    for r in 0..(1 + 2 + k) {
        assert_eq!(la.row(r), lb.row(r), "row {r}");
    }
    assert_ne!(la.row(1 + 2 + k), lb.row(1 + 2 + k));
}

#[test]
fn lm_memorizes_a_single_sentence_and_leaves_alignment_untouched() {
    let mut cfg = CorpusConfig { n_records: 24, t_min: 12, t_max: 16, ..CorpusConfig::default() };
    cfg.seed = 5;
    let c = gen_corpus(&cfg).unwrap();
    let mut one = c.records[0].clone();
    one.instruction = InstructionSample { text: "x".into(), tokens: c.records[0].instruction.tokens.clone() };
    let clips = vec![&one];
    let align = AvAlign::<f32>::new(AlignConfig { d_a: cfg.d_a, ..mini_align(&c.vocab) }).unwrap();
    let before = align.to_checkpoint().unwrap().hash();
    let lcfg = LmConfig { pretrain_steps: 60, steps: 60, batch: 2, lr: 5e-3, no_aug: true, ..mini_lm(&c.vocab) };
    let (lm, rep) = train_lm(&clips, &align, &c.vocab, &PromptTemplates::builtin(), &lcfg).unwrap();
    assert_eq!(align.to_checkpoint().unwrap().hash(), before);
    let last = *rep.losses.last().unwrap();
    assert!(last < 0.05 * rep.pretrain_losses[0], "loss {} from {}", last, rep.pretrain_losses[0]);

    let rows = align.compress_speech(&one.features).unwrap().rows;
    let tmpl = template_tokens(&PromptTemplates::builtin(), &c.vocab).unwrap();
    let g1 = lm.generate(&rows, &tmpl[0], &c.vocab, &DecodeConfig::default()).unwrap();
    let g2 = lm.generate(&rows, &tmpl[0], &c.vocab, &DecodeConfig::default()).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(g1.tokens, one.instruction.tokens);
    assert!(!g1.truncated);

    let bytes = lm.to_checkpoint().unwrap().to_bytes();
    let back = TinyLm::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes, LM_TAG).unwrap()).unwrap();
    assert_eq!(back.generate(&rows, &tmpl[0], &c.vocab, &DecodeConfig::default()).unwrap(), g1);
}

#[test]
fn topk_decoding_respects_max_len_and_seed() {
    let v = Vocab::build();
    let lm = TinyLm::<f64>::new(mini_lm(&v)).unwrap();
    let rows = feats(2, 4, 1);
    let dc = DecodeConfig { mode: DecodeMode::TopK, k: 5, seed: 3, max_len: 6 };
    let a = lm.generate(&rows, &[], &v, &dc).unwrap();
    assert!(a.tokens.len() <= 6);
    assert_eq!(a.truncated, a.tokens.len() == 6);
    assert_eq!(lm.generate(&rows, &[], &v, &dc).unwrap(), a);
}

fn loss_of(sims: &[Vec<f64>]) -> f64 {
    // unit vectors whose dot products are the requested similarities: instructions are
    // basis vectors, audio rows are built from the wanted cosines plus a private axis
    let b = sims.len();
    let instr = Mat::from_fn(b, 2 * b, |r, c| if r == c { 1.0 } else { 0.0 });
    let audio = Mat::from_fn(b, 2 * b, |r, c| {
        if c < b {
            sims[r][c]
        } else if c == b + r {
            (1.0 - sims[r].iter().map(|s| s * s).sum::<f64>()).sqrt()
        } else {
            0.0
        }
    });
    let mut g = Graph::new();
    let a = g.constant(audio);
    let i = g.constant(instr);
    let l = contrastive_a2i_loss(&mut g, a, i, 1.0, false).unwrap();
    g.scalar(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn a2i_loss_is_permutation_equivariant(rows in proptest::collection::vec(proptest::collection::vec(-0.5f64..0.5, 4), 4), seed in 0u64..1000) {
        let b = rows.len();
        let perm = avit_core::trainkit::shuffled(b, &mut rng_from(seed));
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| rows[i][j]).collect()).collect();
        prop_assert!((loss_of(&rows) - loss_of(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn a2i_loss_falls_as_the_positive_similarity_rises(s12 in -0.5f64..0.5, s21 in -0.5f64..0.5, s22 in -0.5f64..0.5, lo in -0.5f64..0.0, gap in 0.01f64..0.5) {
        let l = |s11: f64| loss_of(&[vec![s11, s12], vec![s21, s22]]);
        prop_assert!(l(lo + gap) < l(lo));
    }
}
