use mvx_core::models::{BackboneConfig, TwoStreamConfig, TwoStreamModel, ViTConfig};
use mvx_core::nncore::AdamConfig;
use mvx_core::synth::{generate_session, SynthConfig};
use mvx_core::taxonomy::TargetLabel;
use mvx_core::train::{build_examples, train, window_report, Session, TrainConfig};
use mvx_core::dsp::{AudioChannel, SegmentExtractor};

#[test]
#[ignore]
fn curve() {
    let rate = 16_000;
    let sessions: Vec<Session> = (0..3).map(|i| {
        let s = generate_session(&SynthConfig { sample_rate_hz: rate, duration_s: 15.0, ..SynthConfig::default() }, 1000 + i as u64);
        Session { id: format!("t{i}"),
            ch1: AudioChannel { samples: s.ch1, sample_rate_hz: rate },
            ch2: AudioChannel { samples: s.ch2, sample_rate_hz: rate },
            ann1: s.ann1, ann2: s.ann2 }
    }).collect();
    let mut model = TwoStreamModel::<f32>::new(TwoStreamConfig {
        backbone: BackboneConfig::Vit(ViTConfig { input_h: 257, input_w: 256, patch: 16, dim: 48, blocks: 2, heads: 4, ffn: 192 }),
        stream_proj: 32, n_classes: TargetLabel::COUNT }, 1).unwrap();
    let cfg = TrainConfig { adam: AdamConfig { lr0: 2e-3, ..AdamConfig::default() }, epochs: 20, batch: 8, seed: 7, ..TrainConfig::default() };
    let out = train(&mut model, &sessions, &cfg).unwrap();
    for l in out.log.iter().step_by(4) { println!("epoch {:2} lr {:.5} loss {:.4} devF {:.4}", l.epoch, l.lr, l.loss, l.dev_fscore); }
    println!("best epoch {}", out.best_epoch);
    let ex = SegmentExtractor::new(rate).unwrap();
    let mut train_examples = Vec::new();
    for s in &sessions[..2] {
        let (mut e, _) = build_examples(s, &ex, &cfg).unwrap();
        train_examples.append(&mut e);
    }
    let (rep, acc) = window_report(&model, &train_examples).unwrap();
    println!("train acc {:.4} trainF {:.4}", acc, rep.f);
}

#[test]
#[ignore]
fn error_breakdown() {
    use mvx_core::taxonomy::TargetLabel as TL;
    let rate = 16_000;
    let sessions: Vec<Session> = (0..3).map(|i| {
        let s = generate_session(&SynthConfig { sample_rate_hz: rate, duration_s: 15.0, ..SynthConfig::default() }, 1000 + i as u64);
        Session { id: format!("t{i}"),
            ch1: AudioChannel { samples: s.ch1, sample_rate_hz: rate },
            ch2: AudioChannel { samples: s.ch2, sample_rate_hz: rate },
            ann1: s.ann1, ann2: s.ann2 }
    }).collect();
    let mut model = TwoStreamModel::<f32>::new(TwoStreamConfig {
        backbone: BackboneConfig::Vit(ViTConfig { input_h: 257, input_w: 256, patch: 16, dim: 48, blocks: 2, heads: 4, ffn: 192 }),
        stream_proj: 32, n_classes: TargetLabel::COUNT }, 1).unwrap();
    let cfg = TrainConfig { adam: AdamConfig { lr0: 2e-3, ..AdamConfig::default() }, epochs: 20, batch: 8, seed: 7, ..TrainConfig::default() };
    train(&mut model, &sessions, &cfg).unwrap();
    let ex = SegmentExtractor::new(rate).unwrap();
    let mut train_examples = Vec::new();
    for s in &sessions[..2] {
        let (mut e, _) = build_examples(s, &ex, &cfg).unwrap();
        train_examples.append(&mut e);
    }
    let mut n_noise = 0; let mut noise_ok = 0;
    let mut n_call = 0; let mut kind_ok = 0; let mut caller_ok = 0; let mut exact_ok = 0;
    let mut miss_as_noise = 0;
    for e in &train_examples {
        let (p, _) = model.predict_one(&e.seg1, &e.seg2).unwrap();
        let hyp = TL::from_id(p).unwrap();
        match (e.target, hyp) {
            (TL::Noise, h) => { n_noise += 1; if h.is_noise() { noise_ok += 1; } }
            (TL::Call(t), TL::Call(h)) => {
                n_call += 1;
                if h.kind == t.kind { kind_ok += 1; }
                if h.caller == t.caller { caller_ok += 1; }
                if h == t { exact_ok += 1; }
            }
            (TL::Call(_), TL::Noise) => { n_call += 1; miss_as_noise += 1; }
        }
    }
    println!("noise: {}/{}", noise_ok, n_noise);
    println!("calls: n={} exact={} kind={} caller={} miss_as_noise={}", n_call, exact_ok, kind_ok, caller_ok, miss_as_noise);
}
