use radgan_core::audio::{MelConfig, MelTransform, SpectrogramConfig};
use radgan_core::data::{split_ids, synthesize_corpus, DegradationSpec, SplitRule, TaskTag};
use radgan_core::evaluation::{evaluate_pair, MetricReport, ProviderRegistry};
use radgan_core::fusion_gate::{fuse, init_gate};
use radgan_core::generator::{Generator, GeneratorConfig};
use radgan_core::instrumentation::snapshot;
use radgan_core::rng::seeded;
use radgan_core::training::{run_until, AblationFlags, Finetuner, Phase, Pretrainer, TrainingConfig};
use radgan_core::wvn::{WvnConfig, WvnModel};
use radgan_core::SAMPLE_RATE;

#[test]
fn corpus_to_enhanced_waveform() {
    let data = synthesize_corpus(8, 2048, &DegradationSpec::default(), 11).unwrap();
    let ids: Vec<String> = data.iter().map(|p| p.id.clone()).collect();
    let split = split_ids(&ids, SplitRule::Ratio(0.875)).unwrap();
    assert_eq!((split.train.len(), split.validation.len()), (7, 1));

    let cfg = TrainingConfig {
        max_steps: 4,
        ..TrainingConfig::toy(Phase::Pretrain)
    };
    let mut pre = Pretrainer::new(cfg.clone()).unwrap();
    let mut logs = Vec::new();
    run_until(&mut pre, &data, u64::MAX, &mut |l| logs.push(*l)).unwrap();
    assert_eq!(logs.len(), 4);
    assert!(logs.iter().all(|l| l.total.is_finite() && l.adv.is_none()));

    let mel = MelTransform::new(SAMPLE_RATE, cfg.stft, MelConfig::conditioning()).unwrap();
    let wvn = WvnModel::new(WvnConfig::toy(), &mut seeded(2)).unwrap();
    let noisy = &data[0].noisy;
    let m_n = mel.compute(noisy).unwrap();
    let m_w = mel.compute(&wvn.enhance(noisy).unwrap()).unwrap();
    let fused = fuse(&m_n, &m_w, &init_gate(m_n.n_mels(), &mut seeded(3)).unwrap()).unwrap();
    let y = pre.generator.synthesize(&fused).unwrap();
    assert_eq!(y.len(), cfg.generator.hop() * m_n.frames());

    let report = MetricReport::from_pairs(vec![evaluate_pair(
        "0",
        TaskTag::Synthetic,
        &data[0].clean,
        &data[0].clean,
        &ProviderRegistry::new(),
    )
    .unwrap()]);
    assert_eq!(report.per_task[&TaskTag::Synthetic].mel_l1, 0.0);
    assert!(report.weighted_score.is_none());
}

#[test]
fn ablation_without_mmd_builds_two_families() {
    let data = synthesize_corpus(4, 2048, &DegradationSpec::default(), 12).unwrap();
    let cfg = TrainingConfig {
        max_steps: 2,
        ablation: AblationFlags::B0,
        ..TrainingConfig::toy(Phase::Finetune)
    };
    let before = snapshot();
    let mut ft = Finetuner::new(cfg, None, None).unwrap();
    run_until(&mut ft, &data, u64::MAX, &mut |l| assert!(l.disc.unwrap().is_finite())).unwrap();
    let built = snapshot().since(&before);
    assert_eq!((built.mpd, built.msd, built.mmd), (1, 1, 0));
    assert!(ft.gate.is_none() && ft.wvn.is_none());
}

#[test]
fn paper_and_toy_framings_share_the_frame_law() {
    for (g, s) in [
        (GeneratorConfig::paper(), SpectrogramConfig::paper()),
        (GeneratorConfig::toy(), SpectrogramConfig::new(512, 32, 256).unwrap()),
    ] {
        assert_eq!(g.hop(), s.hop);
        let gen = Generator::new(g.clone(), &mut seeded(1)).unwrap();
        let mel = MelTransform::new(SAMPLE_RATE, s, MelConfig::conditioning()).unwrap();
        let w = synthesize_corpus(1, 1000, &DegradationSpec::default(), 4)
            .unwrap()
            .remove(0)
            .noisy;
        let m = mel.compute(&w).unwrap();
        assert_eq!(m.frames(), 1000 / s.hop + 1);
        if g == GeneratorConfig::toy() {
            assert_eq!(gen.synthesize(&m).unwrap().len(), s.hop * m.frames());
        }
    }
}
