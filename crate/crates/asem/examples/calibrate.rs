// Scratch calibration harness for the synthetic domain-adaptation
// experiment; prints per-variant metrics so thresholds can be tuned.

use asem::eval::{self, ProbeConfig};
use asem::losses::{GanKind, GanVariant};
use asem::network::{ModelState, NetworkConfig};
use asem::synthdata::{self, Domain, SynthSpec};
use asem::trainer::{self, TrainerConfig};
use std::time::Instant;

fn desk_network(num_speakers: usize) -> NetworkConfig {
    NetworkConfig {
        frame_dim: 8,
        encoder_hidden: vec![32],
        residual_blocks: 1,
        post_pool_widths: [64, 64],
        embedding_dim: std::env::var("EMB").map(|v| v.parse().unwrap()).unwrap_or(16),
        num_speakers,
        disc_widths: vec![32, 32],
        attention_hidden: 16,
        use_batchnorm: std::env::var("BN").map(|v| v != "0").unwrap_or(true),
        aux_head: true,
    }
}

fn desk_trainer(seed: u64) -> TrainerConfig {
    TrainerConfig {
        batch_size: std::env::var("BATCH").map(|v| v.parse().unwrap()).unwrap_or(32),
        chunk_frames_min: std::env::var("CHMIN").map(|v| v.parse().unwrap()).unwrap_or(20),
        chunk_frames_max: std::env::var("CHMAX").map(|v| v.parse().unwrap()).unwrap_or(40),
        samples_per_recording: 10,
        pretrain_epochs: std::env::var("PRE").map(|v| v.parse().unwrap()).unwrap_or(12),
        pretrain_lr: std::env::var("PRELR").map(|v| v.parse().unwrap()).unwrap_or(0.001),
        max_epochs: std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(8),
        patience: std::env::var("PATIENCE").map(|v| v.parse().unwrap()).unwrap_or(8),
        adv_lr: std::env::var("ADVLR").map(|v| v.parse().unwrap()).unwrap_or(0.001),
        disc_lr: std::env::var("DISCLR").ok().map(|v| v.parse().unwrap()),
        gen_lr: std::env::var("GENLR").ok().map(|v| v.parse().unwrap()),
        adv_optimizer: if std::env::var("ADVOPT").map(|v| v == "rmsprop").unwrap_or(false) {
            asem::optim::OptimKind::RmsProp
        } else {
            asem::optim::OptimKind::Sgd
        },
        seed,
        ..TrainerConfig::default()
    }
}

struct Metrics {
    probe: f64,
    target_eer: f64,
    source_eer: f64,
}

fn measure(
    model: &ModelState,
    source: &synthdata::Corpus,
    target: &synthdata::Corpus,
    heldout: &synthdata::Corpus,
    seed: u64,
) -> Metrics {
    let src_table = eval::extract(source, model).unwrap();
    let tgt_table = eval::extract(target, model).unwrap();
    let rows = |t: &eval::EmbeddingTable| -> Vec<Vec<f64>> {
        t.iter().map(|(_, v)| v.clone()).collect()
    };
    let probe = eval::domain_probe(
        &rows(&src_table),
        &rows(&tgt_table),
        &ProbeConfig { seed, ..ProbeConfig::default() },
    )
    .unwrap();

    let tgt_trials = eval::make_trials(target).unwrap();
    let tgt_scores = eval::score_trials(&tgt_trials, &tgt_table).unwrap();
    let target_eer = eval::compute_eer(&tgt_scores, &tgt_trials).unwrap();

    let held_table = eval::extract(heldout, model).unwrap();
    let held_trials = eval::make_trials(heldout).unwrap();
    let held_scores = eval::score_trials(&held_trials, &held_table).unwrap();
    let source_eer = eval::compute_eer(&held_scores, &held_trials).unwrap();

    Metrics {
        probe,
        target_eer,
        source_eer,
    }
}


/// Geometry diagnostics: cluster radii, nearest-source-centroid distances,
/// and accuracy of a threshold on the global mean-difference direction.
fn geometry(model: &ModelState, source: &synthdata::Corpus, target: &synthdata::Corpus) {
    let embed = |c: &synthdata::Corpus| -> Vec<(u32, Vec<f64>)> {
        let table = eval::extract(c, model).unwrap();
        c.recordings
            .iter()
            .map(|r| (r.speaker, table.get(&r.id).unwrap().to_vec()))
            .collect()
    };
    let src = embed(source);
    let tgt = embed(target);
    let dim = src[0].1.len();
    let centroid = |pts: &[&Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for p in pts {
            for (a, b) in c.iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        for a in c.iter_mut() {
            *a /= pts.len() as f64;
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let by_speaker = |pts: &[(u32, Vec<f64>)]| -> Vec<(u32, Vec<f64>, f64)> {
        let speakers: std::collections::BTreeSet<u32> = pts.iter().map(|(s, _)| *s).collect();
        speakers
            .into_iter()
            .map(|spk| {
                let members: Vec<&Vec<f64>> =
                    pts.iter().filter(|(s, _)| *s == spk).map(|(_, v)| v).collect();
                let c = centroid(&members);
                let radius =
                    members.iter().map(|m| dist(m, &c)).sum::<f64>() / members.len() as f64;
                (spk, c, radius)
            })
            .collect()
    };
    let src_clusters = by_speaker(&src);
    let tgt_clusters = by_speaker(&tgt);
    for (spk, c, radius) in &tgt_clusters {
        let nearest = src_clusters
            .iter()
            .map(|(_, sc, _)| dist(c, sc))
            .fold(f64::INFINITY, f64::min);
        println!("  tgt spk {spk}: radius {radius:.3} nearest-src-centroid {nearest:.3}");
    }
    // global linear direction: project on mean(src) - mean(tgt), best threshold
    let all_src: Vec<&Vec<f64>> = src.iter().map(|(_, v)| v).collect();
    let all_tgt: Vec<&Vec<f64>> = tgt.iter().map(|(_, v)| v).collect();
    let (ms, mt) = (centroid(&all_src), centroid(&all_tgt));
    let dir: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
    let project = |v: &Vec<f64>| -> f64 { v.iter().zip(&dir).map(|(a, b)| a * b).sum() };
    let mut projections: Vec<(f64, bool)> = all_src.iter().map(|v| (project(v), true)).collect();
    projections.extend(all_tgt.iter().map(|v| (project(v), false)));
    projections.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total = projections.len() as f64;
    let mut best = 0.0_f64;
    for i in 0..projections.len() {
        let right: usize = projections[i..].iter().filter(|(_, is_src)| *is_src).count();
        let left: usize = projections[..i].iter().filter(|(_, is_src)| !*is_src).count();
        best = best.max((right + left) as f64 / total);
    }
    println!("  global linear direction separability: {best:.3}");
}


/// Separability of chunk-level embeddings (the discriminator's view):
/// best threshold on the mean-difference direction over chunk embeddings.
fn chunk_view(
    model: &ModelState,
    train_source: &synthdata::Corpus,
    target: &synthdata::Corpus,
    cfg: &TrainerConfig,
) {
    let plan = trainer::build_epoch_plan(train_source, Some(target), cfg, 999).unwrap();
    let mut src_emb: Vec<Vec<f64>> = Vec::new();
    let mut tgt_emb: Vec<Vec<f64>> = Vec::new();
    for b in plan.batches.iter().take(8) {
        for (corpus, chunks, out) in [
            (train_source, &b.source, &mut src_emb),
            (target, &b.target, &mut tgt_emb),
        ] {
            for c in chunks {
                let rec = corpus.get(&c.recording).unwrap();
                let dim = rec.frames.shape()[1];
                let data =
                    rec.frames.data()[c.start * dim..(c.start + c.len) * dim].to_vec();
                let frames = asem::Tensor::from_vec(&[1, c.len, dim], data).unwrap();
                let emb =
                    asem::network::embed_batch(model, &frames, asem::network::Mode::Train)
                        .unwrap();
                let norm: f64 = emb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                out.push(emb.data().iter().map(|v| v / norm).collect());
            }
        }
    }
    let dim = src_emb[0].len();
    let mean = |rows: &Vec<Vec<f64>>| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for r in rows {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        for a in m.iter_mut() {
            *a /= rows.len() as f64;
        }
        m
    };
    let (ms, mt) = (mean(&src_emb), mean(&tgt_emb));
    let dir: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
    let project = |v: &Vec<f64>| -> f64 { v.iter().zip(&dir).map(|(a, b)| a * b).sum() };
    let mut projections: Vec<(f64, bool)> = src_emb.iter().map(|v| (project(v), true)).collect();
    projections.extend(tgt_emb.iter().map(|v| (project(v), false)));
    projections.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total = projections.len() as f64;
    let mut best = 0.0_f64;
    for i in 0..projections.len() {
        let right: usize = projections[i..].iter().filter(|(_, is_src)| *is_src).count();
        let left: usize = projections[..i].iter().filter(|(_, is_src)| !*is_src).count();
        best = best.max((right + left) as f64 / total);
    }
    println!("  chunk-level (D view) linear separability: {best:.3} ({} vs {} chunks)", src_emb.len(), tgt_emb.len());

    // recording-level, train-source speakers only (removes the holdout confound)
    let table_src = eval::extract(train_source, model).unwrap();
    let table_tgt = eval::extract(target, model).unwrap();
    let src_rec: Vec<Vec<f64>> = table_src.iter().map(|(_, v)| v.clone()).collect();
    let tgt_rec: Vec<Vec<f64>> = table_tgt.iter().map(|(_, v)| v.clone()).collect();
    let (ms, mt) = (mean(&src_rec), mean(&tgt_rec));
    let dir: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
    let project = |v: &Vec<f64>| -> f64 { v.iter().zip(&dir).map(|(a, b)| a * b).sum() };
    let mut projections: Vec<(f64, bool)> = src_rec.iter().map(|v| (project(v), true)).collect();
    projections.extend(tgt_rec.iter().map(|v| (project(v), false)));
    projections.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total = projections.len() as f64;
    let mut best = 0.0_f64;
    for i in 0..projections.len() {
        let right: usize = projections[i..].iter().filter(|(_, is_src)| *is_src).count();
        let left: usize = projections[..i].iter().filter(|(_, is_src)| !*is_src).count();
        best = best.max((right + left) as f64 / total);
    }
    println!("  recording-level train-source-vs-target separability: {best:.3}");
}

fn main() {
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![1, 2, 3]);
    let t0 = Instant::now();

    for &seed in &seeds {
        let spec = SynthSpec {
            seed,
            speaker_scatter: std::env::var("SCATTER").map(|v| v.parse().unwrap()).unwrap_or(3.0),
            channel_noise: std::env::var("NOISE").map(|v| v.parse().unwrap()).unwrap_or(1.0),
            shift_offset_scale: std::env::var("OFFSET").map(|v| v.parse().unwrap()).unwrap_or(4.0),
            frames_min: std::env::var("FMIN").map(|v| v.parse().unwrap()).unwrap_or(100),
            frames_max: std::env::var("FMAX").map(|v| v.parse().unwrap()).unwrap_or(160),
            ..SynthSpec::default()
        };

        let (source, target) = synthdata::generate(&spec).unwrap();
        let raw_stats = |c: &synthdata::Corpus| -> Vec<Vec<f64>> {
            synthdata::pooled_frame_stats(c).into_iter().map(|(_, v)| v).collect()
        };
        let raw_probe = eval::domain_probe(
            &raw_stats(&source),
            &raw_stats(&target),
            &ProbeConfig { seed, ..ProbeConfig::default() },
        )
        .unwrap();
        println!("seed {seed} raw-frame probe {raw_probe:.3}");
        let cfg = desk_trainer(seed);
        let split = trainer::make_validation_split(&source, &target, &cfg).unwrap();
        let heldout = split
            .validation
            .corpus
            .filter(|r| r.domain == Domain::Source);
        let k = trainer::speaker_label_map(&split.train_source).len();

        let t1 = Instant::now();
        let model = ModelState::init(desk_network(k), seed).unwrap();
        let (baseline, _) = trainer::pretrain(model, &split.train_source, &cfg).unwrap();
        let m = measure(&baseline, &source, &target, &heldout, seed);
        if std::env::var("GEO").is_ok() {
            geometry(&baseline, &source, &target);
        }
        println!(
            "seed {seed} baseline: probe {:.3} tgt_eer {:.3} src_eer {:.3}  ({:.1}s)",
            m.probe,
            m.target_eer,
            m.source_eer,
            t1.elapsed().as_secs_f64()
        );

        let only: Option<String> = std::env::var("VARIANTS").ok();
        for kind in [GanKind::Sgan, GanKind::Lsgan, GanKind::Relgan, GanKind::Gradrev] {
            for aux in [false, true] {
                if let Some(v) = &only {
                    if !v.split(',').any(|x| x == GanVariant { kind, aux }.label()) {
                        continue;
                    }
                }
                let t2 = Instant::now();
                let mut vcfg = cfg.clone();
                vcfg.variant = GanVariant { kind, aux };
                let (adapted, history) = trainer::train(
                    baseline.clone(),
                    &split.train_source,
                    &target,
                    &split.validation,
                    &vcfg,
                )
                .unwrap();
                let m = measure(&adapted, &source, &target, &heldout, seed);
                if std::env::var("GEO").is_ok() && !aux {
                    geometry(&adapted, &source, &target);
                    chunk_view(&adapted, &split.train_source, &target, &vcfg);
                }
                if std::env::var("DUMP").is_ok() && kind == GanKind::Sgan && !aux {
                    for s in history.steps().step_by(30) {
                        println!(
                            "  step {} task {:.3} disc {:.3} gen {:.3}",
                            s.step,
                            s.task,
                            s.disc.unwrap(),
                            s.gen.unwrap()
                        );
                    }
                }
                println!(
                    "seed {seed} {:>12}: probe {:.3} tgt_eer {:.3} src_eer {:.3} val {:.3} epochs {} ({:.1}s)",
                    vcfg.variant.label(),
                    m.probe,
                    m.target_eer,
                    m.source_eer,
                    history.best_val_eer().unwrap(),
                    history.epochs().count(),
                    t2.elapsed().as_secs_f64()
                );
            }
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
