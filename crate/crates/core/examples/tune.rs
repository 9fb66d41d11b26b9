use std::time::Instant;

use any2any::backbone::BackboneConfig;
use any2any::checkpoint::ModelState;
use any2any::codec::{estimate_scale, CodecConfig};
use any2any::dataset::{ingest_directory, make_paired_dataset, PairProtocol};
use any2any::diffusion::NoiseSchedule;
use any2any::metrics::{psnr, to_display_range};
use any2any::registry::{ModalityId, Registry};
use any2any::sampling::{translate, SampleConfig};
use any2any::synth::{generate_scene, render_modality};
use any2any::training::{train_stage2, train_vae, TrainConfig};
use any2any::Tensor;

fn main() {
    let registry = Registry::desk_default();
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    // 1. scene gen timing
    if mode == "all" || mode == "scenes" {
        let t0 = Instant::now();
        let n = 64;
        for seed in 0..n {
            let scene = generate_scene(seed, 64, 64).unwrap();
            for (_, spec) in registry.iter() {
                let _ = render_modality(&scene, spec).unwrap();
            }
        }
        println!("scene+render x{n}: {:?} ({:?}/scene)", t0.elapsed(), t0.elapsed() / n as u32);
    }

    // 2. VAE step timing + quality trajectory
    if mode == "all" || mode == "vae" {
        for (name, bw, steps) in [("RGB", 8usize, 400usize), ("PAN", 8, 200)] {
            let id = registry.id(name).unwrap();
            let spec = registry.spec(id).unwrap().clone();
            let images: Vec<Tensor<f32>> = (0..64)
                .map(|s| {
                    let scene = generate_scene(s, 64, 64).unwrap();
                    render_modality(&scene, &spec).unwrap()
                })
                .collect();
            let mut model = ModelState::<f32>::init_uniform(
                Registry::desk_default(),
                BackboneConfig::micro(),
                CodecConfig { base_width: bw, ..CodecConfig::default() },
                NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
                7,
                1.0,
            )
            .unwrap();
            let mut cfg = TrainConfig::stage1(steps, 7);
            cfg.lr = 2e-3;
            let t0 = Instant::now();
            let mut last = 0.0;
            train_vae(&mut model, id, &images, &cfg, |r| last = r.l_z0).unwrap();
            let per = t0.elapsed() / steps as u32;
            // round-trip PSNR over 8 held-out images
            let mut rng = rand::rngs::mock::StepRng::new(0, 1);
            let mut ps = Vec::new();
            for s in 100..108 {
                let scene = generate_scene(s, 64, 64).unwrap();
                let img = render_modality(&scene, &spec).unwrap();
                let mut b = vec![1usize];
                b.extend_from_slice(img.shape());
                let batch = Tensor::new(b, img.data().to_vec());
                let (z, _) = model.codecs[id.0].encode(&batch, false, &mut rng).unwrap();
                let rec = model.codecs[id.0].decode(&z).unwrap();
                ps.push(psnr(&to_display_range(&rec), &to_display_range(&batch)).unwrap());
            }
            let mean = ps.iter().sum::<f64>() / ps.len() as f64;
            println!(
                "vae {name} bw={bw} steps={steps}: {per:?}/step, final rec loss {last:.5}, holdout psnr {mean:.2} dB"
            );
        }
    }

    // 3. stage-II step timing for candidate backbones
    if mode == "all" || mode == "stage2" {
        let dir = std::env::temp_dir().join("a2a_tune_ds");
        let _ = std::fs::remove_dir_all(&dir);
        make_paired_dataset(&registry, 0..48, &PairProtocol::seven_pair(), &dir, 64).unwrap();
        let dataset = ingest_directory(&registry, &dir).unwrap();
        for (label, cfg) in [
            ("d64x3", BackboneConfig { patch: 2, width: 64, depth: 3, heads: 4, mlp_ratio: 2, trainable_modality_embeddings: true }),
            ("d48x2", BackboneConfig { patch: 2, width: 48, depth: 2, heads: 4, mlp_ratio: 2, trainable_modality_embeddings: true }),
            ("d128x6", BackboneConfig::default()),
        ] {
            let mut model = ModelState::<f32>::init_uniform(
                Registry::desk_default(),
                cfg,
                CodecConfig { base_width: 8, ..CodecConfig::default() },
                NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
                7,
                1.0,
            )
            .unwrap();
            let ids: Vec<ModalityId> = model.registry.iter().map(|(i, _)| i).collect();
            for id in ids {
                model.registry.set_scale_factor(id, 0.5).unwrap();
            }
            let dirs = model.registry.default_trained_set().unwrap();
            let dirs: Vec<(ModalityId, ModalityId)> = dirs.into_iter().collect();
            let steps = 30;
            let mut tc = TrainConfig::stage2(steps, dirs, 7);
            tc.batch_size = 8;
            let t0 = Instant::now();
            train_stage2(&mut model, &dataset, &tc, |_| {}).unwrap();
            println!("stage2 {label} batch8: {:?}/step", t0.elapsed() / steps as u32);

            // eval timing: one direction, batch 8, 50 ddim steps
            let src = model.registry.id("SAR").unwrap();
            let tgt = model.registry.id("RGB").unwrap();
            let spec = model.registry.spec(src).unwrap().clone();
            let imgs: Vec<Tensor<f32>> = (200..208)
                .map(|s| render_modality(&generate_scene(s, 64, 64).unwrap(), &spec).unwrap())
                .collect();
            let mut data = Vec::new();
            for im in &imgs {
                data.extend_from_slice(im.data());
            }
            let batch = Tensor::new(
                vec![8, spec.channels, spec.native_size, spec.native_size],
                data,
            );
            let t1 = Instant::now();
            let _ = translate(&model, &batch, src, tgt, &SampleConfig { steps: 50, eta: 0.0, seed: 0 })
                .unwrap();
            println!("  translate {label} batch8 steps50: {:?}", t1.elapsed());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    // full dress rehearsal of the acceptance end-to-end run
    if mode == "e2e" {
        let t_all = Instant::now();
        let bb: BackboneConfig = Default::default();
        let vae_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
        let s2_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8000);
        let s2_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

        let dir = std::env::temp_dir().join("a2a_e2e_ds");
        let _ = std::fs::remove_dir_all(&dir);
        let t0 = Instant::now();
        make_paired_dataset(&registry, 0..512, &PairProtocol::seven_pair(), &dir, 64).unwrap();
        let dataset = ingest_directory(&registry, &dir).unwrap();
        println!("dataset 512 scenes: {:?}", t0.elapsed());

        let mut model = ModelState::<f32>::init(
            registry.clone(),
            bb,
            registry
                .iter()
                .map(|(_, spec)| CodecConfig {
                    base_width: 8,
                    gamma: if spec.name == "RGB" { 1.0 } else { 0.0 },
                    ..CodecConfig::default()
                })
                .collect(),
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            7,
            1.0,
        )
        .unwrap();

        // stage 1
        let t0 = Instant::now();
        let ids: Vec<ModalityId> = registry.iter().map(|(i, _)| i).collect();
        for &id in &ids {
            let rows = dataset.images_of(id);
            let images: Vec<Tensor<f32>> = rows.iter().map(|&r| dataset.image(r).clone()).collect();
            let steps = if model.registry.name(id).unwrap() == "PAN" { vae_steps * 2 } else { vae_steps };
            let mut cfg = TrainConfig::stage1(steps, 7 + id.0 as u64);
            cfg.lr = 2e-3;
            train_vae(&mut model, id, &images, &cfg, |_| {}).unwrap();
        }
        println!("stage1 5 codecs: {:?}", t0.elapsed());

        // round-trip psnr per codec on held-out scenes
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        for &id in &ids {
            let spec = model.registry.spec(id).unwrap().clone();
            let mut ps = Vec::new();
            for s in 512..520 {
                let img = render_modality(&generate_scene(s, 64, 64).unwrap(), &spec).unwrap();
                let mut b = vec![1usize];
                b.extend_from_slice(img.shape());
                let batch = Tensor::new(b, img.data().to_vec());
                let (z, _) = model.codecs[id.0].encode(&batch, false, &mut rng).unwrap();
                let rec = model.codecs[id.0].decode(&z).unwrap();
                ps.push(psnr(&to_display_range(&rec), &to_display_range(&batch)).unwrap());
            }
            println!("  codec {} round-trip: {:.2} dB", spec.name, ps.iter().sum::<f64>() / 8.0);
        }

        // scales
        for &id in &ids {
            let rows = dataset.images_of(id);
            let mut latents = Vec::new();
            for &r in &rows {
                let img = dataset.image(r);
                let mut b = vec![1usize];
                b.extend_from_slice(img.shape());
                let batch = Tensor::new(b, img.data().to_vec());
                let (z, _) = model.codecs[id.0].encode(&batch, false, &mut rng).unwrap();
                latents.push(z);
            }
            let s = estimate_scale(&latents).unwrap();
            model.registry.set_scale_factor(id, s).unwrap();
            println!("  scale {} = {s:.4}", model.registry.name(id).unwrap());
        }

        // stage 2
        let dirs: Vec<(ModalityId, ModalityId)> =
            model.registry.default_trained_set().unwrap().into_iter().collect();
        let mut tc = TrainConfig::stage2(s2_steps, dirs, 7);
        tc.lr = s2_lr;
        let t0 = Instant::now();
        let mut losses = Vec::new();
        train_stage2(&mut model, &dataset, &tc, |r| {
            if r.step % 500 == 0 {
                losses.push((r.step, r.l_z0));
            }
        })
        .unwrap();
        println!("stage2 {s2_steps} steps lr={s2_lr}: {:?}", t0.elapsed());
        for (s, l) in &losses {
            print!(" {s}:{l:.4}");
        }
        println!();

        // eval all 20 directions on 12 held-out scenes
        let t0 = Instant::now();
        let test: Vec<Tensor<f32>> = ids
            .iter()
            .map(|&id| {
                let spec = model.registry.spec(id).unwrap().clone();
                let mut data = Vec::new();
                for s in 512..524 {
                    let img =
                        render_modality(&generate_scene(s, 64, 64).unwrap(), &spec).unwrap();
                    data.extend_from_slice(img.data());
                }
                Tensor::new(
                    vec![12, spec.channels, spec.native_size, spec.native_size],
                    data,
                )
            })
            .collect();
        let sc = SampleConfig { steps: 50, eta: 0.0, seed: 0 };
        let reports =
            any2any::metrics::evaluate_all_directions(&model, &test, &sc).unwrap();
        println!("eval 20 dirs: {:?}", t0.elapsed());
        for r in &reports {
            let tgt_name = r.direction.split(':').nth(1).unwrap();
            let tgt_id = model.registry.id(tgt_name).unwrap();
            let cm = any2any::metrics::constant_mean_psnr(&test[tgt_id.0]).unwrap();
            let rn = any2any::metrics::random_noise_psnr(&test[tgt_id.0], 0).unwrap();
            println!(
                "  {} {} psnr {:.2} ssim {:.3} | const-mean {:.2} (+3={:.2}) noise {:.2}",
                r.direction, r.status, r.psnr_mean, r.ssim_mean, cm, cm + 3.0, rn
            );
        }
        println!("e2e total: {:?}", t_all.elapsed());
        let _ = std::fs::remove_dir_all(&dir);
    }

    // 4. scale estimation cost
    if mode == "all" || mode == "scales" {
        let id = registry.id("RGB").unwrap();
        let spec = registry.spec(id).unwrap().clone();
        let model = ModelState::<f32>::init_uniform(
            Registry::desk_default(),
            BackboneConfig::micro(),
            CodecConfig { base_width: 8, ..CodecConfig::default() },
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            7,
            1.0,
        )
        .unwrap();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let t0 = Instant::now();
        let mut latents = Vec::new();
        for s in 0..256 {
            let img = render_modality(&generate_scene(s, 64, 64).unwrap(), &spec).unwrap();
            let mut b = vec![1usize];
            b.extend_from_slice(img.shape());
            let batch = Tensor::new(b, img.data().to_vec());
            let (z, _) = model.codecs[id.0].encode(&batch, false, &mut rng).unwrap();
            latents.push(z);
        }
        let s = estimate_scale(&latents).unwrap();
        println!("scales 256 latents: {:?}, s={s:.4}", t0.elapsed());
    }
}
