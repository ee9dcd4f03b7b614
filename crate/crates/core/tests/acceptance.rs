//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stdout (bypassing capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacnn_core::assistant::{
    build_sa_cnn, cover_tensor, default_grid, derived_seeds, desk_grid, precompute_grid, AblationMask, CacheMode,
    Head,
};
use sacnn_core::cost::{compute_cost_map, CostMap, ParameterTriple};
use sacnn_core::detector::{evaluate, train_detector, train_detector_labeled, ConfusionMatrix, DetectorKind};
use sacnn_core::embed::{lsb_match_baseline, payload_entropy, simulate_embedding, solve_lambda};
use sacnn_core::harness::{AssistMode, CacheChoice, Experiment, ExperimentConfig};
use sacnn_core::media_io::{pgm_encoded_len, read_pgm, synth_cover, write_pgm, Image8};
use sacnn_core::nn::{gradcheck, LayerKind, Model, Tensor, TrainConfig};
use sacnn_core::wavelet::daubechies8_filters;

fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: u8, hi: u8) -> Image8 {
    Image8::new(w, h, (0..w * h).map(|_| rng.gen_range(lo..=hi)).collect()).unwrap()
}

/// Every file under `dir` whose name ends in `suffix`, keyed by relative path.
fn files_with_suffix(dir: &Path, suffix: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_string_lossy().ends_with(suffix) {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_run_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        synthetic_count: 24,
        image_size: 32,
        split_ratio: 0.5,
        detector_epochs: 10,
        assistant_epochs: 2,
        transfer_count: 6,
        exemplars: 2,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_01_codec_and_determinism() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut round_trips = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(8..48), rng.gen_range(8..48));
        let img = random_image(&mut rng, w, h, 0, 255);
        let bytes = write_pgm(&img);
        let back = read_pgm(&bytes).unwrap();
        if back == img && write_pgm(&back) == bytes {
            round_trips += 1;
        }
    }

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| {
            let mut ex = Experiment::prepare(small_run_config(d.path())).unwrap();
            ex.run_all().unwrap();
            ex.emit_report().unwrap();
            let stegos: Vec<Vec<u8>> = ex
                .baseline_stegos()
                .iter()
                .chain(ex.assisted_stegos().unwrap())
                .map(write_pgm)
                .collect();
            (stegos, files_with_suffix(d.path(), ".csv"), files_with_suffix(d.path(), ".pgm"))
        })
        .collect();
    let stegos_equal = runs[0].0 == runs[1].0;
    let csv_equal = runs[0].1 == runs[1].1 && runs[0].1.len() >= 10;
    let pgm_equal = runs[0].2 == runs[1].2;
    let elapsed = start.elapsed();
    let ok = round_trips == 1000 && stegos_equal && csv_equal && pgm_equal && within(elapsed, 60);
    verdict(
        1,
        ok,
        &format!(
            "{round_trips}/1000 PGM round trips; stegos identical {stegos_equal}; {} CSVs identical {csv_equal}; exemplars identical {pgm_equal}; {:.1}s (< 60s)",
            runs[0].1.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_payload_calibration() {
    let start = Instant::now();
    let target = 0.4 * 4096.0;
    assert_eq!(target, 1638.4);
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let cover = synth_cover(5000 + i, 64, 64, 0.5 + (i % 5) as f64 * 0.5).unwrap();
        let costs = compute_cost_map(&cover, &ParameterTriple::DEFAULT).unwrap();
        let pm = solve_lambda(&costs, target).unwrap();
        worst = worst.max((payload_entropy(&pm) - target).abs() / target);
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-3 && within(elapsed, 30);
    verdict(
        2,
        ok,
        &format!("worst relative payload error {worst:.3e} (< 1e-3) over 100 covers; {:.1}s (< 30s)", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_03_capacity_endpoint() {
    let n = 64 * 64;
    let capacity = n as f64 * 3f64.log2();
    let mut worst: f64 = 0.0;
    let uniform = CostMap::uniform(64, 64, 2.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let textured = compute_cost_map(&random_image(&mut rng, 64, 64, 1, 254), &ParameterTriple::DEFAULT).unwrap();
    for c in [&uniform, &textured] {
        assert_eq!(c.embeddable_pixels(), n);
        let pm = solve_lambda(c, capacity).unwrap();
        for (p, m) in pm.p_plus().iter().zip(pm.p_minus()) {
            worst = worst.max((p - 1.0 / 3.0).abs()).max((m - 1.0 / 3.0).abs());
        }
    }
    let ok = worst < 1e-6;
    verdict(3, ok, &format!("max |p - 1/3| = {worst:.3e} (< 1e-6) on uniform and textured wet-free maps"));
    assert!(ok);
}

/// Direct double sum: residuals by explicit mirrored convolution, then each
/// pixel accumulates |tap| / (sigma + |W|) over the coefficients it feeds.
fn double_sum_costs(img: &Image8, sigma: f64) -> Vec<f64> {
    let fp = daubechies8_filters();
    let (lo, hi) = (&fp.lowpass, &fp.highpass);
    let kernels = [(lo, hi), (hi, lo), (hi, hi)];
    let (w, h) = img.dims();
    let l = lo.len();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    let (oh, ow) = (h + l - 1, w + l - 1);
    let mut rho = vec![0.0; w * h];
    for (kv, kh) in kernels {
        let tap = |a: usize, b: usize| kv[a] * kh[b];
        let mut coef = vec![0.0; oh * ow];
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = 0.0;
                for a in 0..l {
                    for b in 0..l {
                        let r = mirror(u as isize - a as isize, h);
                        let c = mirror(v as isize - b as isize, w);
                        acc += tap(a, b) * img.get(r, c) as f64;
                    }
                }
                coef[u * ow + v] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                for a in 0..l {
                    for b in 0..l {
                        rho[i * w + j] += tap(a, b).abs() / (sigma + coef[(i + a) * ow + (j + b)].abs());
                    }
                }
            }
        }
    }
    rho
}

#[test]
fn criterion_04_cost_model_properties() {
    let sigmas = [0.5, 1.0, 1.4, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut monotone_violations = 0usize;
    let mut bad_values = 0usize;
    let mut checked = 0usize;
    for i in 0..20u64 {
        let img = if i % 2 == 0 {
            random_image(&mut rng, 64, 64, 0, 255)
        } else {
            synth_cover(i, 64, 64, 1.0).unwrap()
        };
        let maps: Vec<CostMap> = sigmas
            .iter()
            .map(|&s| compute_cost_map(&img, &ParameterTriple::new(s, 1.0, 1.0).unwrap()).unwrap())
            .collect();
        for m in &maps {
            bad_values += m
                .rho_plus()
                .iter()
                .chain(m.rho_minus())
                .filter(|v| !(v.is_finite() && **v >= 0.0))
                .count();
        }
        for pair in maps.windows(2) {
            for k in 0..pair[0].len() {
                for (a, b, wet) in [
                    (pair[0].rho_plus()[k], pair[1].rho_plus()[k], pair[0].is_wet_plus(k) || pair[1].is_wet_plus(k)),
                    (pair[0].rho_minus()[k], pair[1].rho_minus()[k], pair[0].is_wet_minus(k) || pair[1].is_wet_minus(k)),
                ] {
                    if !wet {
                        checked += 1;
                        if !(b < a) {
                            monotone_violations += 1;
                        }
                    }
                }
            }
        }
    }

    let mut worst: f64 = 0.0;
    for s in 0..4u64 {
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(40 + s), 16, 16, 1, 254);
        for sigma in [1.0, 1.4] {
            let fast = compute_cost_map(&img, &ParameterTriple::new(sigma, 1.0, 1.0).unwrap()).unwrap();
            let slow = double_sum_costs(&img, sigma);
            for (a, b) in fast.rho_plus().iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let ok = monotone_violations == 0 && bad_values == 0 && checked > 0 && worst < 1e-9;
    verdict(
        4,
        ok,
        &format!(
            "{monotone_violations} monotonicity violations over {checked} non-wet comparisons; {bad_values} negative/non-finite costs; conv vs double sum max diff {worst:.3e} (< 1e-9)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_wet_safety() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut runs = 0usize;
    let mut wet_changes = 0usize;
    let mut out_of_range = 0usize;
    let mut changes = 0usize;
    for c in 0..100u64 {
        let mut cover = random_image(&mut rng, 32, 32, 0, 255);
        // saturated patches exercise the range-safety wetting
        for k in 0..64 {
            cover.pixels_mut()[k * 7 % 1024] = if k % 2 == 0 { 0 } else { 255 };
        }
        let base = compute_cost_map(&cover, &ParameterTriple::new(1.0, 1.0, 1.0 + c as f64 * 0.01).unwrap()).unwrap();
        for _ in 0..100 {
            let mut costs = base.clone();
            let frac = rng.gen_range(0.05..0.6);
            let mut masked = Vec::new();
            for k in 0..costs.len() {
                if rng.gen_bool(frac) {
                    costs.mark_wet(k);
                    masked.push(k);
                }
            }
            let payload = 0.4 * costs.embeddable_pixels() as f64;
            let pm = solve_lambda(&costs, payload).unwrap();
            let st = simulate_embedding(&cover, &pm, rng.gen()).unwrap();
            runs += 1;
            changes += st.change_count;
            for (k, (&a, &b)) in cover.pixels().iter().zip(st.pixels.pixels()).enumerate() {
                let d = b as i32 - a as i32;
                if d.abs() > 1 {
                    out_of_range += 1;
                }
                if (d == 1 && costs.is_wet_plus(k)) || (d == -1 && costs.is_wet_minus(k)) {
                    wet_changes += 1;
                }
            }
            wet_changes += masked.iter().filter(|&&k| cover.pixels()[k] != st.pixels.pixels()[k]).count();
        }
    }
    let ok = runs == 10_000 && wet_changes == 0 && out_of_range == 0 && changes > 0;
    verdict(
        5,
        ok,
        &format!("{runs} embeddings, {changes} changes, {wet_changes} wet-pixel modifications, {out_of_range} out-of-range pixels"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let randn = |shape: &[usize], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let conv = |i, o, k, s, bias| LayerKind::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        bias,
    };
    let cases: Vec<(&str, Vec<LayerKind>, Tensor)> = vec![
        ("conv2d stride 1", vec![conv(2, 3, 3, 1, true)], randn(&[2, 2, 6, 5], 1)),
        ("conv2d stride 2", vec![conv(1, 2, 5, 2, false)], randn(&[2, 1, 7, 7], 2)),
        ("batchnorm 2d", vec![LayerKind::BatchNorm { features: 3 }], randn(&[4, 3], 3)),
        ("batchnorm 4d", vec![conv(1, 2, 3, 1, false), LayerKind::BatchNorm { features: 2 }], randn(&[4, 1, 5, 5], 4)),
        ("relu", vec![LayerKind::Dense { inputs: 4, outputs: 6 }, LayerKind::Relu], randn(&[3, 4], 5)),
        ("softplus", vec![LayerKind::Dense { inputs: 4, outputs: 3 }, LayerKind::Softplus], randn(&[3, 4], 6)),
        (
            "dropout",
            vec![LayerKind::Dense { inputs: 5, outputs: 8 }, LayerKind::Dropout { rate: 0.4 }],
            randn(&[3, 5], 7),
        ),
        ("dense", vec![LayerKind::Dense { inputs: 6, outputs: 4 }], randn(&[5, 6], 8)),
        (
            "flatten",
            vec![conv(1, 2, 3, 2, true), LayerKind::Flatten, LayerKind::Dense { inputs: 18, outputs: 2 }],
            randn(&[2, 1, 6, 6], 9),
        ),
        ("softmax", vec![LayerKind::Dense { inputs: 4, outputs: 5 }, LayerKind::Softmax], randn(&[3, 4], 10)),
        ("global avg pool", vec![conv(2, 3, 3, 1, true), LayerKind::GlobalAvgPool], randn(&[2, 2, 4, 4], 11)),
    ];
    let mut results = Vec::new();
    for (name, kinds, x) in cases {
        let mut m = Model::seeded(kinds, 21).unwrap();
        let r = gradcheck(&mut m, &x, 1e-4, 2).unwrap();
        results.push((name.to_string(), r.max_rel_error, r.passed() && r.checked > 0));
    }
    let img = |s| cover_tensor(&synth_cover(s, 16, 16, 0.7).unwrap());
    let x = Tensor::stack(&[img(1), img(2)]).unwrap().reshape(&[2, 1, 16, 16]).unwrap();
    for (head, grid) in [(Head::Continuous, None), (Head::Discrete, Some(desk_grid()))] {
        let mut m = build_sa_cnn(head, grid.as_ref(), 16, 16, 5).unwrap();
        let r = gradcheck(m.model_mut(), &x, 1e-4, 1).unwrap();
        results.push((format!("{head} head"), r.max_rel_error, r.passed() && r.checked > 0));
    }
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.2).map(|r| r.0.as_str()).collect();
    let ok = failed.is_empty() && within(elapsed, 120);
    verdict(
        6,
        ok,
        &format!(
            "{} checks, worst relative error {worst:.3e} (< 1e-4), failing {failed:?}; {:.1}s (< 120s)",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_detector_sanity() {
    let start = Instant::now();
    let pairs: Vec<(Image8, Image8)> = (0..200u64)
        .map(|i| {
            let c = synth_cover(7000 + i, 64, 64, 1.0).unwrap();
            let s = lsb_match_baseline(&c, 1.0, 8000 + i).unwrap().pixels;
            (c, s)
        })
        .collect();
    let (train, test) = pairs.split_at(100);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-2,
        seed: 3,
        ..TrainConfig::default()
    };
    let det = train_detector(train, DetectorKind::ResidualFeatures, &cfg).unwrap();
    let acc = evaluate(&det, test).unwrap().accuracy().unwrap();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, s) in train {
        images.extend([c.clone(), s.clone()]);
        labels.extend([0usize, 1]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let shuffled = train_detector_labeled(&images, &labels, DetectorKind::ResidualFeatures, &cfg).unwrap();
    let shuffled_acc = evaluate(&shuffled, test).unwrap().accuracy().unwrap();
    let elapsed = start.elapsed();
    let ok = acc >= 0.9 && (shuffled_acc - 0.5).abs() <= 0.1 && within(elapsed, 300);
    verdict(
        7,
        ok,
        &format!(
            "held-out accuracy {:.1}% (>= 90%), shuffled-label accuracy {:.1}% (50 ± 10); {:.1}s (< 300s)",
            100.0 * acc,
            100.0 * shuffled_acc,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_oracle_dominance() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        synthetic_count: 200,
        split_ratio: 0.5,
        assist_mode: AssistMode::Oracle,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let mut ex = Experiment::prepare(config).unwrap();
    assert_eq!(ex.config().search_grid().cell_count(), 343);
    let val = ex.val_indices().to_vec();
    let base = ex.run_baseline().unwrap().matrix;
    let assisted = ex.run_assisted().unwrap().clone();
    let cache = ex.cache().unwrap();
    let mut per_cover_ok = true;
    let (mut oracle_sum, mut default_sum) = (0.0, 0.0);
    for &i in &val {
        let o = cache.oracle(i).unwrap();
        per_cover_ok &= o.score <= o.default_score;
        oracle_sum += o.score;
        default_sum += o.default_score;
    }
    let n = val.len() as f64;
    let (b, a) = (base.error_rate_percent().unwrap(), assisted.matrix.error_rate_percent().unwrap());
    let elapsed = start.elapsed();
    let ok = val.len() == 100
        && per_cover_ok
        && oracle_sum / n <= default_sum / n
        && a >= b
        && within(elapsed, 1200);
    verdict(
        8,
        ok,
        &format!(
            "{} covers; mean oracle score {:.4} <= default {:.4}; error {b:.1}% -> {a:.1}% ({:+.1} points, reference +8.1); {:.1}s (< 1200s)",
            val.len(),
            oracle_sum / n,
            default_sum / n,
            a - b,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_grid_contract() {
    let g = default_grid();
    let published = [
        1.3, 1.325, 1.35, 1.3625, 1.375, 1.3875, 1.4, 1.4125, 1.425, 1.4375, 1.45, 1.475, 1.5,
    ];
    let values_ok = g.axes().iter().all(|a| *a == published.as_slice());
    let cells_ok = g.cell_count() == 13 * 13 * 13 && g.cell_count() == 2197;

    let covers: Vec<(String, Image8)> = (0..2u64)
        .map(|i| (format!("c{i}"), synth_cover(900 + i, 64, 64, 1.0).unwrap()))
        .collect();
    let seeds = derived_seeds(17, covers.len());
    let budget = CacheMode::Materialized {
        budget_bytes: u64::MAX,
        dir: None,
    };
    let stored = precompute_grid(&covers, &seeds, &g, 0.4, None, &budget).unwrap();
    let lazy = precompute_grid(&covers, &seeds, &g, 0.4, None, &CacheMode::Lazy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for _ in 0..10 {
        let ci = rng.gen_range(0..covers.len());
        let cell = rng.gen_range(0..g.cell_count());
        let cover = &covers[ci].1;
        let a = stored.stego(ci, cell, cover).unwrap();
        let b = lazy.stego(ci, cell, cover).unwrap();
        let c = lazy.regenerate(ci, cell, cover).unwrap();
        if write_pgm(&a) == write_pgm(&b) && b == c {
            exact += 1;
        }
    }
    let ok = values_ok && cells_ok && exact == 10;
    verdict(
        9,
        ok,
        &format!("13 published axis values {values_ok}; {} cells; {exact}/10 lazy regenerations bit-exact", g.cell_count()),
    );
    assert!(ok);
}

#[test]
fn criterion_10_discrete_vs_continuous() {
    let dir = tempfile::tempdir().unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        synthetic_count: 40,
        split_ratio: 0.5,
        cache_mode: CacheChoice::Materialized,
        cache_dir: Some(cache_dir.path().to_path_buf()),
        compare_epochs: 3,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let mut ex = Experiment::prepare(config).unwrap();
    let d = ex.run_discrete_comparison().unwrap().clone();
    let on_disk: u64 = std::fs::read_dir(cache_dir.path())
        .unwrap()
        .map(|e| e.unwrap().metadata().unwrap().len())
        .sum();
    let expected = 40 * 343 * pgm_encoded_len(64, 64) as u64;
    let storage_exact = d.materialized
        && d.storage.stored_bytes == expected
        && d.storage.materialized_bytes == expected
        && on_disk == expected
        && d.discrete.storage_bytes == expected
        && d.continuous.storage_bytes == 40 * pgm_encoded_len(64, 64) as u64;
    ex.emit_report().unwrap();
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    let storage_csv = std::fs::read_to_string(dir.path().join("storage.csv")).unwrap();
    let references = md.contains("704 MB")
        && md.contains("2.8 TB")
        && storage_csv.contains("reference_continuous,704000000")
        && storage_csv.contains("reference_discrete,2800000000000");
    let faster = d.discrete.mean_seconds < d.continuous.mean_seconds;
    let ok = faster && storage_exact && references && d.discrete.epochs >= 3 && d.continuous.epochs >= 3;
    verdict(
        10,
        ok,
        &format!(
            "discrete {:.3}s ± {:.3}s vs continuous {:.3}s ± {:.3}s per epoch; {} bytes stored = {} on disk (exact {storage_exact}); references shown {references}",
            d.discrete.mean_seconds,
            d.discrete.std_seconds,
            d.continuous.mean_seconds,
            d.continuous.std_seconds,
            d.storage.stored_bytes,
            on_disk
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_11_report_integrity() {
    let worked = ConfusionMatrix::new(357, 143, 139, 361);
    let worked_ok = worked.error_rate_percent().unwrap() == 28.2
        && worked.percentages().unwrap() == [35.7, 14.3, 13.9, 36.1];

    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        ablation: AblationMask::SIGMA_ONLY,
        ..small_run_config(dir.path())
    };
    let mut ex = Experiment::prepare(config).unwrap();
    ex.run_all().unwrap();
    ex.emit_report().unwrap();
    let mut checked = 0;
    let mut mismatches = 0;
    for (name, bytes) in files_with_suffix(dir.path(), ".csv") {
        let text = String::from_utf8(bytes).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        if name.starts_with("confusion_") {
            for row in rows {
                let (m, rate) = ConfusionMatrix::parse_csv_row(row).unwrap();
                checked += 1;
                mismatches += (m.error_rate_percent().unwrap() != rate) as usize;
            }
        } else if name == "summary.csv" {
            for row in rows {
                let f: Vec<&str> = row.split(',').collect();
                let (m, rate) = ConfusionMatrix::parse_csv_row(&f[1..6].join(",")).unwrap();
                checked += 1;
                mismatches += (m.error_rate_percent().unwrap() != rate) as usize;
            }
        }
    }
    for (_, m, _) in ex.report().matrices() {
        let p = m.percentages().unwrap();
        mismatches += ((p.iter().sum::<f64>() - 100.0).abs() > 1e-9) as usize;
    }
    let ok = worked_ok && checked >= 16 && mismatches == 0;
    verdict(
        11,
        ok,
        &format!("worked example 35.7/14.3/13.9/36.1 -> 28.2% exact {worked_ok}; {checked} emitted error rates, {mismatches} mismatches"),
    );
    assert!(ok);
}
