//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ssync_cli::config;
use ssync_core::attention::{
    cross_image_attention, cross_image_attention_weights, drop_cross_entries, subset_attention, BatchQkv, Qkv,
};
use ssync_core::bli::interpolate;
use ssync_core::linalg::masked_row_softmax;
use ssync_core::masking::{binarize, build_propagation_mask, dropout_mask, PropagationMask};
use ssync_core::pipeline::{HookResult, NoopObserver, Observer, StepContext};
use ssync_core::rfh::{correspond, harmonize, CorrespondenceTable};
use ssync_core::rng::tags;
use ssync_core::{
    AdditiveMask, AttentionMap, Engine, GridShape, Matrix, MetricReport, RunConfig, RunOptions, SplitMix64,
    SubjectMask, ThresholdMethod, Toggles,
};
use ssync_testkit as oracle;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    println!("[{}] {} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
}

fn small(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        num_images: 3,
        grid_height: 8,
        grid_width: 8,
        embed_dim: 16,
        proj_dim: 16,
        num_heads: 2,
        num_blocks: 2,
        num_timesteps: 4,
        ..Default::default()
    }
}

fn random_batch(n: usize, p: usize, width: usize, heads: usize, rng: &mut SplitMix64) -> BatchQkv<f64> {
    let images = (0..n)
        .map(|_| Qkv {
            q: oracle::random_matrix(p, width, rng).scale(2.0),
            k: oracle::random_matrix(p, width, rng).scale(2.0),
            v: oracle::random_matrix(p, width, rng),
        })
        .collect();
    BatchQkv::new(images, heads).unwrap()
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xACCE);
    let mut failures = Vec::new();
    let cases = 250;

    for case in 0..cases {
        let rows = rng.range_inclusive(1, 6);
        let cols = rng.range_inclusive(1, 9);
        let logits = oracle::random_matrix(rows, cols, &mut rng).scale(5.0);
        let masks: Vec<AdditiveMask> = (0..rows)
            .map(|_| {
                let mut v: Vec<bool> = (0..cols).map(|_| rng.bernoulli(0.6)).collect();
                v[rng.range_inclusive(0, cols - 1)] = true;
                AdditiveMask::new(v)
            })
            .collect();
        let got = masked_row_softmax(&logits, &masks).unwrap();
        let ok = (0..rows).all(|r| {
            let want = oracle::softmax(logits.row(r), masks[r].visible()).unwrap();
            (0..cols).all(|c| {
                if masks[r].visible()[c] {
                    (got.get(r, c) - want[c]).abs() < 1e-12
                } else {
                    got.get(r, c) == 0.0
                }
            })
        });
        if !ok {
            failures.push(format!("softmax case {case}"));
        }
    }

    for case in 0..cases {
        let len = rng.range_inclusive(2, 256);
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..len).map(|_| rng.next_f64()).collect()
        } else {
            (0..len)
                .map(|_| if rng.bernoulli(0.2) { 0.6 + 0.4 * rng.next_f64() } else { 0.3 * rng.next_f64() })
                .collect()
        };
        let map = AttentionMap::new(0, scores.clone()).unwrap();
        let got = binarize(&map.rescaled(), ThresholdMethod::Otsu, GridShape::new(1, len)).unwrap();
        if got.bits != oracle::otsu_mask(&scores) {
            failures.push(format!("otsu case {case}"));
        }
    }

    for case in 0..cases {
        let n = rng.range_inclusive(2, 4);
        let p = rng.range_inclusive(3, 8);
        let d = rng.range_inclusive(2, 5);
        let features: Vec<Matrix<f64>> = (0..n).map(|_| oracle::random_matrix(p, d, &mut rng)).collect();
        let masks: Vec<SubjectMask> = (0..n).map(|i| oracle::random_mask(i, p, 0.5, &mut rng)).collect();
        let got = correspond(&features, &masks, 0.1, None).unwrap();
        let want = oracle::correspond(&features, &masks, 0.1, None);
        let same = got.entries.len() == want.len()
            && got.entries.iter().zip(&want).all(|(g, w)| {
                (g.source_image, g.source_patch, g.target_image, g.target_patch, g.selected, g.harmonized)
                    == (w.source_image, w.source_patch, w.target_image, w.target_patch, w.selected, w.harmonized)
                    && (g.score - w.score).abs() < 1e-12
            });
        if !same {
            failures.push(format!("correspondence case {case}"));
        }
    }

    for case in 0..cases {
        let n = rng.range_inclusive(1, 4);
        let p = rng.range_inclusive(2, 6);
        let heads = rng.range_inclusive(1, 3);
        let width = heads * rng.range_inclusive(1, 3);
        let batch = random_batch(n, p, width, heads, &mut rng);
        let masks: Vec<SubjectMask> = (0..n).map(|i| oracle::random_mask(i, p, 0.5, &mut rng)).collect();
        let gammas: Vec<PropagationMask> = (0..n).map(|i| build_propagation_mask(i, &masks).unwrap()).collect();
        let got = cross_image_attention(&batch, &gammas, None).unwrap();
        let k = Matrix::vstack(&batch.images().iter().map(|x| &x.k).collect::<Vec<_>>()).unwrap();
        let v = Matrix::vstack(&batch.images().iter().map(|x| &x.v).collect::<Vec<_>>()).unwrap();
        let ok = (0..n).all(|i| {
            let (want, _) = oracle::attention(&batch.image(i).q, &k, &v, heads, &oracle::visibility(i, &masks));
            oracle::max_abs_diff(&got[i], &want) < 1e-10
        });
        if !ok {
            failures.push(format!("attention case {case}"));
        }
    }

    let elapsed = start.elapsed();
    Verdict {
        id: 1,
        name: "oracle equivalence",
        pass: failures.is_empty() && elapsed < Duration::from_secs(60),
        detail: format!(
            "{cases} instances x 4 ops, {} mismatches{}, {:.1}s (limit 60s)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f:?})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    }
}

fn reductions() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    let single = RunConfig { num_images: 1, ..Default::default() };
    let r = ssync_core::run(&single).unwrap();
    let diff = oracle::max_abs_diff(&r.final_embeddings[0], &r.vanilla_final.as_ref().unwrap()[0]);
    pass &= diff <= 1e-9;
    notes.push(format!("N=1 diff {diff:.1e}"));

    let engine = Engine::new(&RunConfig { toggles: Toggles::ALL_OFF, ..Default::default() }).unwrap();
    let (vanilla, _) = engine.vanilla_pass(&mut NoopObserver).unwrap();
    let off = engine.run(RunOptions::default()).unwrap();
    let bitwise = off.final_embeddings == vanilla.final_embeddings;
    pass &= bitwise;
    notes.push(format!("toggles-off bitwise {bitwise}"));

    // Module-level identities on random inputs.
    let mut rng = SplitMix64::new(77);
    let mut exact = true;
    for _ in 0..100 {
        let features: Vec<Matrix<f64>> = (0..3).map(|_| oracle::random_matrix(6, 4, &mut rng)).collect();
        let masks: Vec<SubjectMask> = (0..3).map(|i| oracle::random_mask(i, 6, 0.6, &mut rng)).collect();
        let table = correspond(&features, &masks, 0.1, None).unwrap();
        exact &= harmonize(0, &features, &table, 0.0, &masks[0], None).unwrap() == features[0];
        exact &= interpolate(&features[0], &features[1], 0.0).unwrap() == features[0];
        exact &= dropout_mask(&masks[0], 0.0, &mut rng).unwrap() == masks[0];
        let g = build_propagation_mask(1, &masks).unwrap();
        exact &= drop_cross_entries(&g, 0.0, &mut rng).unwrap() == g;
        let mut stream = rng.clone();
        exact &= harmonize(0, &features, &table, 0.3, &masks[0], Some((0.0, &mut stream))).unwrap()
            == harmonize(0, &features, &table, 0.3, &masks[0], None).unwrap();
    }
    // And through whole runs: each knob at zero equals switching its mechanism off.
    for seed in 0..3 {
        let base = small(seed);
        let same = |a: RunConfig, b: RunConfig| ssync_core::run(&a).unwrap().final_embeddings == ssync_core::run(&b).unwrap().final_embeddings;
        exact &= same(
            RunConfig { gamma: 0.0, ..base.clone() },
            RunConfig { toggles: Toggles { rfh: false, ..Toggles::ALL_ON }, ..base.clone() },
        );
        exact &= same(
            RunConfig { lambda: 0.0, ..base.clone() },
            RunConfig { toggles: Toggles { bli: false, ..Toggles::ALL_ON }, ..base.clone() },
        );
        exact &= same(
            RunConfig { attn_dropout: 0.0, rfh_dropout: 0.0, mask_dropout: 0.0, ..base.clone() },
            RunConfig { toggles: Toggles { dropouts: false, ..Toggles::ALL_ON }, ..base.clone() },
        );
    }
    pass &= exact;
    notes.push(format!("gamma/lambda/rate zero exact {exact}"));

    Verdict { id: 2, name: "reduction identities", pass, detail: notes.join(", ") }
}

struct Blocking {
    rng: SplitMix64,
    zero_checked: usize,
    violations: usize,
    perturbations: usize,
    changed: usize,
}

impl Observer for Blocking {
    fn on_shared_attention(
        &mut self,
        _: &StepContext,
        batch: &BatchQkv<f64>,
        gammas: &[PropagationMask],
        masks: &[SubjectMask],
        outputs: &[Matrix<f64>],
    ) -> HookResult {
        let n = batch.len();
        let p = batch.patches_per_image();
        let weights = cross_image_attention_weights(batch, gammas).map_err(|e| e.to_string())?;
        for i in 0..n {
            for per_head in &weights[i] {
                for j in (0..n).filter(|&j| j != i) {
                    for patch in (0..p).filter(|&w| !masks[j].bits[w]) {
                        for r in 0..p {
                            self.zero_checked += 1;
                            if per_head.get(r, j * p + patch) != 0.0 {
                                self.violations += 1;
                            }
                        }
                    }
                }
            }
            let width = batch.image(0).k.cols();
            let images: Vec<Qkv<f64>> = (0..n)
                .map(|j| {
                    let mut x = batch.image(j).clone();
                    for patch in 0..p {
                        if j != i && !gammas[i].segment(j)[patch] {
                            for c in 0..width {
                                x.k.set(patch, c, self.rng.uniform(-100.0, 100.0));
                                x.v.set(patch, c, self.rng.uniform(-100.0, 100.0));
                            }
                        }
                    }
                    x
                })
                .collect();
            let scrambled = BatchQkv::new(images, batch.heads()).map_err(|e| e.to_string())?;
            let again = cross_image_attention(&scrambled, gammas, None).map_err(|e| e.to_string())?;
            self.perturbations += 1;
            if again[i] != outputs[i] {
                self.changed += 1;
            }
        }
        Ok(())
    }
}

fn blocking() -> Verdict {
    let mut obs = Blocking {
        rng: SplitMix64::new(5),
        zero_checked: 0,
        violations: 0,
        perturbations: 0,
        changed: 0,
    };
    for seed in 0..50 {
        ssync_core::run_with(&small(seed), RunOptions { observer: Some(&mut obs), ..Default::default() }).unwrap();
    }
    Verdict {
        id: 3,
        name: "blocking guarantees",
        pass: obs.violations == 0 && obs.changed == 0 && obs.zero_checked > 0 && obs.perturbations > 0,
        detail: format!(
            "50 runs, {} blocked weights checked ({} nonzero), {} K/V perturbations ({} changed an output)",
            obs.zero_checked, obs.violations, obs.perturbations, obs.changed
        ),
    }
}

/// Replays the harmonization dropout stream and checks every harmonized row.
struct Contraction {
    seed: u64,
    gamma: f64,
    rate: Option<f64>,
    checked: usize,
    skipped: usize,
    worst: f64,
    bad: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Observer for Contraction {
    fn on_harmonize(
        &mut self,
        ctx: &StepContext,
        before: &[Matrix<f64>],
        after: &[Matrix<f64>],
        table: &CorrespondenceTable<f64>,
    ) -> HookResult {
        for i in 0..before.len() {
            let mut stream = SplitMix64::keyed(self.seed, tags::RFH_DROPOUT, &[ctx.t as u64, ctx.layer as u64, i as u64]);
            for e in table.selected_for(i).filter(|e| e.harmonized) {
                let dropped = self.rate.is_some_and(|rate| stream.bernoulli(rate));
                let target = before[e.target_image].row(e.target_patch);
                let prior = distance(before[i].row(e.source_patch), target);
                let post = distance(after[i].row(e.source_patch), target);
                if dropped {
                    self.skipped += 1;
                    if after[i].row(e.source_patch) != before[i].row(e.source_patch) {
                        self.bad += 1;
                    }
                    continue;
                }
                let err = (post - (1.0 - self.gamma) * prior).abs();
                self.worst = self.worst.max(err);
                if err > 1e-9 {
                    self.bad += 1;
                }
                self.checked += 1;
            }
        }
        Ok(())
    }
}

struct Sweep {
    iou: Vec<f64>,
    baseline: Vec<f64>,
    on: Vec<MetricReport>,
    off: Vec<MetricReport>,
    pose_off: Vec<MetricReport>,
    gamma: [Vec<f64>; 3],
    shared: Duration,
    trend: Duration,
    gammas: Duration,
    contraction: Contraction,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The 20-seed runs behind the mask, trend, gamma and contraction criteria.
/// Each seed's vanilla cache serves every variant that interpolates.
fn sweep() -> Sweep {
    let base = RunConfig::default();
    let mut s = Sweep {
        iou: Vec::new(),
        baseline: Vec::new(),
        on: Vec::new(),
        off: Vec::new(),
        pose_off: Vec::new(),
        gamma: [Vec::new(), Vec::new(), Vec::new()],
        shared: Duration::ZERO,
        trend: Duration::ZERO,
        gammas: Duration::ZERO,
        contraction: Contraction {
            seed: 0,
            gamma: base.gamma,
            rate: Some(base.rfh_dropout),
            checked: 0,
            skipped: 0,
            worst: 0.0,
            bad: 0,
        },
    };
    for seed in 0..20 {
        let config = RunConfig { seed, ..base.clone() };
        let start = Instant::now();
        let engine = Engine::new(&config).unwrap();
        let (_, cache) = engine.vanilla_pass(&mut NoopObserver).unwrap();
        s.contraction.seed = seed;
        let on = engine
            .run(RunOptions { cache: Some(cache.clone()), observer: Some(&mut s.contraction), ..Default::default() })
            .unwrap();
        s.shared += start.elapsed();
        let p = config.patches() as f64;
        s.baseline.extend(engine.scene.planted.iter().map(|m| m.count() as f64 / p));
        s.iou.push(on.metrics.mask_iou_vs_planted.unwrap_or(0.0));
        s.gamma[0].push(on.metrics.subject_consistency.unwrap_or(f64::NAN));
        s.on.push(on.metrics);

        let start = Instant::now();
        for (toggles, sink) in [
            (Toggles::ALL_OFF, &mut s.off),
            (Toggles { bli: false, dropouts: false, ..Toggles::ALL_ON }, &mut s.pose_off),
        ] {
            let r = ssync_core::run(&RunConfig { toggles, ..config.clone() }).unwrap();
            sink.push(r.metrics);
        }
        s.trend += start.elapsed();

        let start = Instant::now();
        for (k, gamma) in [(1, 0.5), (2, 0.7)] {
            let cell = Engine::new(&RunConfig { gamma, ..config.clone() }).unwrap();
            let r = cell.run(RunOptions { cache: Some(cache.clone()), ..Default::default() }).unwrap();
            s.gamma[k].push(r.metrics.subject_consistency.unwrap_or(f64::NAN));
        }
        s.gammas += start.elapsed();
    }
    s
}

fn mask_recovery(s: &Sweep) -> Verdict {
    let (iou, base) = (mean(&s.iou), mean(&s.baseline));
    Verdict {
        id: 4,
        name: "mask recovery",
        pass: iou > 3.0 * base && s.shared < Duration::from_secs(120),
        detail: format!(
            "mean IoU {iou:.4} vs 3 x planted fraction {:.4}, {:.1}s (limit 120s)",
            3.0 * base,
            s.shared.as_secs_f64()
        ),
    }
}

fn consistency_trend(s: &Sweep) -> Verdict {
    let pick = |v: &[MetricReport], f: fn(&MetricReport) -> Option<f64>| mean(&v.iter().map(|m| f(m).unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let sc_on = pick(&s.on, |m| m.subject_consistency);
    let sc_off = pick(&s.off, |m| m.subject_consistency);
    let ld_on = pick(&s.on, |m| m.layout_diversity);
    let ld_pose = pick(&s.pose_off, |m| m.layout_diversity);
    let time = s.shared + s.trend;
    Verdict {
        id: 5,
        name: "consistency trend",
        pass: sc_on > sc_off && ld_on > ld_pose && time < Duration::from_secs(300),
        detail: format!(
            "subject_consistency on {sc_on:.4} > off {sc_off:.4}; layout_diversity with pose variation {ld_on:.4} > without {ld_pose:.4}; {:.1}s (limit 300s)",
            time.as_secs_f64()
        ),
    }
}

fn gamma_monotonicity(s: &Sweep) -> Verdict {
    let m: Vec<f64> = s.gamma.iter().map(|v| mean(v)).collect();
    Verdict {
        id: 6,
        name: "gamma monotonicity",
        pass: m[0] <= m[1] && m[1] <= m[2],
        detail: format!(
            "mean subject_consistency at gamma 0.3/0.5/0.7: {:.4} / {:.4} / {:.4}, {:.1}s",
            m[0],
            m[1],
            m[2],
            (s.shared + s.gammas).as_secs_f64()
        ),
    }
}

fn rfh_contraction(s: &Sweep) -> Verdict {
    let mut exact = Contraction {
        seed: 0,
        gamma: 0.0,
        rate: None,
        checked: 0,
        skipped: 0,
        worst: 0.0,
        bad: 0,
    };
    for (seed, gamma) in [(0, 0.3), (1, 0.5), (2, 0.9), (3, 1.0)] {
        exact.gamma = gamma;
        let config = RunConfig { seed, gamma, toggles: Toggles { dropouts: false, ..Toggles::ALL_ON }, ..small(seed) };
        ssync_core::run_with(&config, RunOptions { observer: Some(&mut exact), ..Default::default() }).unwrap();
    }
    let c = &s.contraction;
    Verdict {
        id: 7,
        name: "RFH contraction",
        pass: c.bad == 0 && exact.bad == 0 && c.checked > 0 && exact.checked > 0,
        detail: format!(
            "{} regions in the 20 default runs (+{} dropped, untouched), {} more without dropout; max error {:.1e}, {} violations",
            c.checked,
            c.skipped,
            exact.checked,
            c.worst.max(exact.worst),
            c.bad + exact.bad
        ),
    }
}

fn subset_equivalence() -> Verdict {
    let mut rng = SplitMix64::new(0x5B5E7);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..100 {
        let n = rng.range_inclusive(3, 6);
        let p = rng.range_inclusive(2, 6);
        let batch = random_batch(n, p, 4, 2, &mut rng);
        let masks: Vec<SubjectMask> = (0..n).map(|i| oracle::random_mask(i, p, 0.5, &mut rng)).collect();
        let mut subset: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.4)).collect();
        if subset.is_empty() || subset.len() == n {
            subset = vec![rng.range_inclusive(0, n - 1)];
        }
        let got = subset_attention(&batch, &subset, &masks, None).unwrap();
        for i in (0..n).filter(|i| !subset.contains(i)) {
            let mut gammas: Vec<PropagationMask> = (0..n).map(|j| build_propagation_mask(j, &masks).unwrap()).collect();
            let zeroed = (0..n * p)
                .map(|key| gammas[i].visible.visible()[key] && (key / p == i || subset.contains(&(key / p))))
                .collect();
            gammas[i].visible = AdditiveMask::new(zeroed);
            let full = cross_image_attention(&batch, &gammas, None).unwrap();
            worst = worst.max(oracle::max_abs_diff(&got[i], &full[i]));
            compared += 1;
        }
    }
    Verdict {
        id: 8,
        name: "subset-scaling equivalence",
        pass: worst <= 1e-12 && compared > 0,
        detail: format!("100 instances, {compared} non-subset images, max diff {worst:.1e} (limit 1e-12)"),
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.json");
    fs::write(&cfg, config::to_json(&RunConfig::default())).unwrap();
    let mut artifacts = Vec::new();
    for (k, threads) in [Some("1"), Some("4"), None].into_iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssync"));
        cmd.args(["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        match threads {
            Some(t) => cmd.env("SSYNC_THREADS", t),
            None => cmd.env_remove("SSYNC_THREADS"),
        };
        let status = cmd.output().unwrap().status;
        let read = |name: &str| fs::read(Path::new(&out).join(name)).unwrap_or_default();
        artifacts.push((status.success(), read("metrics.csv"), read("final_embeddings.ssyn")));
    }
    let ok = artifacts.iter().all(|a| a.0 && !a.1.is_empty() && !a.2.is_empty())
        && artifacts.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    Verdict {
        id: 9,
        name: "determinism",
        pass: ok,
        detail: format!(
            "3 runs (SSYNC_THREADS=1, 4, unset): metrics.csv {} bytes, .ssyn {} bytes, identical {ok}",
            artifacts[0].1.len(),
            artifacts[0].2.len()
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut verdicts = Vec::new();
    let mut run = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    run(oracle_equivalence());
    run(reductions());
    run(blocking());
    let s = sweep();
    run(mask_recovery(&s));
    run(consistency_trend(&s));
    run(gamma_monotonicity(&s));
    run(rfh_contraction(&s));
    run(subset_equivalence());
    run(determinism());
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
