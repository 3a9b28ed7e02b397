//! Acceptance checks, one line per criterion. Exits nonzero on any failure.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lesionkit::anchors::{
    anchor_shape, centered_iou, generate_anchors, iou, optimize_anchors_de, AnchorConfig, AnchorMode, Box,
    DeParams, RATIO_BOUNDS, SIZE_BOUNDS,
};
use lesionkit::eval::{sensitivity_at_fp, Detection, GroundTruth, DEFAULT_FP_RATES};
use lesionkit::fusion::{
    concat_views, fuse, fuse_backward, max_row_sum_deviation, mhsa_forward, polyak_update, FeatureBlock,
    FusionConfig, FusionParams,
};
use lesionkit::preprocess::recist_to_mask;
use lesionkit::synthgen::{generate_phantom, oracle_detections, PhantomSpec};
use lesionkit::windowing::{apply_window, default_window_set, wide_window, HuWindow};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn window_oracle(hu: f64, level: f64, width: f64) -> f64 {
    let lo = level - width / 2.0;
    let t = (hu - lo) / width;
    let t = if t < 0.0 {
        0.0
    } else if t > 1.0 {
        1.0
    } else {
        t
    };
    t * 255.0
}

fn c1_windowing() -> Outcome {
    let mut windows: Vec<HuWindow<f64>> = default_window_set().windows().to_vec();
    windows.push(wide_window());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for w in &windows {
        for _ in 0..100 {
            let grid = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-2000.0..4000.0));
            let out = apply_window(grid.view(), w);
            for (o, &hu) in out.iter().zip(grid.iter()) {
                worst = worst.max((o - window_oracle(hu, w.level(), w.width())).abs());
            }
        }
        let centre = apply_window(Array2::from_elem((1, 1), w.level()).view(), w)[[0, 0]];
        if centre != 127.5 {
            return Err(format!("window {w}: centre maps to {centre}"));
        }
    }
    check(worst < 1e-9, format!("{} windows, max abs error {worst:.2e}", windows.len()))
}

fn c2_anchor_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases: Vec<(usize, usize, usize, usize)> = vec![(16, 12, 5, 5)];
    while cases.len() < 50 {
        cases.push((rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..7), rng.gen_range(1..7)));
    }
    for &(w, h, n, m) in &cases {
        let cfg = AnchorConfig {
            sizes: (0..n).map(|i| 8.0 * (i + 1) as f64).collect(),
            ratios: (0..m).map(|j| 0.5 + 0.25 * j as f64).collect(),
            ..AnchorConfig::default_detector()
        };
        let got = generate_anchors(&cfg, (w, h), AnchorMode::Dense).map_err(|e| e.to_string())?.len();
        if got != w * h * (n + m - 1) {
            return Err(format!("W={w} H={h} n={n} m={m}: {got} anchors"));
        }
    }
    Ok(format!("{} tuples", cases.len()))
}

fn c3_anchor_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s: f64 = rng.gen_range(1.0..600.0);
        let r: f64 = rng.gen_range(0.1..10.0);
        let (w, h) = anchor_shape(s, r).map_err(|e| e.to_string())?;
        worst = worst.max(((w * h - s * s) / (s * s)).abs()).max((w / h - r).abs());
    }
    check(worst < 1e-9, format!("1000 draws, max deviation {worst:.2e}"))
}

/// Dense grid over a single (size, ratio) pair.
fn grid_optimum(gt: &[Box<f64>]) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    let mut s = SIZE_BOUNDS.0;
    while s <= SIZE_BOUNDS.1 {
        let mut r = RATIO_BOUNDS.0;
        while r <= RATIO_BOUNDS.1 + 1e-12 {
            let (aw, ah) = (s * r.sqrt(), s / r.sqrt());
            let f = gt.iter().map(|b| centered_iou(b.width(), b.height(), aw, ah)).sum::<f64>() / gt.len() as f64;
            if f > best.2 {
                best = (s, r, f);
            }
            r += 0.005;
        }
        s += 0.25;
    }
    best
}

fn c4_de_search() -> Outcome {
    let gt: Vec<Box<f64>> = (0..40)
        .map(|i| Box::centered(50.0 + i as f64, 60.0, 32.0, 32.0))
        .collect();
    let (gs, gr, gf) = grid_optimum(&gt);
    let start = Instant::now();
    let mut notes = Vec::new();
    for (n, m) in [(5, 5), (1, 1)] {
        let out = optimize_anchors_de(&gt, &DeParams::with_shape(n, m, 17)).map_err(|e| e.to_string())?;
        let monotone = out.history.windows(2).all(|w| w[1] >= w[0]);
        if !monotone || out.history.len() != 201 {
            return Err(format!("{n}x{m}: history not monotone or wrong length {}", out.history.len()));
        }
        let (mut bs, mut br, mut bf) = (0.0, 0.0, -1.0);
        for &s in &out.config.sizes {
            for &r in &out.config.ratios {
                let (aw, ah) = (s * r.sqrt(), s / r.sqrt());
                let f = centered_iou(32.0, 32.0, aw, ah);
                if f > bf {
                    (bs, br, bf) = (s, r, f);
                }
            }
        }
        let ds = (bs - gs).abs() / gs;
        let dr = (br - gr).abs() / gr;
        if ds > 0.05 || dr > 0.05 || out.fitness < 0.95 * gf {
            return Err(format!("{n}x{m}: best anchor ({bs:.3}, {br:.4}) vs grid ({gs}, {gr})"));
        }
        notes.push(format!("{n}x{m} -> ({bs:.2}, {br:.3}) err {:.2}%/{:.2}%", 100.0 * ds, 100.0 * dr));
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(60),
        format!("grid optimum ({gs}, {gr}); {}; {:.1}s", notes.join(", "), elapsed.as_secs_f64()),
    )
}

fn c5_fusion_shape() -> Outcome {
    let cfg = FusionConfig::DETECTOR;
    let params = FusionParams::<f64>::init(&cfg, 5).map_err(|e| e.to_string())?;
    for (h, w) in [(1, 1), (3, 5), (8, 8)] {
        let block = FeatureBlock::random(&cfg, h, w, 2, 5);
        let out = fuse(&block, &params.attention, &params.conv).map_err(|e| e.to_string())?;
        if out.dim() != (256, h, w) {
            return Err(format!("({h}, {w}) -> {:?}", out.dim()));
        }
    }
    Ok("256 channels for (1,1), (3,5), (8,8)".into())
}

fn c6_attention() -> Outcome {
    let cfg = FusionConfig::DETECTOR;
    let params = FusionParams::<f64>::init(&cfg, 6).map_err(|e| e.to_string())?;
    let (h, w) = (4, 5);
    let block = FeatureBlock::random(&cfg, h, w, 3, 6);
    let x = concat_views(&block).map_err(|e| e.to_string())?;
    let base = mhsa_forward(x.view(), &params.attention).map_err(|e| e.to_string())?;
    let dev = max_row_sum_deviation(&base.attn);

    let c = x.dim().0;
    let flat = x.to_shape((c, h * w)).unwrap().to_owned();
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
    let moved_in = flat.select(Axis(1), &perm);
    let moved_in = Array3::from_shape_fn((c, h, w), |(ch, r, col)| moved_in[[ch, r * w + col]]);
    let moved = mhsa_forward(moved_in.view(), &params.attention).map_err(|e| e.to_string())?;
    let vd = base.out.dim().0;
    let mut worst = 0.0f64;
    for ch in 0..vd {
        for (p, &src) in perm.iter().enumerate() {
            let a = moved.out[[ch, p / w, p % w]];
            let b = base.out[[ch, src / w, src % w]];
            worst = worst.max((a - b).abs());
        }
    }
    check(
        dev < 1e-12 && worst < 1e-10,
        format!("row-sum deviation {dev:.2e}, permutation error {worst:.2e}"),
    )
}

fn c7_gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = FusionConfig::REDUCED;
    let (h, w) = (3, 4);
    let params = FusionParams::<f64>::init(&cfg, 7).map_err(|e| e.to_string())?;
    let block = FeatureBlock::random(&cfg, h, w, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let upstream = Array3::from_shape_fn((cfg.channels, h, w), |_| rng.gen_range(-1.0..1.0));
    let grads = fuse_backward(&block, &params.attention, &params.conv, upstream.view()).map_err(|e| e.to_string())?;
    let loss = |b: &FeatureBlock<f64>, p: &FusionParams<f64>| {
        (&fuse(b, &p.attention, &p.conv).unwrap() * &upstream).sum()
    };
    let step = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut count = 0;

    let named = params.to_named();
    let grad_named = grads.params().to_named();
    for ti in 0..named.len() {
        let g: Vec<f64> = grad_named[ti].1.iter().copied().collect();
        for idx in 0..named[ti].1.len() {
            let mut f = [0.0; 2];
            for (k, d) in [step, -step].into_iter().enumerate() {
                let mut p = named.clone();
                p[ti].1.as_slice_mut().unwrap()[idx] += d;
                f[k] = loss(&block, &FusionParams::from_named(cfg.heads, p).unwrap());
            }
            worst = worst.max(rel(g[idx], (f[0] - f[1]) / (2.0 * step)));
            count += 1;
        }
    }
    for vi in 0..block.views.len() {
        let g: Vec<f64> = grads.views[vi].iter().copied().collect();
        for idx in 0..block.views[vi].len() {
            let mut f = [0.0; 2];
            for (k, d) in [step, -step].into_iter().enumerate() {
                let mut b = block.clone();
                b.views[vi].as_slice_mut().unwrap()[idx] += d;
                f[k] = loss(&b, &params);
            }
            worst = worst.max(rel(g[idx], (f[0] - f[1]) / (2.0 * step)));
            count += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{count} entries, max relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn c8_polyak() -> Outcome {
    let cfg = FusionConfig::REDUCED;
    let target = FusionParams::<f64>::init(&cfg, 8).map_err(|e| e.to_string())?;
    let online = FusionParams::<f64>::init(&cfg, 9).map_err(|e| e.to_string())?;
    let t: Vec<_> = target.to_named().into_iter().map(|(_, a)| a).collect();
    let o: Vec<_> = online.to_named().into_iter().map(|(_, a)| a).collect();
    let keep = polyak_update(&t, &o, 1.0).map_err(|e| e.to_string())?;
    let copy = polyak_update(&t, &o, 0.0).map_err(|e| e.to_string())?;
    let mid = polyak_update(&t, &o, 0.5).map_err(|e| e.to_string())?;
    let fixed = polyak_update(&t, &t, 0.5).map_err(|e| e.to_string())?;
    let mid_ok = mid.iter().zip(t.iter().zip(&o)).all(|(m, (a, b))| *m == (a * 0.5 + b * 0.5));
    check(
        keep == t && copy == o && fixed == t && mid_ok,
        "tau 1 keeps target, tau 0 copies online, tau 0.5 midpoint".into(),
    )
}

fn brute_force_froc(dets: &[Detection], gts: &[GroundTruth], num_images: usize, rates: &[f64]) -> Vec<f64> {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= t).collect();
        kept.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.image_key.cmp(&b.image_key))
                .then_with(|| {
                    let (x, y) = (a.bbox.to_array(), b.bbox.to_array());
                    x.iter().zip(&y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        let mut used = vec![false; gts.len()];
        let (mut tp, mut fp) = (0usize, 0usize);
        for d in kept {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image_key != d.image_key {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, o)) if o > 0.5 => {
                    used[gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
        }
        points.push((tp, fp));
    }
    rates
        .iter()
        .map(|&r| {
            let tp = points
                .iter()
                .filter(|(_, fp)| *fp as f64 / num_images as f64 <= r)
                .map(|(tp, _)| *tp)
                .max()
                .unwrap_or(0);
            tp as f64 / gts.len() as f64
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box<f64> {
    let x = rng.gen_range(0..20) as f64;
    let y = rng.gen_range(0..20) as f64;
    Box::new(x, y, x + rng.gen_range(2..10) as f64, y + rng.gen_range(2..10) as f64)
}

fn c9_froc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..200 {
        let n_images = rng.gen_range(1..=5);
        let keys: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for key in &keys {
            let gt_here: Vec<Box<f64>> = (0..rng.gen_range(0..=6)).map(|_| random_box(&mut rng)).collect();
            for _ in 0..rng.gen_range(0..=6) {
                let b = match gt_here.choose(&mut rng) {
                    Some(g) if rng.gen_bool(0.6) => g.translate(rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64),
                    _ => random_box(&mut rng),
                };
                dets.push(Detection::new(key.clone(), b, rng.gen_range(1..=8) as f64 / 8.0));
            }
            gts.extend(gt_here.into_iter().map(|b| GroundTruth::new(key.clone(), b)));
        }
        if gts.is_empty() {
            gts.push(GroundTruth::new(keys[0].clone(), random_box(&mut rng)));
        }
        let got = sensitivity_at_fp(&dets, &gts, n_images, &DEFAULT_FP_RATES).map_err(|e| e.to_string())?;
        let want = brute_force_froc(&dets, &gts, n_images, &DEFAULT_FP_RATES);
        let got: Vec<f64> = got.points.iter().map(|p| p.sensitivity).collect();
        if got != want {
            return Err(format!("case {case}: {got:?} vs brute force {want:?}"));
        }
    }
    Ok("200 instances agree exactly".into())
}

fn c10_phantom() -> Outcome {
    let mut min_cover = 1.0f64;
    let mut lesions = 0;
    for seed in 0..5 {
        let phantom = generate_phantom(&PhantomSpec::example(seed)).map_err(|e| e.to_string())?;
        let gts: Vec<GroundTruth> = phantom.records.iter().map(GroundTruth::from).collect();
        let images: BTreeSet<&str> = gts.iter().map(|g| g.image_key.as_str()).collect();
        let dets = oracle_detections(&phantom.records);
        let curve = sensitivity_at_fp(&dets, &gts, images.len(), &DEFAULT_FP_RATES).map_err(|e| e.to_string())?;
        if curve.points.iter().any(|p| format!("{:.2}", 100.0 * p.sensitivity) != "100.00") {
            return Err(format!("seed {seed}: {curve:?}"));
        }
        let (_, h, w) = phantom.volume.dims();
        for (rec, les) in phantom.records.iter().zip(&phantom.lesions) {
            let mask = recist_to_mask(&rec.recist, (h, w)).map_err(|e| e.to_string())?;
            let (mut inside, mut covered) = (0usize, 0usize);
            for r in 0..h {
                for c in 0..w {
                    if les.contains(r, c) {
                        inside += 1;
                        covered += mask[[r, c]] as usize;
                    }
                }
            }
            min_cover = min_cover.min(covered as f64 / inside as f64);
            lesions += 1;
        }
    }
    check(
        min_cover >= 0.6,
        format!("5 phantoms at 100.00, {lesions} lesions, min mask coverage {:.1}%", 100.0 * min_cover),
    )
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lesionkit"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (a, b) = (root.join("a"), root.join("b"));
    run_bin(&["synth", "--seed", "11", "--out-dir", &s(&a)])?;
    run_bin(&["synth", "--seed", "11", "--out-dir", &s(&b)])?;
    let synth_same = dir_bytes(&a) == dir_bytes(&b);

    let gt = s(&a.join("annotations.csv"));
    let (c1, c2) = (root.join("c1.json"), root.join("c2.json"));
    for c in [&c1, &c2] {
        run_bin(&["anchors-optimize", "--gt", &gt, "--seed", "5", "--generations", "60", "--out", &s(c)])?;
    }
    let anchors_same = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap();
    check(
        synth_same && anchors_same,
        format!("synth identical: {synth_same}, anchors-optimize identical: {anchors_same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("windowing oracle", c1_windowing),
        ("dense anchor counts", c2_anchor_counts),
        ("anchor shape", c3_anchor_shape),
        ("DE anchor search", c4_de_search),
        ("fusion output shape", c5_fusion_shape),
        ("attention invariants", c6_attention),
        ("fusion gradient check", c7_gradient_check),
        ("polyak update", c8_polyak),
        ("FROC brute-force oracle", c9_froc_oracle),
        ("end-to-end phantom", c10_phantom),
        ("CLI determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.2}s]", i + 1, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
