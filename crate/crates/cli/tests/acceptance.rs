//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fforge::dataset::{read_summary_csv, write_predictions_csv};
use fforge::ensemble::{combine, footprints_from_prediction, PredictionRaster};
use fforge::evaluation::{harmonic_f1, match_polygons};
use fforge::geometry::{parse_wkt, to_wkt, BinaryMask, Point, Polygon, Wkt};
use fforge::labeling::signed_distance;
use fforge::raster::{channel_stats, normalize_image, BandStats};
use fforge::tiling::{reassemble, slice};
use fforge::MultiBandImage;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn published_f_scores() -> Outcome {
    // city, precision, recall, reported F-score
    let rows = [
        ("Vegas", 0.9300, 0.8420, 0.8838),
        ("Paris", 0.8277, 0.7031, 0.7603),
        ("Shanghai", 0.6832, 0.5022, 0.5789),
        ("Khartoum", 0.7031, 0.5303, 0.6045),
    ];
    let mut worst: f64 = 0.0;
    for (city, p, r, f) in rows {
        let got = harmonic_f1(p, r);
        worst = worst.max((got - f).abs());
        ensure((got - f).abs() <= 5e-4, || format!("{city}: {got:.5} vs {f}"))?;
    }
    Ok(format!("4 cities, max deviation {worst:.2e}"))
}

fn brute_signed_distance(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let cap = (h + w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let inside = mask.get(r, c);
            let mut best: Option<usize> = None;
            for r2 in 0..h {
                for c2 in 0..w {
                    if mask.get(r2, c2) != inside {
                        let d = r.abs_diff(r2).pow(2) + c.abs_diff(c2).pow(2);
                        best = Some(best.map_or(d, |b| b.min(d)));
                    }
                }
            }
            let d = best.map_or(cap, |d| (d as f64).sqrt());
            out.push(if inside { d } else { -d });
        }
    }
    out
}

fn distance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pixels = 0;
    for case in 0..200 {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let density: f64 = match case % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.02..0.98),
        };
        // the first two cases per block of four exercise the all-one-class caps
        let bits = (0..h * w)
            .map(|_| if case % 4 < 2 { density > 0.5 } else { rng.gen_bool(density) })
            .collect();
        let mask = BinaryMask::from_bits(h, w, bits).map_err(|e| e.to_string())?;
        let fast = signed_distance(&mask);
        let slow = brute_signed_distance(&mask);
        pixels += h * w;
        ensure(fast == slow, || {
            let i = (0..h * w).find(|&i| fast[i] != slow[i]).unwrap();
            format!("case {case} ({h}x{w}) pixel {i}: {} vs {}", fast[i], slow[i])
        })?;
    }
    Ok(format!("200 masks, {pixels} pixels exact"))
}

fn gradient_suite() -> Outcome {
    let reports = fforge::nn::gradcheck::run_all(20, 3);
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max_rel_err);
        ensure(r.passed() && r.cases >= 1, || {
            format!("{}: max relative error {:e} over {} cases", r.op, r.max_rel_err, r.cases)
        })?;
    }
    let ops: Vec<&str> = reports.iter().map(|r| r.op).collect();
    Ok(format!("{} ({}), max relative error {worst:.1e}", ops.len(), ops.join(", ")))
}

fn tiling_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let bands = rng.gen_range(1..=10);
        let data = (0..bands * 650 * 650).map(|_| rng.gen::<f32>() * 2000.0 - 100.0).collect();
        let img = MultiBandImage::new(format!("r{case}"), bands, 650, 650, data).map_err(|e| e.to_string())?;
        let tiles = slice(&img).map_err(|e| e.to_string())?;
        let back = reassemble(&tiles, img.image_id.clone()).map_err(|e| e.to_string())?;
        let exact = back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact && back.same_shape(&img), || format!("case {case} not bit-exact"))?;
        let cov = tiles.coverage();
        ensure(cov.iter().all(|c| matches!(c, 1 | 2 | 4)), || {
            format!("case {case}: coverage values outside {{1,2,4}}")
        })?;
    }
    Ok("50 rasters bit-exact, coverage in {1,2,4}".into())
}

fn fforge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fforge"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`fforge {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Runs the pipeline once in `dir` and returns the score CSV.
fn pipeline(dir: &Path) -> Result<String, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let manifest = p("data/manifest.json");
    fforge(&["synth", "--seed", "7", "--n", "200", "--size", "128", "--out", &p("data")])?;
    fforge(&["split", "--manifest", &manifest, "--seed", "0", "--out", &p("split.json")])?;
    fforge(&["stats", "--manifest", &manifest, "--split", &p("split.json"), "--out", &p("stats.json")])?;
    fforge(&["preprocess", "--manifest", &manifest, "--stats", &p("stats.json"), "--out", &p("prep")])?;
    fforge(&["label", "--manifest", &manifest, "--out", &p("labels")])?;
    fforge(&[
        "train", "--variant", "v1", "--manifest", &manifest, "--split", &p("split.json"), "--prep", &p("prep"),
        "--labels", &p("labels"), "--out", &p("model"), "--depth", "2", "--base-channels", "8", "--epochs", "40",
        "--batch", "16", "--input-size", "128", "--seed", "0",
    ])?;
    fforge(&[
        "predict", "--model", &p("model"), "--manifest", &manifest, "--prep", &p("prep"), "--split",
        &p("split.json"), "--subset", "test", "--out", &p("pred"),
    ])?;
    fforge(&["polygonize", "--preds", &p("pred"), "--out", &p("pred.csv"), "--min-area", "20"])?;
    fforge(&[
        "score", "--pred", &p("pred.csv"), "--truth", &p("data/summaryData.csv"), "--city", "synth", "--manifest",
        &manifest, "--min-area", "20", "--iou", "0.5", "--out", &p("score.csv"),
    ])?;
    std::fs::read_to_string(p("score.csv")).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let row = first.lines().nth(1).ok_or("score CSV has no data row")?;
    let f1: f64 = row
        .split(',')
        .nth(3)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("unparsable score row {row:?}"))?;
    ensure(f1 >= 0.80, || format!("test F1 {f1:.4} < 0.80 ({row})"))?;
    ensure(first == second, || format!("score CSVs differ:\n{first}\n{second}"))?;
    Ok(format!("test F1 {f1:.4}, repeat run byte-identical"))
}

fn blob_raster(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PredictionRaster {
    let centers: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..8))
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(2.0..9.0)))
        .collect();
    let values = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let v = centers
                .iter()
                .map(|&(cr, cc, s)| (-((r - cr).powi(2) + (c - cc).powi(2)) / (2.0 * s * s)).exp())
                .fold(0.0, f64::max);
            (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0) as f32
        })
        .collect();
    PredictionRaster::new(h, w, values).unwrap()
}

fn ensemble_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut polys = 0;
    for case in 0..30 {
        let (h, w) = (rng.gen_range(16..96), rng.gen_range(16..96));
        let p = blob_raster(&mut rng, h, w);
        let combined = combine(&[&p, &p, &p]).map_err(|e| e.to_string())?;
        ensure(combined == p, || format!("case {case}: combined raster differs"))?;
        for min_area in [0.0, 10.0, 40.0] {
            let single = footprints_from_prediction(&p, 0.5, min_area);
            let fused = footprints_from_prediction(&combined, 0.5, min_area);
            polys += single.len();
            ensure(single == fused, || format!("case {case}: footprints differ at min_area {min_area}"))?;
        }
    }
    Ok(format!("30 rasters, {polys} footprints unchanged"))
}

fn rect_overlaps(a: &[i32; 4], b: &[i32; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Up to `k` pairwise disjoint rectangles proposed by `make`.
fn disjoint_rects(rng: &mut ChaCha8Rng, k: usize, mut make: impl FnMut(&mut ChaCha8Rng) -> [i32; 4]) -> Vec<[i32; 4]> {
    let mut out: Vec<[i32; 4]> = Vec::new();
    for _ in 0..k * 20 {
        if out.len() == k {
            break;
        }
        let r = make(rng);
        if r[2] > r[0] && r[3] > r[1] && !out.iter().any(|o| rect_overlaps(o, &r)) {
            out.push(r);
        }
    }
    out
}

/// Maximum number of one-to-one pairs with IoU at or above the threshold,
/// by exhaustive search over assignments.
fn optimal_tp(iou: &[Vec<f64>], thr: f64) -> usize {
    let n_truth = iou.first().map_or(0, Vec::len);
    let mut best = vec![0usize; 1 << n_truth];
    for row in iou {
        let mut next = best.clone();
        for mask in 0..1usize << n_truth {
            for (t, &v) in row.iter().enumerate() {
                if v >= thr && mask & (1 << t) == 0 {
                    let m2 = mask | (1 << t);
                    next[m2] = next[m2].max(best[mask] + 1);
                }
            }
        }
        best = next;
    }
    best.into_iter().max().unwrap_or(0)
}

fn rect_iou(a: &[i32; 4], b: &[i32; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = (iw * ih) as f64;
    let area = |r: &[i32; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    inter / (area(a) + area(b) - inter)
}

fn scorer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (40, 40);
    let mut total_tp = 0;
    for case in 0..200 {
        let nt = rng.gen_range(0..=8);
        let truth = disjoint_rects(&mut rng, nt, |r| {
            let (x, y) = (r.gen_range(0..36), r.gen_range(0..36));
            [x, y, x + r.gen_range(1..10), y + r.gen_range(1..10)]
        });
        let np = rng.gen_range(0..=8);
        let pred = disjoint_rects(&mut rng, np, |r| {
            if !truth.is_empty() && r.gen_bool(0.7) {
                let t = truth[r.gen_range(0..truth.len())];
                let j = |r: &mut ChaCha8Rng| r.gen_range(-2..=2);
                [t[0] + j(r), t[1] + j(r), t[2] + j(r), t[3] + j(r)]
            } else {
                let (x, y) = (r.gen_range(0..36), r.gen_range(0..36));
                [x, y, x + r.gen_range(1..10), y + r.gen_range(1..10)]
            }
        });
        let clip = |v: &[i32; 4]| [v[0].max(0), v[1].max(0), v[2].min(w as i32), v[3].min(h as i32)];
        let truth: Vec<[i32; 4]> = truth.iter().map(clip).filter(|r| r[2] > r[0] && r[3] > r[1]).collect();
        let pred: Vec<[i32; 4]> = pred.iter().map(clip).filter(|r| r[2] > r[0] && r[3] > r[1]).collect();
        let to_poly = |r: &[i32; 4]| Polygon::rect(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        let pp: Vec<Polygon> = pred.iter().map(to_poly).collect();
        let tp_: Vec<Polygon> = truth.iter().map(to_poly).collect();
        let greedy = match_polygons(&pp, &tp_, h, w, 0.5).map_err(|e| e.to_string())?.tp;
        let ious: Vec<Vec<f64>> = pred.iter().map(|p| truth.iter().map(|t| rect_iou(p, t)).collect()).collect();
        let best = optimal_tp(&ious, 0.5);
        total_tp += best;
        ensure(greedy == best, || format!("case {case}: greedy tp {greedy}, optimal {best}"))?;
    }
    Ok(format!("200 instances agree, {total_tp} true positives"))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let bands = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let imgs: Vec<MultiBandImage> = (0..3)
            .map(|k| {
                let scale = rng.gen_range(1.0..5000.0);
                let data = (0..bands * h * w)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal).exp() * scale) as f32)
                    .collect();
                MultiBandImage::new(format!("n{case}_{k}"), bands, h, w, data).unwrap()
            })
            .collect();
        let refs: Vec<&MultiBandImage> = imgs.iter().collect();
        let stats: Vec<BandStats> = (0..bands)
            .map(|c| channel_stats(&refs, c))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for img in &imgs {
            let out = normalize_image(img, &stats).map_err(|e| e.to_string())?;
            ensure(out.data().iter().all(|v| (0.0..=1.0).contains(v)), || {
                format!("case {case}: value outside [0,1]")
            })?;
        }
    }
    let draws: Vec<f32> = (0..1_000_000).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let img = MultiBandImage::new("normal", 1, 1000, 1000, draws).unwrap();
    let s = channel_stats(&[&img], 0).map_err(|e| e.to_string())?;
    ensure((s.lo + 2.0).abs() <= 0.02 && (s.hi - 2.0).abs() <= 0.02, || {
        format!("bounds {:.4}, {:.4}", s.lo, s.hi)
    })?;
    Ok(format!("20 image sets within [0,1], normal bounds {:.4} / {:.4}", s.lo, s.hi))
}

fn random_ring(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = rng.gen_range(3..12);
    let mut ring: Vec<Point> = (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => (rng.gen_range(0..650) as f64, rng.gen_range(0..650) as f64),
            1 => (rng.gen_range(0.0..650.0), rng.gen_range(0.0..650.0)),
            _ => (rng.gen_range(-1e7..1e7), rng.gen::<f64>() * 1e-6),
        })
        .collect();
    ring.push(ring[0]);
    ring
}

fn random_polygon(rng: &mut ChaCha8Rng) -> Polygon {
    let holes = (0..rng.gen_range(0..3)).map(|_| random_ring(rng)).collect();
    Polygon::new(random_ring(rng), holes).unwrap()
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..200 {
        let p = random_polygon(&mut rng);
        let text = to_wkt(&p);
        let back = parse_wkt(&text).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == Wkt::Polygon(p), || format!("case {case}: WKT mismatch for {text}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..100 {
        let preds: Vec<(String, Vec<Polygon>)> = (0..rng.gen_range(1..5))
            .map(|i| {
                let polys = (0..rng.gen_range(0..6)).map(|_| random_polygon(&mut rng)).collect();
                (format!("img_{case}_{i}"), polys)
            })
            .collect();
        let path = dir.path().join(format!("c{case}.csv"));
        write_predictions_csv(&path, &preds).map_err(|e| e.to_string())?;
        let read = read_summary_csv(&path).map_err(|e| e.to_string())?;
        ensure(read.len() == preds.len(), || format!("case {case}: image count differs"))?;
        for (id, polys) in &preds {
            let got: Vec<Polygon> = read[id].iter().map(|r| r.polygon.clone()).collect();
            ensure(&got == polys, || format!("case {case}: {id} differs"))?;
        }
    }
    Ok("200 WKT polygons and 100 CSV files vertex-exact".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 published F-scores", published_f_scores),
        ("2 distance transform oracle", distance_oracle),
        ("3 gradient suite", gradient_suite),
        ("4 tiling round trip", tiling_round_trip),
        ("5 end-to-end synthetic benchmark", end_to_end),
        ("6 ensemble invariance", ensemble_invariance),
        ("7 scorer oracle", scorer_oracle),
        ("8 normalization", normalization),
        ("9 format round trips", format_round_trips),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS  {name} [{}] {detail}", secs(took)),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} [{}] {why}", secs(took));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
