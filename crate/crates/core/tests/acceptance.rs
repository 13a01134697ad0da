//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenforge_core::abstractor::{
    crop_images, flatten_sequence, plan_crops, token_abstract, token_abstract_backward, visual_token_count, CropPlan,
};
use tokenforge_core::corpus::{decode_record, encode_record, validate_record, TokenRecord};
use tokenforge_core::evalkit::{edit_distance, fg_iou, mean_average_precision};
use tokenforge_core::llmalign::{llm_pool_token, reassemble_submaps};
use tokenforge_core::losses::{loss_dis, loss_sig, loss_sim, AlignmentBatch, LossOutput, PairLabels, SigOptions};
use tokenforge_core::model::{init_params, ModelConfig};
use tokenforge_core::tensorcore::{masked_mean_pool, BinaryMask, FeatureGrid, MaskMode};
use tokenforge_core::trainer::{
    alignment_report, generate_synthetic_corpus, train, Objective, Stage, SyntheticCorpusSpec, TrainConfig,
};

const CASES: usize = 100;
const FD_EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// Denominator floor for relative error: central differences on losses of
// order 10 carry round-off near 1e-10, so smaller gradients are compared
// against this floor instead of their own magnitude.
const ABS_FLOOR: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_EPS) - f(x - FD_EPS)) / (2.0 * FD_EPS)
}

fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
}

/// Worst relative error of an alignment loss over every coordinate of e, t, k, b.
fn loss_case_error(
    batch: &AlignmentBatch,
    k: f64,
    b: f64,
    with_scalars: bool,
    f: &dyn Fn(&AlignmentBatch, f64, f64) -> LossOutput,
) -> f64 {
    let out = f(batch, k, b);
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        for i in 0..batch.len() {
            for j in 0..batch.dim() {
                let num = central(
                    |x| {
                        let mut p = batch.clone();
                        if side == 0 {
                            p.e[i][j] = x;
                        } else {
                            p.t[i][j] = x;
                        }
                        f(&p, k, b).value
                    },
                    if side == 0 { batch.e[i][j] } else { batch.t[i][j] },
                );
                let a = if side == 0 { out.grad_e[i][j] } else { out.grad_t[i][j] };
                worst = worst.max(rel_err(a, num));
            }
        }
    }
    if with_scalars {
        worst = worst.max(rel_err(out.grad_k, central(|x| f(batch, x, b).value, k)));
        worst = worst.max(rel_err(out.grad_b, central(|x| f(batch, k, x).value, b)));
    }
    worst
}

fn random_batch(rng: &mut ChaCha8Rng) -> AlignmentBatch {
    let n = rng.gen_range(1..=5);
    let d = rng.gen_range(1..=6);
    AlignmentBatch::new(random_vecs(rng, n, d), random_vecs(rng, n, d)).unwrap()
}

fn gradient_parity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];

    for _ in 0..CASES {
        let batch = random_batch(&mut rng);
        worst[0] = worst[0].max(loss_case_error(&batch, 0.0, 0.0, false, &|p, _, _| loss_dis(p)));
    }
    for _ in 0..CASES {
        let batch = random_batch(&mut rng);
        worst[1] = worst[1].max(loss_case_error(&batch, 0.0, 0.0, false, &|p, _, _| loss_sim(p).unwrap()));
    }
    for case in 0..CASES {
        let batch = random_batch(&mut rng);
        let labels = if case % 2 == 0 {
            PairLabels::Diagonal
        } else {
            PairLabels::ByGroup((0..batch.len()).map(|_| rng.gen_range(0..3)).collect())
        };
        let opts = SigOptions {
            labels,
            normalize: case % 4 >= 2,
        };
        let k = rng.gen_range(0.5..3.0);
        let b = rng.gen_range(-10.0..1.0);
        worst[2] = worst[2].max(loss_case_error(&batch, k, b, true, &|p, k, b| loss_sig(p, k, b, &opts).unwrap()));
    }

    for _ in 0..CASES {
        let s = rng.gen_range(1..=3);
        let (h, w, d) = (s * rng.gen_range(1..=3), s * rng.gen_range(1..=3), rng.gen_range(1..=4));
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureGrid::from_vec(h, w, d, data).unwrap();
        let e: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let r: Vec<f64> = (0..(h / s) * (w / s) * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |f: &FeatureGrid, e: &[f64]| -> f64 {
            let out = token_abstract(f, e, s).unwrap();
            out.output.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let fwd = token_abstract(&f, &e, s).unwrap();
        let grad_out = FeatureGrid::from_vec(h / s, w / s, d, r.clone()).unwrap();
        let (gf, ge) = token_abstract_backward(&f, &e, &fwd, &grad_out);
        for i in 0..f.data.len() {
            let num = central(
                |x| {
                    let mut p = f.clone();
                    p.data[i] = x;
                    objective(&p, &e)
                },
                f.data[i],
            );
            worst[3] = worst[3].max(rel_err(gf.data[i], num));
        }
        for i in 0..d {
            let num = central(
                |x| {
                    let mut p = e.clone();
                    p[i] = x;
                    objective(&f, &p)
                },
                e[i],
            );
            worst[3] = worst[3].max(rel_err(ge[i], num));
        }
    }

    let stages = [Stage::Pretrain, Stage::TokenAlign, Stage::Finetune];
    for case in 0..CASES {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
            image_side: 16,
            cell: 8,
            glyph_classes: 3,
            glyphs_per_image: 2,
            noise: 0.05,
            records: 2,
            seed: case as u64,
        })
        .unwrap();
        let config = TrainConfig {
            batch_size: 2,
            patch_size: 8,
            encoder_dim: 4,
            encoder_layers: 1,
            embed_dim: 6,
            stage: stages[case % 3],
            attention: case % 2 == 1,
            mask_mode: if case % 5 == 0 { MaskMode::Soft } else { MaskMode::Threshold },
            normalize_sig: case % 7 == 0,
            crop_size: 16,
            max_crops: 2,
            window: 4,
            llm_hidden: 5,
            llm_layers: 2,
            llm_tap: 1,
            seed: case as u64,
            ..Default::default()
        };
        let obj = Objective::new(config, corpus.vocab.clone()).unwrap();
        let params = obj.init_params().unwrap();
        let batch: Vec<&TokenRecord> = corpus.records.iter().collect();
        let (_, grads) = obj.loss_and_grads(&params, &batch).unwrap();
        let analytic = grads.flatten();
        let x0 = params.flatten();
        let n = x0.len();
        let mut coords: Vec<usize> = (0..16).map(|_| rng.gen_range(0..n)).collect();
        coords.extend([n - 2, n - 1]);
        let mut p = params.clone();
        for &i in &coords {
            let num = central(
                |x| {
                    p.set_flat(i, x);
                    obj.loss(&p, &batch).unwrap().total
                },
                x0[i],
            );
            p.set_flat(i, x0[i]);
            worst[4] = worst[4].max(rel_err(analytic[i], num));
        }
    }

    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&w| w <= REL_TOL) && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "worst rel err dis {:.1e} sim {:.1e} sig {:.1e} abstract {:.1e} train_step {:.1e} (tol {REL_TOL:.0e}, floor {ABS_FLOOR:.0e}), {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            elapsed.as_secs_f64()
        ),
    )
}

/// Bilinear resample, half-pixel centres, edge-clamped.
fn oracle_resize(src: &[f64], h: usize, w: usize, d: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow * d];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            for c in 0..d {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * d + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * ow + x) * d + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Exact `>= 0.5` decision for a bilinearly resized binary mask, written as a
/// sum over every input pixel with a clamped hat kernel in integer units of
/// `1 / (2 * n_out)`.
fn oracle_mask_resize(m: &BinaryMask, oh: usize, ow: usize) -> Vec<bool> {
    if (oh, ow) == (m.height, m.width) {
        return m.bits.clone();
    }
    let hat = |o: usize, j: usize, n_in: usize, n_out: usize| -> i64 {
        let d = 2 * n_out as i64;
        let src = ((2 * o as i64 + 1) * n_in as i64 - n_out as i64).clamp(0, (n_in as i64 - 1) * d);
        (d - (src - j as i64 * d).abs()).max(0)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut num = 0i64;
            for j in 0..m.height {
                for i in 0..m.width {
                    if m.get(j, i) {
                        num += hat(y, j, m.height, oh) * hat(x, i, m.width, ow);
                    }
                }
            }
            out.push(2 * num >= (2 * oh as i64) * (2 * ow as i64));
        }
    }
    out
}

fn masked_mean_oracle(f: &FeatureGrid, m: &BinaryMask) -> Option<Vec<f64>> {
    let keep = oracle_mask_resize(m, f.height, f.width);
    let mut sum = vec![0.0; f.dim];
    let mut count = 0usize;
    for y in 0..f.height {
        for x in 0..f.width {
            if keep[y * f.width + x] {
                count += 1;
                for c in 0..f.dim {
                    sum[c] += f.data[(y * f.width + x) * f.dim + c];
                }
            }
        }
    }
    (count > 0).then(|| sum.iter().map(|s| s / count as f64).collect())
}

fn llm_pool_oracle(f: &FeatureGrid, m: &BinaryMask) -> Option<Vec<f64>> {
    let r = oracle_resize(&f.data, f.height, f.width, f.dim, m.height, m.width);
    let mut sum = vec![0.0; f.dim];
    let mut count = 0usize;
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                count += 1;
                for c in 0..f.dim {
                    sum[c] += r[(y * m.width + x) * f.dim + c];
                }
            }
        }
    }
    (count > 0).then(|| sum.iter().map(|s| s / count as f64).collect())
}

fn pooling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    let mut empty = 0;
    for _ in 0..500 {
        let (h, w, d) = (rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=5));
        let f = FeatureGrid::from_vec(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (mh, mw) = if rng.gen_bool(0.25) {
            (h, w)
        } else {
            (rng.gen_range(1..=24), rng.gen_range(1..=24))
        };
        let density = rng.gen_range(0.05..0.95);
        let m = BinaryMask::from_fn(mh, mw, |_, _| rng.gen_bool(density));
        for (got, want) in [
            (masked_mean_pool(&f, &m).ok(), masked_mean_oracle(&f, &m)),
            (llm_pool_token(&f, &m).ok().map(|p| p.value), llm_pool_oracle(&f, &m)),
        ] {
            match (got, want) {
                (Some(g), Some(o)) => {
                    for (a, b) in g.iter().zip(&o) {
                        worst = worst.max((a - b).abs());
                    }
                }
                (None, None) => empty += 1,
                _ => mismatched += 1,
            }
        }
    }
    outcome(
        worst <= 1e-12 && mismatched == 0,
        format!("500 cases x 2 poolers, max abs diff {worst:.1e} (tol 1e-12), {mismatched} empty-mask disagreements, {empty} agreed empty"),
    )
}

fn sigmoid_spot_values() -> Outcome {
    let k = std::f64::consts::LN_10;
    let b = -10.0;
    let single = |e: f64, labels: PairLabels| {
        let batch = AlignmentBatch::new(vec![vec![e]], vec![vec![1.0]]).unwrap();
        loss_sig(&batch, k, b, &SigOptions { labels, normalize: false }).unwrap().value
    };
    // ln(1 + exp(-k - 10)) evaluated as exp(x) - exp(2x)/2 + exp(3x)/3 for tiny exp(x)
    let u = (-k + b).exp();
    let oracle = u - u * u / 2.0 + u * u * u / 3.0;
    let at_one = single(1.0, PairLabels::Diagonal);
    // a 2-pair batch with different groups gives each pair z = -1 off the diagonal
    let neg = {
        let batch = AlignmentBatch::new(vec![vec![b / k], vec![0.0]], vec![vec![0.0], vec![1.0]]).unwrap();
        let opts = SigOptions {
            labels: PairLabels::ByGroup(vec![0, 1]),
            normalize: false,
        };
        let all = loss_sig(&batch, k, b, &opts).unwrap().value * 2.0;
        // remove the three pairs whose dot is 0: two with z = +1, one with z = -1
        let sp = |x: f64| (1.0 + x.exp()).ln();
        all - 2.0 * sp(b) - sp(-b)
    };
    let pos = single(b / k, PairLabels::Diagonal);
    let ln2 = std::f64::consts::LN_2;
    let pass = (at_one - 4.53e-6).abs() <= 1e-7
        && (at_one - oracle).abs() <= 1e-15
        && (pos - ln2).abs() <= 1e-12
        && (neg - ln2).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "dot=1 -> {at_one:.6e} (oracle {oracle:.6e}), dot=b/k -> z=+1 {pos:.15} z=-1 {neg:.15} (ln2 {ln2:.15})"
        ),
    )
}

fn shape_contracts() -> Outcome {
    let (crop, patch, s) = (448, 14, 4);
    let config = ModelConfig {
        patch_size: patch,
        encoder_dim: 2,
        encoder_layers: 1,
        embed_dim: 2,
        vocab_size: 3,
        ..Default::default()
    };
    let params = init_params(&config).unwrap();
    let e_s = vec![0.1; 2];
    let mut failures = Vec::new();
    let mut per_image = None;
    for n in 1..=6 {
        let plan = plan_crops(crop, crop * n, crop, 6);
        if plan.tiles() != n {
            failures.push(format!("plan for N={n} has {} tiles", plan.tiles()));
            continue;
        }
        let image = FeatureGrid::filled(crop, crop * n, 3, 0.5);
        let mut grids = Vec::new();
        for sub in crop_images(&image, &plan) {
            let f = params.features(&sub).unwrap();
            grids.push(token_abstract(&f, &e_s, s).unwrap().output);
        }
        let tokens = grids[0].cells();
        per_image.get_or_insert(tokens);
        let n_v = flatten_sequence(&grids).unwrap().len();
        if tokens != 1024 || n_v != 1024 * (n + 1) || visual_token_count(crop, patch, s, n) != n_v {
            failures.push(format!("N={n}: {tokens} per image, n_v {n_v}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} tokens per image, n_v = 1024(N+1) for N in 1..=6", per_image.unwrap_or(0))
        } else {
            failures.join("; ")
        },
    )
}

fn corpus_round_trip() -> Outcome {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        records: 1000,
        seed: 303,
        ..Default::default()
    })
    .unwrap();
    let mut bad = Vec::new();
    for (i, rec) in corpus.records.iter().enumerate() {
        let name = format!("r{i:04}");
        let enc = encode_record(rec, &name).unwrap();
        let dec = decode_record(&enc).unwrap();
        let report = validate_record(&dec, &corpus.vocab);
        let again = encode_record(&dec, &name).unwrap();
        let identical =
            again.image_png == enc.image_png && again.mask_png == enc.mask_png && again.meta_json() == enc.meta_json();
        if !report.is_valid() || !identical || &dec != rec {
            bad.push(i);
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} records, {} failed (first: {:?})", corpus.records.len(), bad.len(), bad.first()),
    )
}

fn synthetic_learnability() -> Outcome {
    let start = Instant::now();
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        records: 250,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let (train_set, held_out) = corpus.records.split_at(200);
    let config = TrainConfig {
        epochs: 100,
        max_steps: Some(1000),
        batch_size: 8,
        lr: 3e-3,
        patch_size: 8,
        encoder_dim: 32,
        embed_dim: 32,
        seed: 1,
        weights: tokenforge_core::losses::LossWeights {
            dis: 1.0,
            sim: 1.0,
            sig: 0.01,
        },
        ..Default::default()
    };
    let out = train(&config, &corpus.vocab, train_set, None).unwrap();
    let report = alignment_report(&out.params, &corpus.vocab, held_out, 0.5).unwrap();
    let elapsed = start.elapsed();
    let pass = out.metrics.len() <= 1000
        && elapsed < Duration::from_secs(300)
        && report.pair_auc >= 0.95
        && report.mean_fg_iou >= 0.5
        && report.text_foreground > report.background_foreground;
    outcome(
        pass,
        format!(
            "{} steps, AUC {:.4} (>= 0.95), fgIoU {:.4} (>= 0.5), negation text {:.4} > bg {:.4}, {:.1}s",
            out.metrics.len(),
            report.pair_auc,
            report.mean_fg_iou,
            report.text_foreground,
            report.background_foreground,
            elapsed.as_secs_f64()
        ),
    )
}

fn dp_edit_distance(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + cost);
        }
    }
    t[a.len()][b.len()]
}

/// AP from pairwise rank counting: each item's rank is one plus the number of
/// items scored higher, or equal with a lower index.
fn brute_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let total = relevant.iter().filter(|&&r| r).count();
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| relevant[i]) {
        let ri = rank(i);
        let hits = (0..n).filter(|&j| relevant[j] && rank(j) <= ri).count();
        sum += hits as f64 / ri as f64;
    }
    sum / total as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let alphabet: Vec<char> = "abcé ".chars().collect();
    let mut edit_bad = 0;
    for _ in 0..10_000 {
        let word = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(0..=12);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (word(&mut rng), word(&mut rng));
        let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let want = dp_edit_distance(&ac, &bc);
        let got = edit_distance(&a, &b);
        let longest = ac.len().max(bc.len());
        let norm = if longest == 0 { 0.0 } else { want as f64 / longest as f64 };
        if got.raw != want || got.normalized != norm {
            edit_bad += 1;
        }
    }
    let mut map_worst: f64 = 0.0;
    for _ in 0..1000 {
        let (q, g) = (rng.gen_range(1..=4), rng.gen_range(1..=10));
        let mut scores = Vec::new();
        let mut rel = Vec::new();
        for _ in 0..q {
            scores.push((0..g).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect::<Vec<f64>>());
            let mut r: Vec<bool> = (0..g).map(|_| rng.gen_bool(0.4)).collect();
            let forced = rng.gen_range(0..g);
            r[forced] = true;
            rel.push(r);
        }
        let got = mean_average_precision(&scores, &rel).unwrap().value;
        let want = scores.iter().zip(&rel).map(|(s, r)| brute_ap(s, r)).sum::<f64>() / q as f64;
        map_worst = map_worst.max((got - want).abs());
    }
    let mut iou_bad = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let p = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
        let t = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
        let (mut inter, mut union) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                inter += (p.get(y, x) && t.get(y, x)) as usize;
                union += (p.get(y, x) || t.get(y, x)) as usize;
            }
        }
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        if fg_iou(&p, &t).unwrap() != want {
            iou_bad += 1;
        }
    }
    outcome(
        edit_bad == 0 && map_worst <= 1e-12 && iou_bad == 0,
        format!(
            "edit distance 10000 pairs, {edit_bad} mismatches; mAP 1000 configs, max diff {map_worst:.1e}; fg_iou 1000 masks, {iou_bad} mismatches"
        ),
    )
}

fn crop_oracle(h: usize, w: usize, crop: usize, max: usize) -> (usize, usize) {
    let mut cands = Vec::new();
    for r in 1..=max {
        for c in 1..=max {
            if r * c <= max {
                let aspect = ((w as f64 / h as f64).ln() - (c as f64 / r as f64).ln()).abs();
                let fit = ((h * w) as f64 / (r * c * crop * crop) as f64).ln().abs();
                cands.push((aspect, fit, r, c));
            }
        }
    }
    let best_aspect = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    cands.retain(|c| c.0 - best_aspect <= 1e-12);
    let best_fit = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    cands.retain(|c| c.1 - best_fit <= 1e-12);
    cands.sort_by_key(|&(_, _, r, c)| (std::cmp::Reverse(r * c), r));
    (cands[0].2, cands[0].3)
}

fn crop_planner() -> Outcome {
    let sides: Vec<usize> = (112..=1344).step_by(112).collect();
    let mut bad = Vec::new();
    for &h in &sides {
        for &w in &sides {
            let plan = plan_crops(h, w, 448, 6);
            if (plan.rows, plan.cols) != crop_oracle(h, w, 448, 6) {
                bad.push((h, w));
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} sizes, {} disagreements {:?}", sides.len() * sides.len(), bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

fn reassembly_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (side, dim) = (4, 3);
    let mut plans = 0;
    let mut bad = Vec::new();
    for rows in 1..=6 {
        for cols in 1..=6 / rows {
            plans += 1;
            let plan = CropPlan {
                rows,
                cols,
                crop_size: 448,
            };
            let grids: Vec<FeatureGrid> = (0..plan.images())
                .map(|_| {
                    let data = (0..side * side * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
                    FeatureGrid::from_vec(side, side, dim, data).unwrap()
                })
                .collect();
            let seq = flatten_sequence(&grids).unwrap();
            let map = reassemble_submaps(&seq.tokens, &plan, side).unwrap();
            let mut ok = seq.to_grids() == grids;
            for (t, g) in grids.iter().enumerate().skip(1) {
                let (tr, tc) = ((t - 1) / cols, (t - 1) % cols);
                for y in 0..side {
                    for x in 0..side {
                        let a = map.cell(tr * side + y, tc * side + x);
                        let b = g.cell(y, x);
                        ok &= a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
                    }
                }
            }
            if !ok {
                bad.push((rows, cols));
            }
        }
    }
    outcome(bad.is_empty(), format!("{plans} plans with N <= 6, {} not bit-exact {bad:?}", bad.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient parity", gradient_parity),
        ("pooling oracle equivalence", pooling_oracles),
        ("sigmoid spot values", sigmoid_spot_values),
        ("shape contracts", shape_contracts),
        ("corpus round-trip", corpus_round_trip),
        ("synthetic learnability", synthetic_learnability),
        ("metric oracles", metric_oracles),
        ("crop planner", crop_planner),
        ("reassembly identity", reassembly_identity),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
