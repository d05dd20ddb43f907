use emoedit_core::domain::NUM_EMOTIONS;
use emoedit_core::synth::{synth_images, SynthConfig};

/// 8x8 average pool per channel, scaled to [0,1].
fn features(img: &emoedit_core::domain::ImageBuffer) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let (bh, bw) = (h / 8, w / 8);
    let mut f = vec![0.0; 8 * 8 * 3 + 1];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / bh).min(7) * 8 + (x / bw).min(7);
            for c in 0..3 {
                f[cell * 3 + c] += img.pixels()[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    let n = (bh * bw) as f64;
    f.iter_mut().take(192).for_each(|v| *v /= n);
    f[192] = 1.0;
    f
}

#[test]
fn raw_pixels_are_linearly_separable() {
    let cfg = SynthConfig::default();
    assert_eq!((cfg.per_class, cfg.side), (100, 64));
    let data: Vec<(Vec<f64>, usize)> = synth_images(&cfg)
        .iter()
        .map(|(img, l)| (features(img), l.index()))
        .collect();
    let dim = data[0].0.len();

    // multinomial logistic regression, full-batch gradient descent
    let mut w = vec![vec![0.0; dim]; NUM_EMOTIONS];
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; dim]; NUM_EMOTIONS];
        for (x, y) in &data {
            let logits: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..NUM_EMOTIONS {
                let p = (logits[k] - m).exp() / z - f64::from(k == *y);
                for (g, xi) in grad[k].iter_mut().zip(x) {
                    *g += p * xi;
                }
            }
        }
        for (wk, gk) in w.iter_mut().zip(&grad) {
            for (a, g) in wk.iter_mut().zip(gk) {
                *a -= lr * g / data.len() as f64;
            }
        }
    }
    let correct = data
        .iter()
        .filter(|(x, y)| {
            let scores: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..NUM_EMOTIONS).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == *y
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.8, "linear probe train accuracy {acc:.3}");
}
