//! Dataset generation checked with an independently trained linear probe.

use infomtl::data::{generate_synthetic, Split, SyntheticConfig};

/// Multinomial logistic regression fitted by full-batch gradient descent.
struct Probe {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Probe {
    fn fit(split: &Split, classes: usize, iters: usize, lr: f64) -> Self {
        let d = split.dx;
        let n = split.len();
        let mut w = vec![vec![0.0; d]; classes];
        let mut b = vec![0.0; classes];
        for _ in 0..iters {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for i in 0..n {
                let x = split.row(i);
                let p = softmax(&logits(&w, &b, x));
                for c in 0..classes {
                    let g = p[c] - f64::from(u8::from(c == split.labels[i]));
                    gb[c] += g;
                    for (gw, xv) in gw[c].iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
            }
            for c in 0..classes {
                b[c] -= lr * gb[c] / n as f64;
                for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                    *wv -= lr * g / n as f64;
                }
            }
        }
        Probe { w, b }
    }

    fn accuracy(&self, split: &Split) -> f64 {
        let hits = (0..split.len())
            .filter(|&i| {
                let l = logits(&self.w, &self.b, split.row(i));
                let pred = (0..l.len()).max_by(|&a, &c| l[a].total_cmp(&l[c])).unwrap();
                pred == split.labels[i]
            })
            .count();
        hits as f64 / split.len() as f64
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn noiseless_labels_are_linearly_recoverable() {
    let mut cfg = SyntheticConfig::small(3, 600, 3);
    cfg.seed = 21;
    let ds = generate_synthetic(&cfg).unwrap();
    for (t, data) in ds.data.iter().enumerate() {
        let probe = Probe::fit(&data.train, 3, 2000, 2.0);
        let acc = probe.accuracy(&data.train);
        assert!(acc > 0.95, "task {t}: train accuracy {acc}");
    }
}

#[test]
fn half_label_noise_destroys_binary_signal() {
    let mut cfg = SyntheticConfig::small(1, 400, 2);
    cfg.label_noise = 0.5;
    cfg.seed = 5;
    cfg.tasks[0].test = 6000;
    let ds = generate_synthetic(&cfg).unwrap();
    let data = &ds.data[0];
    let probe = Probe::fit(&data.train, 2, 300, 0.5);
    let acc = probe.accuracy(&data.test);
    assert!((acc - 0.5).abs() <= 0.03, "held-out accuracy {acc}");
}

#[test]
fn more_redundant_dims_never_help_a_fixed_probe() {
    for seed in 0..3 {
        let mut accs = Vec::new();
        for redundant in [0, 40, 160] {
            let mut cfg = SyntheticConfig::small(1, 60, 2);
            cfg.redundant_dims = redundant;
            cfg.seed = 100 + seed;
            cfg.tasks[0].val = 3000;
            let ds = generate_synthetic(&cfg).unwrap();
            let probe = Probe::fit(&ds.data[0].train, 2, 300, 0.5);
            accs.push(probe.accuracy(&ds.data[0].val));
        }
        assert!(
            accs[0] >= accs[1] && accs[1] >= accs[2],
            "seed {seed}: {accs:?}"
        );
    }
}
