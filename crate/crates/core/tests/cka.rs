use damim_core::analysis::{cka, FeatureMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize, p: usize) -> FeatureMatrix {
    FeatureMatrix::new(n, p, (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// HSIC(K, L) = tr(K H L H) / (n-1)² with an explicit centering matrix.
fn hsic(k: &[f64], l: &[f64], n: usize) -> f64 {
    let h: Vec<f64> = (0..n * n)
        .map(|idx| if idx / n == idx % n { 1.0 } else { 0.0 } - 1.0 / n as f64)
        .collect();
    let khlh = matmul(&matmul(&matmul(k, &h, n, n, n), l, n, n, n), &h, n, n, n);
    (0..n).map(|i| khlh[i * n + i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

fn oracle(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let n = x.rows;
    let k = matmul(&x.data, &transpose(&x.data, n, x.cols), n, x.cols, n);
    let l = matmul(&y.data, &transpose(&y.data, n, y.cols), n, y.cols, n);
    hsic(&k, &l, n) / (hsic(&k, &k, n) * hsic(&l, &l, n)).sqrt()
}

fn scaled(x: &FeatureMatrix, c: f64) -> FeatureMatrix {
    FeatureMatrix::new(x.rows, x.cols, x.data.iter().map(|v| v * c).collect()).unwrap()
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
fn orthogonal(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    (0..p * p).map(|idx| cols[idx % p][idx / p]).collect()
}

#[test]
fn matches_explicit_centering_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(3..12);
        let px = rng.random_range(1..6);
        let x = random(&mut rng, n, px);
        let py = rng.random_range(1..6);
        let y = random(&mut rng, n, py);
        let got = cka(&x, &y).unwrap();
        assert!((got - oracle(&x, &y)).abs() < 1e-8, "{got} vs {}", oracle(&x, &y));
    }
}

#[test]
fn self_similarity_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let x = random(&mut rng, 20, 7);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        for c in [-3.5, 0.01, 250.0] {
            assert!((cka(&x, &scaled(&x, c)).unwrap() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn orthogonal_transform_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (n, p) = (15, 6);
        let x = random(&mut rng, n, p);
        let y = random(&mut rng, n, p);
        let q = orthogonal(&mut rng, p);
        let xq = FeatureMatrix::new(n, p, matmul(&x.data, &q, n, p, p)).unwrap();
        assert!((cka(&xq, &y).unwrap() - cka(&x, &y).unwrap()).abs() < 1e-6);
        assert!((cka(&xq, &x).unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn symmetric_and_in_range_over_many_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let n = rng.random_range(2..10);
        let px = rng.random_range(1..5);
        let x = random(&mut rng, n, px);
        let py = rng.random_range(1..5);
        let y = random(&mut rng, n, py);
        let a = cka(&x, &y).unwrap();
        let b = cka(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!((0.0..=1.0 + 1e-9).contains(&a), "{a}");
    }
}

#[test]
fn constant_features_give_zero() {
    let x = FeatureMatrix::new(4, 2, vec![1.0; 8]).unwrap();
    let y = FeatureMatrix::new(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
    assert_eq!(cka(&x, &y).unwrap(), 0.0);
}
