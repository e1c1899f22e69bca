mod common;

use common::sh_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoke_gs::sh::{eval_sh_basis, sh_basis_jacobian, ENCODING_DIM, MAX_DEGREE};

fn random_dir(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

#[test]
fn basis_matches_legendre_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let d = random_dir(&mut rng);
        let ours = eval_sh_basis(MAX_DEGREE, d).unwrap();
        let oracle = sh_oracle(MAX_DEGREE as u32, d);
        for (i, (a, b)) in ours.iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() < 1e-12, "term {i} at {d:?}: {a} vs {b}");
        }
    }
}

#[test]
fn monte_carlo_orthonormality() {
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gram = vec![0.0; ENCODING_DIM * ENCODING_DIM];
    for _ in 0..n {
        let y = eval_sh_basis(MAX_DEGREE, random_dir(&mut rng)).unwrap();
        for i in 0..ENCODING_DIM {
            for j in i..ENCODING_DIM {
                gram[i * ENCODING_DIM + j] += y[i] * y[j];
            }
        }
    }
    let area = 4.0 * std::f64::consts::PI;
    for i in 0..ENCODING_DIM {
        for j in i..ENCODING_DIM {
            let v = gram[i * ENCODING_DIM + j] * area / n as f64;
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 2e-2, "<Y{i}, Y{j}> = {v}");
        }
    }
}

/// Rotation about an arbitrary axis by Rodrigues' formula.
fn rotate(axis: [f64; 3], angle: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [0, 1, 2].map(|i| v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c))
}

#[test]
fn per_degree_norm_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let d = random_dir(&mut rng);
        let r = rotate(random_dir(&mut rng), rng.random_range(0.0..6.3), d);
        let (a, b) = (
            eval_sh_basis(MAX_DEGREE, d).unwrap(),
            eval_sh_basis(MAX_DEGREE, r).unwrap(),
        );
        for l in 0..=MAX_DEGREE {
            let band = l * l..(l + 1) * (l + 1);
            let na: f64 = a[band.clone()].iter().map(|v| v * v).sum();
            let nb: f64 = b[band].iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-9, "degree {l}: {na} vs {nb}");
        }
    }
}

#[test]
fn pole_and_constant_term() {
    let y = eval_sh_basis(MAX_DEGREE, [0.0, 0.0, 1.0]).unwrap();
    assert!((y[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
    for l in 1..=MAX_DEGREE {
        for m in -(l as i64)..=(l as i64) {
            let i = (l * l + l) as i64 + m;
            if m != 0 {
                assert!(y[i as usize].abs() < 1e-12, "l={l} m={m}");
            }
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    for _ in 0..50 {
        let d = random_dir(&mut rng);
        let jac = sh_basis_jacobian(MAX_DEGREE, d).unwrap();
        for axis in 0..3 {
            // Polynomial extension off the sphere, as the Jacobian is taken.
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let mut yp = vec![0.0; ENCODING_DIM];
            let mut ym = vec![0.0; ENCODING_DIM];
            smoke_gs::sh::sh_polynomial_into(MAX_DEGREE, p, &mut yp);
            smoke_gs::sh::sh_polynomial_into(MAX_DEGREE, m, &mut ym);
            for i in 0..ENCODING_DIM {
                let fd = (yp[i] - ym[i]) / (2.0 * h);
                assert!(
                    (jac[i][axis] - fd).abs() < 1e-6,
                    "term {i} axis {axis}: {} vs {fd}",
                    jac[i][axis]
                );
            }
        }
    }
}
