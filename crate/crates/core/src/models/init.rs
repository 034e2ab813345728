//! Seeded parameter initialisation. Each variable draws from its own RNG
//! keyed by `(seed, name)`, so results do not depend on construction order.

use std::collections::HashMap;

use candle_core::{Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub(crate) const HEAD_PREFIX: &str = "head.";

pub(crate) fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn fan_in(dims: &[usize]) -> usize {
    dims.iter().skip(1).product::<usize>().max(1)
}

fn initial_values(name: &str, dims: &[usize], seed: u64, siblings: &HashMap<String, Vec<usize>>) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let (stem, leaf) = name.rsplit_once('.').unwrap_or(("", name));
    let mut rng = rng_for(seed, name);
    match leaf {
        "running_mean" => vec![0.0; n],
        "running_var" => vec![1.0; n],
        "weight" if dims.len() == 1 => vec![1.0; n],
        "weight" if is_head(name) => uniform(&mut rng, n, 1.0 / (fan_in(dims) as f64).sqrt()),
        "weight" => uniform(&mut rng, n, (6.0 / fan_in(dims) as f64).sqrt()),
        "bias" => {
            let is_norm = siblings.contains_key(&format!("{stem}.running_mean"));
            match siblings.get(&format!("{stem}.weight")) {
                Some(w) if !is_norm && !is_head(name) => {
                    uniform(&mut rng, n, 1.0 / (fan_in(w) as f64).sqrt())
                }
                _ => vec![0.0; n],
            }
        }
        _ => vec![0.0; n],
    }
}

/// Re-initialises every variable whose name passes `filter`.
pub(crate) fn reinit(map: &VarMap, seed: u64, filter: impl Fn(&str) -> bool) -> Result<()> {
    let data = map.data().lock().expect("varmap lock poisoned");
    let shapes: HashMap<String, Vec<usize>> =
        data.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect();
    let mut names: Vec<&String> = data.keys().filter(|k| filter(k)).collect();
    names.sort();
    for name in names {
        let var: &Var = &data[name];
        let values = initial_values(name, var.dims(), seed, &shapes);
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_values_follow_role() {
        let mut shapes = HashMap::new();
        shapes.insert("a.weight".to_string(), vec![4, 2, 3, 3]);
        shapes.insert("a.bias".to_string(), vec![4]);
        shapes.insert("n.weight".to_string(), vec![4]);
        shapes.insert("n.bias".to_string(), vec![4]);
        shapes.insert("n.running_mean".to_string(), vec![4]);
        assert_eq!(initial_values("n.weight", &[4], 0, &shapes), vec![1.0; 4]);
        assert_eq!(initial_values("n.bias", &[4], 0, &shapes), vec![0.0; 4]);
        assert_eq!(initial_values("n.running_var", &[4], 0, &shapes), vec![1.0; 4]);
        let bound = (1.0f64 / 18.0).sqrt();
        let b = initial_values("a.bias", &[4], 0, &shapes);
        assert!(b.iter().all(|v| v.abs() <= bound) && b.iter().any(|v| *v != 0.0));
        let w = initial_values("a.weight", &[4, 2, 3, 3], 0, &shapes);
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert_eq!(w, initial_values("a.weight", &[4, 2, 3, 3], 0, &shapes));
        assert_ne!(w, initial_values("a.weight", &[4, 2, 3, 3], 1, &shapes));
    }
}
