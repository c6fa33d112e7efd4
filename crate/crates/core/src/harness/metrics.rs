//! Tension statistics over settled evaluation targets.
//!
//! Inputs are the tension vectors (one per settled target).

use crate::error::{Error, Result};

/// Mean over targets of the population standard deviation across `flexors`.
pub fn tension_spread(tensions: &[Vec<f64>], flexors: &[usize]) -> Result<f64> {
    if flexors.len() < 2 {
        return Err(Error::UndefinedMetric("tension spread needs at least two flexors".into()));
    }
    if tensions.is_empty() {
        return Err(Error::UndefinedMetric("tension spread over no targets".into()));
    }
    let mut total = 0.0;
    for f in tensions {
        let values = flexors
            .iter()
            .map(|&i| f.get(i).copied().ok_or_else(|| Error::shape("flexor index", i + 1, f.len())))
            .collect::<Result<Vec<f64>>>()?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        total += var.sqrt();
    }
    Ok(total / tensions.len() as f64)
}

/// `E_f = |f̄_i − f̄_j| / (f̄_i + f̄_j)` and the peak tension of muscle `j`.
pub fn tension_similarity(tensions: &[Vec<f64>], i: usize, j: usize) -> Result<(f64, f64)> {
    if i == j {
        return Err(Error::UndefinedMetric("tension similarity of a muscle with itself".into()));
    }
    if tensions.is_empty() {
        return Err(Error::UndefinedMetric("tension similarity over no targets".into()));
    }
    let width = i.max(j) + 1;
    if let Some(f) = tensions.iter().find(|f| f.len() < width) {
        return Err(Error::shape("tension vector", width, f.len()));
    }
    let n = tensions.len() as f64;
    let mean_i = tensions.iter().map(|f| f[i]).sum::<f64>() / n;
    let mean_j = tensions.iter().map(|f| f[j]).sum::<f64>() / n;
    let denom = mean_i + mean_j;
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric("mean tensions sum to zero".into()));
    }
    let f_max = tensions.iter().map(|f| f[j]).fold(f64::NEG_INFINITY, f64::max);
    Ok(((mean_i - mean_j).abs() / denom, f_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_cases() {
        assert_eq!(tension_spread(&[vec![5.0, 20.0, 20.0, 20.0]], &[1, 2, 3]).unwrap(), 0.0);
        let s = tension_spread(&[vec![0.0, 30.0, 40.0, 50.0]], &[1, 2, 3]).unwrap();
        assert!((s - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s - 8.1650).abs() < 1e-4);
        let two = tension_spread(&[vec![1.0, 3.0], vec![0.0, 10.0]], &[0, 1]).unwrap();
        assert!((two - (1.0 + 5.0) / 2.0).abs() < 1e-12);
        assert!(tension_spread(&[vec![1.0, 2.0]], &[1]).is_err());
    }

    #[test]
    fn similarity_cases() {
        let eq = vec![vec![0.0, 12.0, 12.0]; 3];
        assert_eq!(tension_similarity(&eq, 1, 2).unwrap().0, 0.0);
        let (e, _) = tension_similarity(&[vec![30.0, 10.0]], 0, 1).unwrap();
        assert_eq!(e, 0.5);
        let (_, f_max) = tension_similarity(&vec![vec![5.0, 20.0]; 4], 0, 1).unwrap();
        assert_eq!(f_max, 20.0);
        assert!(matches!(
            tension_similarity(&[vec![0.0, 0.0]], 0, 1),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
