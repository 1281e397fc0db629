use super::TrainError;

/// Advantages and returns for one agent's decision sequence whose
/// consecutive entries are `dts[j]` environment steps apart:
///
/// `δ_j = R_j + γ^{Δt_j} V_{j+1} − V_j` and
/// `A_j = δ_j + (γλ)^{Δt_j} A_{j+1}`, with `V_n = bootstrap`, `A_n = 0`.
/// Returns are `A + V`.
pub fn modified_gae(
    rewards: &[f64],
    values: &[f64],
    dts: &[u64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    if n == 0 {
        return Err(TrainError::EmptyBuffer);
    }
    if values.len() != n || dts.len() != n {
        return Err(TrainError::Config(format!(
            "gae inputs disagree in length: {n} rewards, {} values, {} dts",
            values.len(),
            dts.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for j in (0..n).rev() {
        let dt = i32::try_from(dts[j]).unwrap_or(i32::MAX);
        let delta = rewards[j] + gamma.powi(dt) * next_value - values[j];
        next_adv = delta + (gamma * lambda).powi(dt) * next_adv;
        adv[j] = next_adv;
        next_value = values[j];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0 and standard deviation 1 (population).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry_formula() {
        let (adv, ret) = modified_gae(&[1.0], &[1.0], &[2], 0.5, 0.99, 0.95).unwrap();
        assert!((adv[0] - 0.49005).abs() < 1e-12);
        assert!((ret[0] - 1.49005).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(
            modified_gae(&[], &[], &[], 0.0, 0.99, 0.95),
            Err(TrainError::EmptyBuffer)
        ));
    }
}
