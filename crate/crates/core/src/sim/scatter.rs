use super::SimError;

/// Pressure-continuity scattering at an N-port junction.
///
/// With incident pressures `p_q` on ports of area `S_q`, the junction pressure
/// is `2 * sum(S_q p_q) / S_total` and every port sends out the junction
/// pressure minus its own incident wave. For a single incident wave on port
/// `p` this gives `r_p = (S_p - sum_{q != p} S_q) / S_total` back into `p` and
/// `1 + r_p` into every other port.
///
/// `loss_area` adds a non-returning side branch (a leak hole or a bend's dead
/// volume) that absorbs part of the incident power.
pub fn scatter_with_loss(incident: &[f64], port_areas: &[f64], loss_area: f64) -> Result<Vec<f64>, SimError> {
    if port_areas.len() < 2 {
        return Err(SimError::FewerThanTwoPorts(port_areas.len()));
    }
    if incident.len() != port_areas.len() {
        return Err(SimError::PortCountMismatch {
            expected: port_areas.len(),
            found: incident.len(),
        });
    }
    if let Some(&bad) = port_areas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(SimError::NonPositiveArea(bad));
    }
    if !(loss_area >= 0.0 && loss_area.is_finite()) {
        return Err(SimError::NonPositiveArea(loss_area));
    }
    let total: f64 = port_areas.iter().sum::<f64>() + loss_area;
    let junction = 2.0 * incident.iter().zip(port_areas).map(|(p, s)| p * s).sum::<f64>() / total;
    Ok(incident.iter().map(|p| junction - p).collect())
}

/// Lossless N-port scattering; returns the outgoing pressure on every port.
pub fn scatter(incident: &[f64], port_areas: &[f64]) -> Result<Vec<f64>, SimError> {
    scatter_with_loss(incident, port_areas, 0.0)
}

/// Reflection and transmission coefficients for a wave arriving on `port`.
pub(crate) fn port_coefficients(port_area: f64, total_area: f64) -> (f64, f64) {
    let t = 2.0 * port_area / total_area;
    (t - 1.0, t)
}
