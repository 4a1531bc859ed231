use std::collections::BTreeMap;

use super::types::Situation;
use crate::error::{Error, Result};

/// Oversamples every mode present in `data` up to the size of the largest one.
///
/// Originals keep their order; duplicates are appended per mode (ascending
/// label) by cycling through that mode's originals.
pub fn balance_by_mode(data: &[Situation]) -> Result<Vec<Situation>> {
    let mut labels: Vec<usize> = data
        .iter()
        .map(|s| s.mode_label.ok_or_else(|| Error::InvalidInput("situation without mode label".into())))
        .collect::<Result<_>>()?;
    labels.sort_unstable();
    labels.dedup();
    balance_over_modes(data, &labels)
}

/// Like [`balance_by_mode`] but over an explicit mode set; a listed mode with
/// no samples cannot be oversampled and is an error.
pub fn balance_over_modes(data: &[Situation], modes: &[usize]) -> Result<Vec<Situation>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for (i, s) in data.iter().enumerate() {
        let label = s
            .mode_label
            .ok_or_else(|| Error::InvalidInput(format!("situation {i} has no mode label")))?;
        groups
            .get_mut(&label)
            .ok_or_else(|| Error::InvalidInput(format!("situation {i} has unlisted mode {label}")))?
            .push(i);
    }
    if let Some((m, _)) = groups.iter().find(|(_, g)| g.is_empty()) {
        return Err(Error::InvalidInput(format!("mode {m} has no samples to oversample")));
    }
    let target = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut out = data.to_vec();
    for members in groups.values() {
        out.extend(
            members
                .iter()
                .cycle()
                .take(target - members.len())
                .map(|&i| data[i].clone()),
        );
    }
    Ok(out)
}
