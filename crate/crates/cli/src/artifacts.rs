//! Artifact writers. Every CSV starts with a `# config_sha256=...,seed=...`
//! line and every JSON object carries the same two fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use wpa_core::diagnostics::mean_drift;
use wpa_core::train::EpochLog;
use wpa_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!("# config_sha256={},seed={}\n", self.config_sha256, self.seed)
    }
}

pub fn write_csv(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    fs::write(path, format!("{}{body}", prov.header()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> Result<()> {
    let mut map = match serde_json::to_value(value).map_err(|e| Error::Input(e.to_string()))? {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    map.insert("config_sha256".into(), Value::String(prov.config_sha256.clone()));
    map.insert("seed".into(), Value::from(prov.seed));
    let mut text = serde_json::to_string_pretty(&Value::Object(map)).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per epoch. White-paper columns stay empty in epochs without a
/// phase.
pub fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(
        "epoch,lr,train_error,test_error,wp_invoked,wp_loss_first,wp_loss_last,uniformity_before,\
         uniformity_after,eval_uniformity_before,eval_uniformity_after,post_wp_test_error,drift_real,drift_wp\n",
    );
    for l in logs {
        let st = l.wp_stats.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.epoch,
            l.lr,
            l.train_error,
            l.test_error,
            l.wp_invoked,
            opt(st.and_then(|x| x.losses.first())),
            opt(st.and_then(|x| x.losses.last())),
            opt(st.map(|x| x.uniformity_before)),
            opt(st.map(|x| x.uniformity_after)),
            opt(st.map(|x| x.eval_uniformity_before)),
            opt(st.map(|x| x.eval_uniformity_after)),
            opt(l.post_wp_test_error),
            opt(l.drift_real.as_deref().map(mean_drift)),
            opt(l.drift_wp.as_deref().map(mean_drift)),
        );
    }
    s
}

/// Long format: `epoch,phase,layer,mean_abs_delta`.
pub fn drift_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,phase,layer,mean_abs_delta\n");
    for l in logs {
        for (phase, layers) in [("real", &l.drift_real), ("wp", &l.drift_wp)] {
            for d in layers.iter().flatten() {
                let _ = writeln!(s, "{},{phase},{},{}", l.epoch, d.name, d.mean_abs_delta);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use wpa_core::diagnostics::LayerDrift;

    fn log(epoch: usize, wp: bool) -> EpochLog {
        EpochLog {
            epoch,
            lr: 0.1,
            train_error: 0.5,
            test_error: 0.25,
            wp_invoked: wp,
            wp_stats: None,
            post_wp_test_error: None,
            drift_real: Some(vec![LayerDrift { name: "head.weight".into(), mean_abs_delta: 0.5 }]),
            drift_wp: None,
        }
    }

    #[test]
    fn vanilla_rows_leave_wp_columns_empty() {
        let csv = epochs_csv(&[log(0, false)]);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "0,0.1,0.5,0.25,false,,,,,,,,0.5,");
        assert_eq!(csv.lines().next().unwrap().split(',').count(), row.split(',').count());
    }

    #[test]
    fn json_gets_provenance_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let prov = Provenance { config_sha256: "ab".into(), seed: 3 };
        write_json(&path, &prov, &serde_json::json!({"x": 1})).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["config_sha256"], "ab");
        assert_eq!(v["seed"], 3);
        assert_eq!(v["x"], 1);
        write_csv(&path, &prov, &drift_csv(&[log(2, false)])).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_sha256=ab,seed=3\nepoch,phase"));
        assert!(text.contains("2,real,head.weight,0.5\n"));
    }
}
