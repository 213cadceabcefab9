use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AifError, Result};

/// One logged step of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub t: f64,
    pub z0_est: Vec<f64>,
    pub q_true: Vec<f64>,
    pub action: Vec<f64>,
    pub vfe: f64,
    /// Norm of the proprioceptive position residual.
    pub e_proprio: f64,
    /// Norm of the visual residual, absent when the channel is not reporting.
    pub e_visual: Option<f64>,
    pub perturb_active: bool,
}

/// Per-trial outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Joint error to the joint goal, or the estimation error `‖z⁰ − q‖`
    /// when there is no joint goal.
    pub final_joint_err_rad: f64,
    /// End-effector error to the visual goal, or between the estimated and
    /// true end-effector when there is no visual goal.
    pub final_ee_err_m: f64,
    pub converged: bool,
    /// Time-averaged joint error to the goal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_err_rad: Option<f64>,
    /// End-effector displacement along the shift axis after the visual
    /// shift, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_response_m: Option<f64>,
    /// Mean estimation error before and after a channel drop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_drop_err_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_drop_err_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_self: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classified_self: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_evidence: Option<f64>,
}

impl TrialSummary {
    pub fn new(trial: usize, final_joint_err_rad: f64, final_ee_err_m: f64, converged: bool) -> Self {
        Self {
            trial,
            variant: None,
            final_joint_err_rad,
            final_ee_err_m,
            converged,
            tracking_err_rad: None,
            shift_response_m: None,
            pre_drop_err_rad: None,
            post_drop_err_rad: None,
            label_self: None,
            classified_self: None,
            mean_evidence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub n_joints: usize,
    pub rows: Vec<StepRow>,
    pub summary: TrialSummary,
}

impl TrialRecord {
    pub fn file_stem(&self) -> String {
        match &self.summary.variant {
            Some(v) => format!("trial_{:03}_{v}", self.summary.trial),
            None => format!("trial_{:03}", self.summary.trial),
        }
    }

    pub fn final_vfe(&self) -> Option<f64> {
        self.rows.last().map(|r| r.vfe)
    }
}

pub fn csv_header(n_joints: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "t".to_string()];
    for prefix in ["z0_est", "q_true", "action"] {
        h.extend((0..n_joints).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(
        ["vfe", "e_proprio", "e_visual", "perturb_active"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn csv_err(e: csv::Error) -> AifError {
    AifError::Parse {
        what: "trial CSV".into(),
        message: e.to_string(),
    }
}

pub fn write_trial_csv<W: Write>(out: W, record: &TrialRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(record.n_joints)).map_err(csv_err)?;
    for row in &record.rows {
        let mut fields = vec![row.step.to_string(), row.t.to_string()];
        for v in row.z0_est.iter().chain(&row.q_true).chain(&row.action) {
            fields.push(v.to_string());
        }
        fields.push(row.vfe.to_string());
        fields.push(row.e_proprio.to_string());
        fields.push(row.e_visual.map(|v| v.to_string()).unwrap_or_default());
        fields.push(u8::from(row.perturb_active).to_string());
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the step rows back from a trial CSV.
pub fn read_trial_csv(path: &Path) -> Result<(usize, Vec<StepRow>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let n = header.iter().filter(|h| h.starts_with("z0_est_")).count();
    if header.iter().collect::<Vec<_>>() != csv_header(n) {
        return Err(AifError::Parse {
            what: path.display().to_string(),
            message: "unexpected trial CSV header".into(),
        });
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| AifError::Parse {
            what: path.display().to_string(),
            message: format!("bad number '{s}': {e}"),
        })
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f: Vec<&str> = rec.iter().collect();
        let vec_at = |start: usize| -> Result<Vec<f64>> { f[start..start + n].iter().map(|s| num(s)).collect() };
        let base = 2 + 3 * n;
        rows.push(StepRow {
            step: num(f[0])? as usize,
            t: num(f[1])?,
            z0_est: vec_at(2)?,
            q_true: vec_at(2 + n)?,
            action: vec_at(2 + 2 * n)?,
            vfe: num(f[base])?,
            e_proprio: num(f[base + 1])?,
            e_visual: if f[base + 2].is_empty() { None } else { Some(num(f[base + 2])?) },
            perturb_active: f[base + 3] == "1",
        });
    }
    Ok((n, rows))
}

/// Aggregate over a set of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub trials: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub mean_final_joint_err_rad: f64,
    pub std_final_joint_err_rad: f64,
    pub mean_final_ee_err_m: f64,
    pub std_final_ee_err_m: f64,
    pub mean_vfe_final: f64,
    pub mean_tracking_err_rad: Option<f64>,
    /// Per-step VFE averaged over trials (over the trials still running at
    /// that step).
    pub mean_vfe_trajectory: Vec<f64>,
}

/// The summary document written next to the trial logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub scenario: String,
    pub trials: usize,
    pub converged: usize,
    pub mean_final_joint_err_rad: f64,
    pub std_final_joint_err_rad: f64,
    pub mean_final_ee_err_m: f64,
    pub mean_vfe_final: f64,
}

impl From<&Summary> for SummaryJson {
    fn from(s: &Summary) -> Self {
        Self {
            scenario: s.scenario.clone(),
            trials: s.trials,
            converged: s.converged,
            mean_final_joint_err_rad: s.mean_final_joint_err_rad,
            std_final_joint_err_rad: s.std_final_joint_err_rad,
            mean_final_ee_err_m: s.mean_final_ee_err_m,
            mean_vfe_final: s.mean_vfe_final,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(scenario: &str, records: &[TrialRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(AifError::EmptyRecords);
    }
    let joint: Vec<f64> = records.iter().map(|r| r.summary.final_joint_err_rad).collect();
    let ee: Vec<f64> = records.iter().map(|r| r.summary.final_ee_err_m).collect();
    let (mean_j, std_j) = mean_std(&joint);
    let (mean_e, std_e) = mean_std(&ee);
    let finals: Vec<f64> = records.iter().filter_map(TrialRecord::final_vfe).collect();
    let mean_vfe_final = if finals.is_empty() { f64::NAN } else { mean_std(&finals).0 };
    let tracking: Vec<f64> = records.iter().filter_map(|r| r.summary.tracking_err_rad).collect();
    let converged = records.iter().filter(|r| r.summary.converged).count();

    let longest = records.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let mean_vfe_trajectory = (0..longest)
        .map(|k| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.rows.get(k).map(|row| row.vfe)).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();

    Ok(Summary {
        scenario: scenario.to_string(),
        trials: records.len(),
        converged,
        convergence_rate: converged as f64 / records.len() as f64,
        mean_final_joint_err_rad: mean_j,
        std_final_joint_err_rad: std_j,
        mean_final_ee_err_m: mean_e,
        std_final_ee_err_m: std_e,
        mean_vfe_final,
        mean_tracking_err_rad: (!tracking.is_empty()).then(|| mean_std(&tracking).0),
        mean_vfe_trajectory,
    })
}

/// Summaries keyed by trial variant (`""` for records without one).
pub fn summarize_by_variant(scenario: &str, records: &[TrialRecord]) -> Result<BTreeMap<String, Summary>> {
    let mut groups: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.summary.variant.clone().unwrap_or_default())
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| summarize(scenario, &v).map(|s| (k, s)))
        .collect()
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRIALS_FILE: &str = "trials.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrialsDocument {
    scenario: String,
    trials: Vec<TrialSummary>,
}

fn json_err(e: serde_json::Error) -> AifError {
    AifError::Parse {
        what: "JSON".into(),
        message: e.to_string(),
    }
}

/// Writes one CSV per trial, the per-trial outcomes, and the summary.
pub fn write_outputs(dir: &Path, scenario: &str, records: &[TrialRecord]) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    for record in records {
        let path = dir.join(format!("{}.csv", record.file_stem()));
        write_trial_csv(fs::File::create(path)?, record)?;
    }
    let doc = TrialsDocument {
        scenario: scenario.to_string(),
        trials: records.iter().map(|r| r.summary.clone()).collect(),
    };
    fs::write(dir.join(TRIALS_FILE), serde_json::to_string_pretty(&doc).map_err(json_err)?)?;
    let summary = summarize(scenario, records)?;
    let json = serde_json::to_string_pretty(&SummaryJson::from(&summary)).map_err(json_err)?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Reloads the records of a previous run from its output directory.
pub fn load_outputs(dir: &Path) -> Result<(String, Vec<TrialRecord>)> {
    let text = fs::read_to_string(dir.join(TRIALS_FILE))?;
    let doc: TrialsDocument = serde_json::from_str(&text).map_err(json_err)?;
    let mut records = Vec::with_capacity(doc.trials.len());
    for summary in doc.trials {
        let stem = match &summary.variant {
            Some(v) => format!("trial_{:03}_{v}", summary.trial),
            None => format!("trial_{:03}", summary.trial),
        };
        let path: PathBuf = dir.join(format!("{stem}.csv"));
        let (n_joints, rows) = read_trial_csv(&path)?;
        records.push(TrialRecord {
            n_joints,
            rows,
            summary,
        });
    }
    Ok((doc.scenario, records))
}
