//! Run reports: evaluation metrics plus the full resolved configuration, in a
//! structured key=value text form that reloads without loss, and a flat CSV
//! row for ablation tables. Metric values are reported ×100.

use anyhow::{bail, Context, Result};
use zegseg_core::metrics::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub wall_seconds: f64,
    pub eval: EvalReport,
    pub class_names: Vec<String>,
    pub seen: Vec<bool>,
    /// Full resolved training config (no hidden defaults).
    pub config_text: String,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: String, v: String| {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("report.name".into(), self.name.clone());
        kv("report.seed".into(), self.seed.to_string());
        kv("report.wall-seconds".into(), self.wall_seconds.to_string());
        kv("metric.pacc".into(), (self.eval.pixel_accuracy * 100.0).to_string());
        kv("metric.miou-seen".into(), (self.eval.miou_seen * 100.0).to_string());
        kv(
            "metric.miou-unseen".into(),
            (self.eval.miou_unseen * 100.0).to_string(),
        );
        kv("metric.hiou".into(), (self.eval.hiou * 100.0).to_string());
        for (i, iou) in self.eval.iou_per_class.iter().enumerate() {
            kv(format!("class.{i}.name"), self.class_names[i].clone());
            kv(format!("class.{i}.seen"), (self.seen[i] as u8).to_string());
            kv(
                format!("class.{i}.iou"),
                iou.map_or("absent".into(), |v| (v * 100.0).to_string()),
            );
        }
        for line in self.config_text.lines() {
            kv(format!("config.{}", line.split('=').next().unwrap_or("")), {
                line.split_once('=').map_or(String::new(), |(_, v)| v.into())
            });
        }
        s
    }

    pub fn from_text(text: &str) -> Result<RunReport> {
        let mut name = String::new();
        let mut seed = 0u64;
        let mut wall = 0.0f64;
        let mut pacc = 0.0;
        let mut s_miou = 0.0;
        let mut u_miou = 0.0;
        let mut hiou = 0.0;
        let mut classes: Vec<(String, bool, Option<f64>)> = Vec::new();
        let mut config_lines: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("bad report line `{line}`"))?;
            if let Some(rest) = k.strip_prefix("class.") {
                let (idx, field) = rest
                    .split_once('.')
                    .with_context(|| format!("bad class key `{k}`"))?;
                let idx: usize = idx.parse()?;
                if classes.len() <= idx {
                    classes.resize(idx + 1, (String::new(), false, None));
                }
                match field {
                    "name" => classes[idx].0 = v.to_string(),
                    "seen" => classes[idx].1 = v == "1",
                    "iou" => {
                        classes[idx].2 = if v == "absent" {
                            None
                        } else {
                            Some(v.parse::<f64>()? / 100.0)
                        }
                    }
                    other => bail!("unknown class field `{other}`"),
                }
            } else if let Some(key) = k.strip_prefix("config.") {
                config_lines.push(format!("{key}={v}"));
            } else {
                match k {
                    "report.name" => name = v.to_string(),
                    "report.seed" => seed = v.parse()?,
                    "report.wall-seconds" => wall = v.parse()?,
                    "metric.pacc" => pacc = v.parse::<f64>()? / 100.0,
                    "metric.miou-seen" => s_miou = v.parse::<f64>()? / 100.0,
                    "metric.miou-unseen" => u_miou = v.parse::<f64>()? / 100.0,
                    "metric.hiou" => hiou = v.parse::<f64>()? / 100.0,
                    other => bail!("unknown report key `{other}`"),
                }
            }
        }
        Ok(RunReport {
            name,
            seed,
            wall_seconds: wall,
            eval: EvalReport {
                pixel_accuracy: pacc,
                iou_per_class: classes.iter().map(|c| c.2).collect(),
                miou_seen: s_miou,
                miou_unseen: u_miou,
                hiou,
            },
            class_names: classes.iter().map(|c| c.0.clone()).collect(),
            seen: classes.iter().map(|c| c.1).collect(),
            config_text: config_lines.join("\n") + "\n",
        })
    }

    /// Per-class IoU as CSV (plot data for bar charts).
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_id,name,seen,iou_pct\n");
        for (i, iou) in self.eval.iou_per_class.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                i,
                self.class_names[i],
                self.seen[i] as u8,
                iou.map_or("".into(), |v| (v * 100.0).to_string())
            ));
        }
        s
    }
}

pub const TABLE_CSV_HEADER: &str = "name,dim,seeds,pacc,miou_seen,miou_unseen,hiou\n";
